"""Anchor-grid nodule proposals scored by a linear model on window statistics.

The scorer replaces a convolutional network at desk scale while keeping the
same external behavior: every anchor box gets a logit, sigmoid(logit) is the
nodule probability, and training is stochastic gradient descent on the
standard positive/negative cross-entropy objective with an exact analytic
gradient.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import maximum_filter

from .synthvol import NoduleBox, Volume

N_FEATURES = 8


def sigmoid(x):
    """Numerically stable logistic function for scalars or arrays."""
    arr = np.asarray(x, dtype=np.float64)
    out = np.empty_like(arr)
    pos = arr >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-arr[pos]))
    ex = np.exp(arr[~pos])
    out[~pos] = ex / (1.0 + ex)
    return float(out) if out.ndim == 0 else out


def log_sigmoid(x):
    return -np.logaddexp(0.0, -np.asarray(x, dtype=np.float64))


def log1m_sigmoid(x):
    # log(1 - sigmoid(x)), stable for large positive x
    return -np.logaddexp(0.0, np.asarray(x, dtype=np.float64))


@dataclass(frozen=True)
class Proposal:
    """One scored candidate box from the anchor grid."""

    box: NoduleBox
    logit: float
    anchor_id: int

    @property
    def probability(self) -> float:
        return float(sigmoid(self.logit))


@dataclass
class DetectorParams:
    """Linear scorer parameters: N_FEATURES shared feature weights followed
    by one bias per anchor scale. ``scales`` are the anchor diameters."""

    weights: np.ndarray
    scales: tuple[float, ...]

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64).copy()
        self.scales = tuple(float(s) for s in self.scales)
        if not self.scales or any(s <= 0 for s in self.scales):
            raise ValueError("scales must be a nonempty tuple of positive diameters")
        if self.weights.shape != (N_FEATURES + len(self.scales),):
            raise ValueError(
                f"weights must have length {N_FEATURES + len(self.scales)}, "
                f"got {self.weights.shape}")
        if not np.all(np.isfinite(self.weights)):
            raise ValueError("weights must be finite")

    def to_dict(self) -> dict:
        return {"weights": self.weights.tolist(), "scales": list(self.scales)}

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorParams":
        return cls(np.asarray(d["weights"], dtype=np.float64), tuple(d["scales"]))


def init_detector(scales) -> DetectorParams:
    """Zero-initialized scorer: every box starts at probability 0.5."""
    scales = tuple(float(s) for s in scales)
    return DetectorParams(np.zeros(N_FEATURES + len(scales)), scales)


def _tables(volume: Volume):
    # cached zero-padded summed-volume tables of value and squared value
    t = volume._cache.get("sat")
    if t is None:
        v = volume.voxels.astype(np.float64)
        sat = np.zeros(tuple(n + 1 for n in v.shape))
        sat[1:, 1:, 1:] = v.cumsum(0).cumsum(1).cumsum(2)
        sat2 = np.zeros_like(sat)
        sat2[1:, 1:, 1:] = (v * v).cumsum(0).cumsum(1).cumsum(2)
        t = (sat, sat2)
        volume._cache["sat"] = t
    return t


def _window_sum(sat, x0, x1, y0, y1, z0, z1):
    # inclusion-exclusion over the padded table; bounds are half-open
    return (sat[x1, y1, z1] - sat[x0, y1, z1] - sat[x1, y0, z1] - sat[x1, y1, z0]
            + sat[x0, y0, z1] + sat[x0, y1, z0] + sat[x1, y0, z0] - sat[x0, y0, z0])


def _axis_bounds(center, half: float, shape) -> tuple:
    # voxel centers within [c - half, c + half] per axis, clipped to the grid
    out = []
    for c, size in zip(center, shape):
        lo = max(int(math.ceil(c - half)), 0)
        hi = min(int(math.floor(c + half)) + 1, size)
        out.append((lo, hi))
    return tuple(out)


def extract_features(volume: Volume, box: NoduleBox) -> np.ndarray:
    """Fixed-length descriptor of one box.

    Components: mean, max, and std of intensity over voxel centers inside
    the cube; ring contrast (inside mean minus the mean over the side-2d
    shell); center coordinates normalized by the grid shape; log diameter.
    Purely a function of (volume, box); memoized per volume, so treat the
    returned vector as read-only.
    """
    memo_key = ("feat", box.x, box.y, box.z, box.diameter)
    cached = volume._cache.get(memo_key)
    if cached is not None:
        return cached
    shape = volume.shape
    (x0, x1), (y0, y1), (z0, z1) = _axis_bounds(box.center, box.radius, shape)
    if x0 >= x1 or y0 >= y1 or z0 >= z1:
        raise ValueError("box does not cover any voxel center inside the grid")
    (X0, X1), (Y0, Y1), (Z0, Z1) = _axis_bounds(box.center, box.diameter, shape)
    sat, sat2 = _tables(volume)
    n_in = (x1 - x0) * (y1 - y0) * (z1 - z0)
    s_in = _window_sum(sat, x0, x1, y0, y1, z0, z1)
    q_in = _window_sum(sat2, x0, x1, y0, y1, z0, z1)
    mean_in = s_in / n_in
    std_in = math.sqrt(max(q_in / n_in - mean_in * mean_in, 0.0))
    max_in = float(volume.voxels[x0:x1, y0:y1, z0:z1].max())
    n_out = (X1 - X0) * (Y1 - Y0) * (Z1 - Z0)
    s_out = _window_sum(sat, X0, X1, Y0, Y1, Z0, Z1)
    n_shell = n_out - n_in
    shell_mean = (s_out - s_in) / n_shell if n_shell > 0 else mean_in
    feats = np.array([
        mean_in,
        max_in,
        std_in,
        mean_in - shell_mean,
        box.x / shape[0],
        box.y / shape[1],
        box.z / shape[2],
        math.log(box.diameter),
    ], dtype=np.float64)
    volume._cache[memo_key] = feats
    return feats


def anchor_points(volume: Volume, stride: int) -> np.ndarray:
    """Integer anchor centers on a stride grid over the lung region,
    in ascending (x, y, z) lexicographic order. Shape (n, 3)."""
    if stride < 1:
        raise ValueError("stride must be at least 1")
    axes = [np.arange(volume.lung_lo[a], volume.lung_hi[a], stride) for a in range(3)]
    grid = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.ravel() for g in grid], axis=1).astype(np.int64)


def _max_filtered(volume: Volume, size: int) -> np.ndarray:
    key = ("maxf", size)
    out = volume._cache.get(key)
    if out is None:
        out = maximum_filter(volume.voxels, size=size, mode="constant", cval=-np.inf)
        volume._cache[key] = out
    return out


def _batch_features(volume: Volume, pts: np.ndarray, scale: float) -> np.ndarray:
    # same statistics as extract_features, for all integer centers at one scale
    shape = volume.shape
    sat, sat2 = _tables(volume)
    a_in = int(math.floor(scale / 2.0))
    a_out = int(math.floor(scale))
    feats = np.empty((len(pts), N_FEATURES), dtype=np.float64)

    def sums(table, reach):
        lo = np.clip(pts - reach, 0, None)
        hi = np.minimum(pts + reach + 1, np.asarray(shape))
        count = np.prod(hi - lo, axis=1)
        total = _window_sum(table, lo[:, 0], hi[:, 0], lo[:, 1], hi[:, 1], lo[:, 2], hi[:, 2])
        return count, total

    n_in, s_in = sums(sat, a_in)
    _, q_in = sums(sat2, a_in)
    n_out, s_out = sums(sat, a_out)
    mean_in = s_in / n_in
    feats[:, 0] = mean_in
    feats[:, 1] = _max_filtered(volume, 2 * a_in + 1)[pts[:, 0], pts[:, 1], pts[:, 2]]
    feats[:, 2] = np.sqrt(np.maximum(q_in / n_in - mean_in * mean_in, 0.0))
    n_shell = n_out - n_in
    shell_mean = np.where(n_shell > 0, (s_out - s_in) / np.maximum(n_shell, 1), mean_in)
    feats[:, 3] = mean_in - shell_mean
    feats[:, 4] = pts[:, 0] / shape[0]
    feats[:, 5] = pts[:, 1] / shape[1]
    feats[:, 6] = pts[:, 2] / shape[2]
    feats[:, 7] = math.log(scale)
    return feats


def _anchor_grid(volume: Volume, stride: int, scales):
    # anchor centers and their per-scale feature matrices; params-independent,
    # so computed once per (volume, stride, scales) and cached on the volume
    key = ("grid", stride, scales)
    out = volume._cache.get(key)
    if out is None:
        pts = anchor_points(volume, stride)
        feats = tuple(_batch_features(volume, pts, s) for s in scales)
        out = (pts, feats)
        volume._cache[key] = out
    return out


def grid_logits(volume: Volume, params: DetectorParams, stride: int) -> np.ndarray:
    """Logits of every anchor box as an (n grid points, n scales) array,
    rows in ``anchor_points`` order; row i scale j is anchor_id i*n_scales+j."""
    pts, feats = _anchor_grid(volume, stride, params.scales)
    logits = np.empty((len(pts), len(params.scales)), dtype=np.float64)
    for j in range(len(params.scales)):
        logits[:, j] = feats[j] @ params.weights[:N_FEATURES] + params.weights[N_FEATURES + j]
    return logits


def _anchor_boxes(volume: Volume, stride: int, scales) -> list[NoduleBox]:
    # the anchor grid as box objects in anchor_id order, cached per volume
    key = ("boxes", stride, scales)
    boxes = volume._cache.get(key)
    if boxes is None:
        pts, _ = _anchor_grid(volume, stride, scales)
        boxes = [NoduleBox(float(px), float(py), float(pz), scale)
                 for px, py, pz in pts for scale in scales]
        volume._cache[key] = boxes
    return boxes


def propose(volume: Volume, params: DetectorParams, stride: int) -> list[Proposal]:
    """Score every anchor box: one proposal per grid point per scale.

    Output order is deterministic, grid points in ascending (x, y, z) order
    with scales innermost, and ``anchor_id`` is the rank in that order.
    """
    boxes = _anchor_boxes(volume, stride, params.scales)
    logits = grid_logits(volume, params, stride).ravel()
    return [Proposal(box, float(logit), i)
            for i, (box, logit) in enumerate(zip(boxes, logits))]


def _scale_index(scales, diameter: float) -> int:
    # nearest anchor scale in log space; ties take the lower index
    best, best_gap = 0, float("inf")
    for j, s in enumerate(scales):
        gap = abs(math.log(diameter) - math.log(s))
        if gap < best_gap:
            best, best_gap = j, gap
    return best


def box_logit(volume: Volume, box: NoduleBox, params: DetectorParams):
    """Logit of one box plus the pieces the gradient needs.

    Returns (logit, features, scale index). Boxes that are not anchor boxes
    use the bias of the scale nearest their diameter.
    """
    feats = extract_features(volume, box)
    j = _scale_index(params.scales, box.diameter)
    logit = float(feats @ params.weights[:N_FEATURES] + params.weights[N_FEATURES + j])
    return logit, feats, j


def supervised_loss(volume: Volume, positives, negatives, params: DetectorParams):
    """Cross-entropy of labeled boxes with its exact analytic gradient.

    loss = -[ mean over positives of log sigmoid(logit)
            + mean over negatives of log(1 - sigmoid(logit)) ]

    Either list may be empty, but not both. Returns (loss, gradient) where
    the gradient is taken in ``params.weights``.
    """
    positives, negatives = list(positives), list(negatives)
    if not positives and not negatives:
        raise ValueError("need at least one positive or negative box")
    grad = np.zeros_like(params.weights)
    loss = 0.0
    if positives:
        inv = 1.0 / len(positives)
        for box in positives:
            logit, feats, j = box_logit(volume, box, params)
            loss -= float(log_sigmoid(logit)) * inv
            slope = (sigmoid(logit) - 1.0) * inv
            grad[:N_FEATURES] += slope * feats
            grad[N_FEATURES + j] += slope
    if negatives:
        inv = 1.0 / len(negatives)
        for box in negatives:
            logit, feats, j = box_logit(volume, box, params)
            loss -= float(log1m_sigmoid(logit)) * inv
            slope = sigmoid(logit) * inv
            grad[:N_FEATURES] += slope * feats
            grad[N_FEATURES + j] += slope
    return float(loss), grad


def sgd_step(params: DetectorParams, gradient, learning_rate: float) -> DetectorParams:
    """One descent step; pure, the input params are untouched."""
    if learning_rate <= 0:
        raise ValueError("learning rate must be positive")
    grad = np.asarray(gradient, dtype=np.float64)
    if grad.shape != params.weights.shape:
        raise ValueError("gradient shape does not match the weights")
    if not np.all(np.isfinite(grad)):
        raise ValueError("non-finite gradient")
    return DetectorParams(params.weights - learning_rate * grad, params.scales)


def _truth_key(truths) -> tuple:
    return tuple((t.x, t.y, t.z, t.diameter) for t in truths)


def match_positive_anchors(volume: Volume, truths, scales, stride: int) -> list[NoduleBox]:
    """Anchor boxes labeled positive for supervised training.

    A grid point matches a truth when it lies within the truth radius of its
    center; matched points use the scale nearest the truth diameter. A truth
    with no in-radius grid point falls back to its single nearest point, so
    every truth contributes at least one positive. Params-independent, so
    the result is cached per volume.
    """
    scales = tuple(float(s) for s in scales)
    memo_key = ("positives", stride, scales, _truth_key(truths))
    cached = volume._cache.get(memo_key)
    if cached is not None:
        return list(cached)
    pts = anchor_points(volume, stride)
    out: list[NoduleBox] = []
    seen = set()
    for t in truths:
        d2 = ((pts - np.asarray(t.center)) ** 2).sum(axis=1)
        idx = np.flatnonzero(d2 <= t.radius ** 2)
        if idx.size == 0:
            idx = np.array([int(np.argmin(d2))])
        scale = scales[_scale_index(scales, t.diameter)]
        for i in idx:
            key = (int(pts[i, 0]), int(pts[i, 1]), int(pts[i, 2]), scale)
            if key not in seen:
                seen.add(key)
                out.append(NoduleBox(float(pts[i, 0]), float(pts[i, 1]), float(pts[i, 2]), scale))
    volume._cache[memo_key] = out
    return list(out)


def _non_positive_ids(volume: Volume, truths, stride: int, n_scales: int) -> np.ndarray:
    # anchor_ids whose grid point lies outside every truth radius, ascending;
    # geometry only, cached per volume
    memo_key = ("non-positive", stride, n_scales, _truth_key(truths))
    cached = volume._cache.get(memo_key)
    if cached is None:
        pts = anchor_points(volume, stride)
        outside = np.ones(len(pts), dtype=bool)
        for t in truths:
            d2 = ((pts - np.asarray(t.center)) ** 2).sum(axis=1)
            outside &= d2 > t.radius ** 2
        cached = np.flatnonzero(np.repeat(outside, n_scales) if n_scales > 1
                                else outside).astype(np.int64)
        volume._cache[memo_key] = cached
    return cached


def supervised_examples(volume: Volume, truths, params: DetectorParams, stride: int):
    """Training boxes for one fully labeled scan.

    Positives come from ``match_positive_anchors``. Negatives are the
    highest-logit anchors whose grid point is outside every truth radius,
    capped at twice the positive count and at least 2; ties in logit break
    toward the lower anchor_id.
    """
    positives = match_positive_anchors(volume, truths, params.scales, stride)
    boxes = _anchor_boxes(volume, stride, params.scales)
    flat_logits = grid_logits(volume, params, stride).ravel()
    ids = _non_positive_ids(volume, truths, stride, len(params.scales))
    k = max(2, 2 * len(positives))
    order = ids[np.lexsort((ids, -flat_logits[ids]))][:k]
    return positives, [boxes[i] for i in order]
