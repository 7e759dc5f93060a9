"""EM training loop over latent nodule locations.

Weak labels say only which lobe holds a nodule and which slice is central.
The E-step turns the current detector's filtered proposals into a posterior
over which proposal the weak label refers to; the M-step takes one gradient
step on the resulting complete-data objective. Full supervision keeps the
detector anchored through one supervised pass per epoch.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import froc as froc_mod
from .detector import (DetectorParams, Proposal, box_logit, init_detector, log1m_sigmoid,
                       log_sigmoid, propose, sgd_step, supervised_examples,
                       supervised_loss)
from .froc import Detection, FrocResult
from .synthvol import LabeledScan, NoduleBox, Volume, WeakLabel, lobe_of
from .weaklik import (DEFAULT_MU, DEFAULT_SIGMA_FLOOR, HalfGaussianParams, LobeParams,
                      fit_sigma, init_lobe_params, lobe_fit_step, lobe_log_probs,
                      log_slice_likelihood)

CHECKPOINT_FORMAT = "weakem-checkpoint-v1"

METRIC_FIELDS = ("epoch", "supervised_loss", "weak_labels_used",
                 "weak_labels_skipped", "froc")


class NoProposalsError(ValueError):
    """Posterior requested over an empty proposal list."""


class NumericError(RuntimeError):
    """Training produced a non-finite quantity."""


class CheckpointError(Exception):
    """Checkpoint file is missing fields or has the wrong format tag."""


@dataclass(frozen=True)
class EmConfig:
    """Training configuration.

    ``neg_slice_margin`` of None resolves to 2 mu + 3 sigma at use time.
    ``inference`` picks how inferred positives come out of the posterior:
    "map" takes the argmax, "sampling" draws ``samples_per_label`` times.
    """

    logit_threshold: float = -3.0
    nms_iou: float = 0.1
    samples_per_label: int = 2
    weak_fraction: float = 1.0 / 16.0
    neg_slice_margin: float | None = None
    inference: str = "map"
    anchor_scales: tuple[float, ...] = (5.0, 8.0)
    stride: int = 4
    init_epochs: int = 2
    epochs: int = 12
    lr_detector: float = 0.5
    lr_lobe: float = 2.0
    mu: float = DEFAULT_MU
    sigma_floor: float = DEFAULT_SIGMA_FLOOR

    def validate(self) -> None:
        if not 0.0 < self.nms_iou < 1.0:
            raise ValueError("nms_iou must lie strictly between 0 and 1")
        if self.samples_per_label < 1:
            raise ValueError("samples_per_label must be at least 1")
        if not 0.0 < self.weak_fraction <= 1.0:
            raise ValueError("weak_fraction must lie in (0, 1]")
        if self.neg_slice_margin is not None and self.neg_slice_margin < 0:
            raise ValueError("neg_slice_margin must be nonnegative")
        if self.inference not in ("map", "sampling"):
            raise ValueError("inference must be 'map' or 'sampling'")
        if not self.anchor_scales or any(s <= 0 for s in self.anchor_scales):
            raise ValueError("anchor_scales must be positive diameters")
        if self.stride < 1:
            raise ValueError("stride must be at least 1")
        if self.init_epochs < 0 or self.epochs < 0:
            raise ValueError("epoch counts must be nonnegative")
        if self.lr_detector <= 0 or self.lr_lobe <= 0:
            raise ValueError("learning rates must be positive")
        if self.mu < 0:
            raise ValueError("mu must be nonnegative")
        if self.sigma_floor <= 0:
            raise ValueError("sigma_floor must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["anchor_scales"] = list(self.anchor_scales)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EmConfig":
        d = dict(d)
        if "anchor_scales" in d:
            d["anchor_scales"] = tuple(d["anchor_scales"])
        return cls(**d)


@dataclass
class ModelParams:
    """Everything the model learns: detector weights, lobe softmax weights,
    and the slice-noise scale (frozen after its initial fit)."""

    detector: DetectorParams
    lobe: LobeParams
    slice_noise: HalfGaussianParams

    def to_dict(self) -> dict:
        return {
            "detector": self.detector.to_dict(),
            "lobe": self.lobe.theta.tolist(),
            "slice_noise": {"sigma": self.slice_noise.sigma, "mu": self.slice_noise.mu},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelParams":
        return cls(
            DetectorParams.from_dict(d["detector"]),
            LobeParams(np.asarray(d["lobe"], dtype=np.float64)),
            HalfGaussianParams(**d["slice_noise"]),
        )


@dataclass
class Posterior:
    """Distribution over which filtered proposal a weak label refers to."""

    support: list
    weights: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if len(self.support) != len(self.weights) or not len(self.support):
            raise ValueError("support and weights must be nonempty and match")
        if not np.all(np.isfinite(self.weights)) or np.any(self.weights < 0):
            raise ValueError("weights must be finite and nonnegative")
        if abs(float(self.weights.sum()) - 1.0) > 1e-9:
            raise ValueError("weights must sum to 1")


def iou_3d(a: NoduleBox, b: NoduleBox) -> float:
    """Intersection over union of two axis-aligned cubes."""
    inter = 1.0
    for ca, cb in zip(a.center, b.center):
        overlap = min(ca + a.radius, cb + b.radius) - max(ca - a.radius, cb - b.radius)
        if overlap <= 0.0:
            return 0.0
        inter *= overlap
    union = a.diameter ** 3 + b.diameter ** 3 - inter
    return inter / union


def _conflict_matrix(boxes, nms_iou: float) -> np.ndarray:
    # pairwise IoU-above-threshold, the same arithmetic as iou_3d one axis
    # at a time, so decisions match the scalar form exactly
    centers = np.array([b.center for b in boxes])
    radii = np.array([b.radius for b in boxes])
    cubes = np.array([b.diameter ** 3 for b in boxes])
    inter = np.ones((len(boxes), len(boxes)))
    for ax in range(3):
        lo_edge = centers[:, ax] - radii
        hi_edge = centers[:, ax] + radii
        lo = np.maximum(lo_edge[:, None], lo_edge[None, :])
        hi = np.minimum(hi_edge[:, None], hi_edge[None, :])
        inter *= np.maximum(hi - lo, 0.0)
    return inter / (cubes[:, None] + cubes[None, :] - inter) > nms_iou


def _greedy_keep(order, conflict) -> list[int]:
    # greedy NMS: row r of conflict holds the boxes order[r] suppresses
    kept: list[int] = []
    suppressed = np.zeros(len(order), dtype=bool)
    for r, idx in enumerate(order):
        if not suppressed[r]:
            kept.append(idx)
            suppressed |= conflict[r]
    return kept


def filter_proposals(proposals, cfg: EmConfig) -> list[Proposal]:
    """Drop proposals below the logit threshold, then greedy NMS.

    Proposals are visited in descending logit order (ties by anchor_id) and
    kept only when their IoU with every kept proposal stays at or below
    ``cfg.nms_iou``. Output keeps that descending order.
    """
    alive = sorted((p for p in proposals if p.logit >= cfg.logit_threshold),
                   key=lambda p: (-p.logit, p.anchor_id))
    if not alive:
        return []
    conflict = _conflict_matrix([p.box for p in alive], cfg.nms_iou)
    return [alive[i] for i in _greedy_keep(range(len(alive)), conflict)]


def _scan_filtered(volume: Volume, params: ModelParams, cfg: EmConfig) -> list[Proposal]:
    # filter_proposals(propose(...)) with the pairwise overlap matrix cached
    # on the volume; anchor boxes never move, so the matrix is reusable and
    # only the threshold-and-sort step depends on the current weights
    proposals = propose(volume, params.detector, cfg.stride)
    key = ("conflict", cfg.stride, cfg.nms_iou, params.detector.scales)
    full = volume._cache.get(key)
    if full is None:
        full = _conflict_matrix([p.box for p in proposals], cfg.nms_iou)
        volume._cache[key] = full
    alive = sorted((i for i, p in enumerate(proposals) if p.logit >= cfg.logit_threshold),
                   key=lambda i: (-proposals[i].logit, i))
    if not alive:
        return []
    conflict = full[np.ix_(alive, alive)]
    return [proposals[i] for i in _greedy_keep(alive, conflict)]


def posterior(proposals, weak: WeakLabel, volume: Volume,
              params: ModelParams) -> Posterior:
    """E-step for one weak label: posterior over the filtered proposals.

    Unnormalized log weight of a proposal is log sigmoid(logit) plus the
    log slice likelihood plus the log lobe likelihood; weights are
    normalized in log space with max subtraction.
    """
    proposals = list(proposals)
    if not proposals:
        raise NoProposalsError("no surviving proposals for this weak label")
    logw = np.empty(len(proposals))
    for i, p in enumerate(proposals):
        logw[i] = (float(log_sigmoid(p.logit))
                   + log_slice_likelihood(weak.z, p.box, params.slice_noise)
                   + float(lobe_log_probs(p.box, volume, params.lobe)[weak.lobe - 1]))
    w = np.exp(logw - logw.max())
    w /= w.sum()
    return Posterior(proposals, w)


def infer_map(post: Posterior) -> Proposal:
    """Highest-posterior proposal; exact ties take the lower anchor_id."""
    best = 0
    for i in range(1, len(post.support)):
        wi, wb = float(post.weights[i]), float(post.weights[best])
        if wi > wb or (wi == wb and post.support[i].anchor_id < post.support[best].anchor_id):
            best = i
    return post.support[best]


def infer_sampling(post: Posterior, m_hat: int, rng: np.random.Generator) -> list:
    """``m_hat`` independent draws from the posterior, with replacement."""
    if m_hat < 1:
        raise ValueError("m_hat must be at least 1")
    idx = rng.choice(len(post.support), size=m_hat, replace=True, p=post.weights)
    return [post.support[int(i)] for i in idx]


def resolve_neg_margin(cfg: EmConfig, hg: HalfGaussianParams) -> float:
    """Slice distance beyond which a proposal cannot belong to any weak label."""
    if cfg.neg_slice_margin is not None:
        return cfg.neg_slice_margin
    return 2.0 * hg.mu + 3.0 * hg.sigma


def hard_negatives(proposals, weak_labels, cfg: EmConfig,
                   hg: HalfGaussianParams) -> list[Proposal]:
    """High-scoring filtered proposals far from every reported slice.

    A proposal qualifies when its slice distance to each weak label exceeds
    the margin; the top of the logit ordering is kept, capped at twice the
    number of weak labels and at least 2. With no weak labels every
    proposal qualifies.
    """
    margin = resolve_neg_margin(cfg, hg)
    weak_labels = list(weak_labels)
    qualifying = [p for p in proposals
                  if all(abs(p.box.z - w.z) > margin for w in weak_labels)]
    qualifying.sort(key=lambda p: (-p.logit, p.anchor_id))
    cap = max(2, 2 * len(weak_labels))
    return qualifying[:cap]


def weak_m_step(volume: Volume, weak_boxes, negatives, params: ModelParams,
                cfg: EmConfig, lr_scale: float = 1.0) -> ModelParams:
    """One ascent step on the complete-data objective of a weak scan.

    ``weak_boxes`` holds (weak label, inferred box) pairs, flattened over
    labels and posterior draws so the supervised loss averages over all of
    them; ``negatives`` are plain boxes. The detector and the lobe softmax
    move one step each from the same input params; the slice-noise scale
    stays frozen. ``lr_scale`` multiplies both learning rates so the caller
    can anneal the step size over epochs.
    """
    weak_boxes = list(weak_boxes)
    negatives = list(negatives)
    detector = params.detector
    lobe = params.lobe
    if weak_boxes or negatives:
        _, grad = supervised_loss(volume, [b for _, b in weak_boxes], negatives, detector)
        detector = sgd_step(detector, grad, cfg.lr_detector * lr_scale)
    if weak_boxes:
        lobe, _ = lobe_fit_step([(w.lobe, b, volume) for w, b in weak_boxes],
                                lobe, cfg.lr_lobe * lr_scale)
    return ModelParams(detector, lobe, params.slice_noise)


def q_value(volume: Volume, weak_boxes, negatives, params: ModelParams) -> float:
    """Complete-data objective for fixed inferred positives.

    Mean over (weak label, box) pairs of log sigmoid(logit) plus the log
    slice and lobe likelihoods, plus the mean over negatives of
    log(1 - sigmoid(logit)). This is exactly the quantity ``weak_m_step``
    ascends, so a small enough step never decreases it.
    """
    weak_boxes = list(weak_boxes)
    negatives = list(negatives)
    if not weak_boxes and not negatives:
        raise ValueError("need at least one inferred positive or negative")
    total = 0.0
    if weak_boxes:
        acc = 0.0
        for w, box in weak_boxes:
            logit, _, _ = box_logit(volume, box, params.detector)
            acc += (float(log_sigmoid(logit))
                    + log_slice_likelihood(w.z, box, params.slice_noise)
                    + float(lobe_log_probs(box, volume, params.lobe)[w.lobe - 1]))
        total += acc / len(weak_boxes)
    if negatives:
        acc = 0.0
        for box in negatives:
            logit, _, _ = box_logit(volume, box, params.detector)
            acc += float(log1m_sigmoid(logit))
        total += acc / len(negatives)
    return total


@dataclass
class EpochMetrics:
    epoch: int
    supervised_loss: float
    weak_labels_used: int
    weak_labels_skipped: int
    froc: float


@dataclass
class TrainResult:
    params: ModelParams
    history: list[EpochMetrics] = field(default_factory=list)


def scan_detections(volume: Volume, params: ModelParams, cfg: EmConfig,
                    scan_id: int = 0) -> list[Detection]:
    """Propose, filter, and score one scan."""
    kept = _scan_filtered(volume, params, cfg)
    return [Detection(scan_id, p.box, p.probability) for p in kept]


def evaluate_froc(scans, params: ModelParams, cfg: EmConfig) -> FrocResult:
    """FROC of the current detector over a labeled dataset."""
    detections: list[Detection] = []
    for i, scan in enumerate(scans):
        detections.extend(scan_detections(scan.volume, params, cfg, scan_id=i))
    return froc_mod.froc(detections, [scan.truth for scan in scans])


_MAX_HALVINGS = 20


def _supervised_pass(d_full, params: ModelParams, cfg: EmConfig,
                     lr_scale: float = 1.0):
    # one full-batch step per pass: per-scan losses and gradients are
    # averaged over the dataset, then the step is backtracked (halved) until
    # the loss on the examples mined this pass does not increase. The mined
    # hard-negative set flips between passes, which sustains a bounded
    # oscillation at constant step size; the caller anneals lr_scale so the
    # oscillation dies out while the stable feature weights keep their
    # equilibrium.
    detector = params.detector
    mined = []
    losses = []
    grads = []
    lobe_pairs = []
    for scan in d_full:
        positives, negatives = supervised_examples(scan.volume, scan.truth, detector,
                                                   cfg.stride)
        if positives or negatives:
            loss, grad = supervised_loss(scan.volume, positives, negatives, detector)
            mined.append((scan.volume, positives, negatives))
            losses.append(loss)
            grads.append(grad)
        lobe_pairs.extend((lobe_of(t.center, scan.volume), t, scan.volume)
                          for t in scan.truth)
    mean_loss = float(np.mean(losses)) if losses else 0.0
    if grads:
        grad = np.mean(grads, axis=0)
        step = cfg.lr_detector * lr_scale
        for _ in range(_MAX_HALVINGS):
            candidate = sgd_step(detector, grad, step)
            stepped_loss = float(np.mean([supervised_loss(v, p, n, candidate)[0]
                                          for v, p, n in mined]))
            if stepped_loss <= mean_loss:
                break
            step /= 2.0
        detector = candidate
    lobe = params.lobe
    if lobe_pairs:
        step = cfg.lr_lobe
        nll = lobe_fit_step(lobe_pairs, lobe, step)[1]
        for _ in range(_MAX_HALVINGS):
            candidate_lobe = lobe_fit_step(lobe_pairs, lobe, step)[0]
            if lobe_fit_step(lobe_pairs, candidate_lobe, step)[1] <= nll:
                break
            step /= 2.0
        lobe = candidate_lobe
    return ModelParams(detector, lobe, params.slice_noise), mean_loss


def _weak_scan_estep(scan: LabeledScan, params: ModelParams, cfg: EmConfig,
                     rng: np.random.Generator):
    # E-step for one weak scan under frozen params; truth is never consulted
    filtered = _scan_filtered(scan.volume, params, cfg)
    weak_boxes: list[tuple[WeakLabel, NoduleBox]] = []
    used = skipped = 0
    for w in scan.weak:
        if not filtered:
            skipped += 1
            continue
        post = posterior(filtered, w, scan.volume, params)
        if cfg.inference == "map":
            chosen = [infer_map(post)]
        else:
            chosen = infer_sampling(post, cfg.samples_per_label, rng)
        weak_boxes.extend((w, c.box) for c in chosen)
        used += 1
    negatives = [p.box for p in hard_negatives(filtered, scan.weak, cfg, params.slice_noise)]
    return used, skipped, weak_boxes, negatives


def _weak_batch_m_step(batch, params: ModelParams, cfg: EmConfig, lr_scale: float):
    # one ascent step on the subsample's complete-data objective: per-scan
    # gradients are averaged, because sequential single-scan steps teach
    # "positive near this scan's reported slice, negative far from it" and
    # random-walk the shared weights scan by scan
    grads = [supervised_loss(volume, [b for _, b in weak_boxes], negatives,
                             params.detector)[1]
             for volume, weak_boxes, negatives in batch]
    detector = sgd_step(params.detector, np.mean(grads, axis=0),
                        cfg.lr_detector * lr_scale)
    pairs = [(w.lobe, b, volume) for volume, weak_boxes, _ in batch
             for w, b in weak_boxes]
    lobe = params.lobe
    if pairs:
        lobe = lobe_fit_step(pairs, lobe, cfg.lr_lobe * lr_scale)[0]
    return ModelParams(detector, lobe, params.slice_noise)


def initialize_params(d_full, cfg: EmConfig) -> ModelParams:
    """Fresh model: zero detector and lobe weights, slice noise fitted from
    the (reported slice, truth box) pairs of the fully labeled set. With no
    such pairs the slice scale falls back to the floor."""
    pairs = []
    for scan in d_full:
        for w, t in zip(scan.weak, scan.truth):
            pairs.append((w.z, t))
    if pairs:
        hg = fit_sigma(pairs, mu=cfg.mu, sigma_floor=cfg.sigma_floor)
    else:
        hg = HalfGaussianParams(sigma=cfg.sigma_floor, mu=cfg.mu)
    return ModelParams(init_detector(cfg.anchor_scales), init_lobe_params(), hg)


def train_em(d_full, d_weak, d_val, cfg: EmConfig, rng=0) -> TrainResult:
    """Alternating training over fully and weakly labeled scans.

    After ``cfg.init_epochs`` supervised passes over ``d_full``, each epoch
    runs an EM pass over a fresh ``weak_fraction`` subsample of ``d_weak``
    (weak labels with no surviving proposals are skipped and counted),
    then one supervised pass over ``d_full``, then a FROC evaluation on
    ``d_val``. Step sizes stay at their configured values through the first
    third of the warm start and decay as 1/t afterwards, t counting passes
    from the start; hard-example mining otherwise sustains a bounded
    parameter oscillation at any constant step size, and the weak phase
    must begin only once that oscillation has been damped, or inferred
    positives from the still-unsettled detector poison the model. With
    ``d_weak`` empty the trajectory is exactly the supervised-only one for
    the same seed. Deterministic given (inputs, cfg, seed).
    """
    cfg.validate()
    d_full, d_weak = list(d_full), list(d_weak)
    d_val = list(d_val) if d_val is not None else []
    if not d_full:
        raise ValueError("need at least one fully labeled scan")
    rng = np.random.default_rng(rng)
    params = initialize_params(d_full, cfg)
    onset = max(1, -(-cfg.init_epochs // 3))
    for t in range(1, cfg.init_epochs + 1):
        params, _ = _supervised_pass(d_full, params, cfg, min(1.0, onset / t))
    history: list[EpochMetrics] = []
    for epoch in range(1, cfg.epochs + 1):
        scale = onset / (cfg.init_epochs + epoch)
        used = skipped = 0
        if d_weak:
            n_sub = min(len(d_weak), max(1, int(cfg.weak_fraction * len(d_weak))))
            chosen = np.sort(rng.choice(len(d_weak), size=n_sub, replace=False))
            batch = []
            for i in chosen:
                scan = d_weak[int(i)]
                u, s, weak_boxes, negatives = _weak_scan_estep(scan, params, cfg, rng)
                used += u
                skipped += s
                if weak_boxes or negatives:
                    batch.append((scan.volume, weak_boxes, negatives))
            if batch:
                params = _weak_batch_m_step(batch, params, cfg, scale)
        params, mean_loss = _supervised_pass(d_full, params, cfg, scale)
        if not math.isfinite(mean_loss):
            raise NumericError(f"supervised loss became non-finite at epoch {epoch}")
        froc_avg = evaluate_froc(d_val, params, cfg).average if d_val else float("nan")
        history.append(EpochMetrics(epoch, mean_loss, used, skipped, froc_avg))
    return TrainResult(params, history)


def save_checkpoint(path, params: ModelParams, cfg: EmConfig, epoch: int) -> None:
    """Write params, config, and the epoch counter as deterministic JSON."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "epoch": int(epoch),
        "config": cfg.to_dict(),
        "params": params.to_dict(),
    }
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")


def load_checkpoint(path):
    """Read a checkpoint; returns (params, cfg, epoch)."""
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"checkpoint is not valid JSON: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(
            f"expected checkpoint format {CHECKPOINT_FORMAT!r}, "
            f"got {payload.get('format') if isinstance(payload, dict) else payload!r}")
    try:
        params = ModelParams.from_dict(payload["params"])
        cfg = EmConfig.from_dict(payload["config"])
        epoch = int(payload["epoch"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"checkpoint is missing or corrupts a field: {exc}") from exc
    return params, cfg, epoch


def write_metrics_csv(path, history) -> None:
    """One row per epoch: epoch, supervised_loss, weak_labels_used,
    weak_labels_skipped, froc."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRIC_FIELDS)
        for m in history:
            writer.writerow([m.epoch, repr(m.supervised_loss), m.weak_labels_used,
                             m.weak_labels_skipped, repr(m.froc)])


def read_metrics_csv(path) -> list[EpochMetrics]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [EpochMetrics(int(r["epoch"]), float(r["supervised_loss"]),
                         int(r["weak_labels_used"]), int(r["weak_labels_skipped"]),
                         float(r["froc"])) for r in rows]
