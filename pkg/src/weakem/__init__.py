"""EM training of a volumetric nodule detector from mixed supervision.

Fully labeled scans carry ground-truth boxes; weakly labeled scans carry
only a lobe id and a central slice per nodule. The EM loop treats the true
box behind each weak label as latent, scores detector proposals against the
weak evidence, and trains on the inferred boxes.
"""

from .detector import (DetectorParams, Proposal, extract_features, init_detector,
                       propose, sgd_step, supervised_loss)
from .em import (EmConfig, ModelParams, Posterior, TrainResult, evaluate_froc,
                 filter_proposals, hard_negatives, infer_map, infer_sampling, iou_3d,
                 load_checkpoint, posterior, q_value, save_checkpoint, train_em,
                 weak_m_step)
from .froc import FP_RATES, Detection, FrocResult, froc, match
from .synthvol import (GeneratorConfig, LabeledScan, NoduleBox, Volume, WeakLabel,
                       attach_weak_labels, generate_scan, load_dataset, lobe_of,
                       save_dataset, weaken)
from .weaklik import (HalfGaussianParams, LobeParams, fit_sigma, lobe_fit_step,
                      lobe_likelihood, slice_likelihood)

__all__ = [
    "DetectorParams", "Proposal", "extract_features", "init_detector", "propose",
    "sgd_step", "supervised_loss",
    "EmConfig", "ModelParams", "Posterior", "TrainResult", "evaluate_froc",
    "filter_proposals", "hard_negatives", "infer_map", "infer_sampling", "iou_3d",
    "load_checkpoint", "posterior", "q_value", "save_checkpoint", "train_em",
    "weak_m_step",
    "FP_RATES", "Detection", "FrocResult", "froc", "match",
    "GeneratorConfig", "LabeledScan", "NoduleBox", "Volume", "WeakLabel",
    "attach_weak_labels", "generate_scan", "load_dataset", "lobe_of", "save_dataset",
    "weaken",
    "HalfGaussianParams", "LobeParams", "fit_sigma", "lobe_fit_step", "lobe_likelihood",
    "slice_likelihood",
]
