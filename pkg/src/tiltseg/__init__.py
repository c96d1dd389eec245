"""Tilted cross-entropy for semantic segmentation.

Tilted loss aggregation, a small per-pixel classifier with analytic
gradients, stochastic class-sampling training, IoU fairness metrics and a
synthetic imbalanced segmentation task.
"""

from .diffmodel import LossKind, ModelParams, forward, init_params, loss_and_grad
from .losses import focal_loss, mcce_loss, tce_class_loss, tce_image_loss
from .segmetrics import FairnessReport, fairness_report, iou_per_class, miou
from .synthseg import SegDataset, SynthConfig, generate
from .tilt import tilt_aggregate, tilt_weights
from .trainer import TrainerConfig, baseline_train, stochastic_tce_train

__version__ = "0.1.0"

__all__ = [
    "LossKind",
    "ModelParams",
    "forward",
    "init_params",
    "loss_and_grad",
    "mcce_loss",
    "tce_image_loss",
    "tce_class_loss",
    "focal_loss",
    "FairnessReport",
    "fairness_report",
    "iou_per_class",
    "miou",
    "SegDataset",
    "SynthConfig",
    "generate",
    "tilt_aggregate",
    "tilt_weights",
    "TrainerConfig",
    "baseline_train",
    "stochastic_tce_train",
]
