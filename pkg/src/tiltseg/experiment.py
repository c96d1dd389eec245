"""Train/evaluate glue shared by the CLI and the trend comparison."""

import hashlib
import json
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from . import segmetrics, synthseg
from .diffmodel import LossKind, predict
from .losses import inverse_frequency_alpha
from .trainer import TrainerConfig, baseline_train, stochastic_tce_train

METHODS = ("mcce", "focal", "tce-stochastic")


def split_indices(num_samples, eval_fraction=0.2, seed=0):
    """Seeded shuffle into ``(train, eval)`` index arrays, each sorted."""
    if not 0.0 <= eval_fraction < 1.0:
        raise ValueError(f"eval fraction must be in [0, 1), got {eval_fraction}")
    perm = np.random.default_rng(np.random.SeedSequence([seed, 0x5E6])).permutation(num_samples)
    n_eval = int(round(eval_fraction * num_samples))
    if num_samples - n_eval < 1:
        raise ValueError("split leaves no training samples")
    return np.sort(perm[n_eval:]), np.sort(perm[:n_eval])


def confusion(params, dataset, batch=64):
    mat = segmetrics.confusion_matrix(dataset.num_classes)
    for start in range(0, len(dataset), batch):
        sl = slice(start, start + batch)
        pred = predict(params, dataset.features[sl])
        segmetrics.accumulate_confusion(pred, dataset.labels[sl], mat, dataset.ignore_value)
    return mat


def evaluate(params, dataset):
    """Per-class IoU in [0, 1] (``nan`` for undefined classes)."""
    return segmetrics.iou_per_class(confusion(params, dataset))


def train(dataset, method, config, focal_gamma=2.0, alpha="inverse"):
    """Dispatch to the trainer for ``method``. Returns ``(params, trace)``.

    For focal, ``alpha`` is ``"inverse"`` (inverse normalized pixel counts of
    ``dataset``), ``"uniform"`` or an explicit sequence.
    """
    if method == "tce-stochastic":
        return stochastic_tce_train(dataset, config)
    if method == "mcce":
        return baseline_train(dataset, _with_loss(config, LossKind.mcce()))
    if method == "focal":
        if isinstance(alpha, str):
            if alpha == "inverse":
                alpha = inverse_frequency_alpha(dataset.labels, dataset.num_classes, dataset.ignore_value)
            elif alpha == "uniform":
                alpha = None
            else:
                raise ValueError(f"alpha must be 'inverse', 'uniform' or a list, got {alpha!r}")
        return baseline_train(dataset, _with_loss(config, LossKind.focal(focal_gamma, alpha)))
    raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")


def _with_loss(config, loss):
    return replace(config, loss=loss)


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a ``train`` run depends on.

    Exactly one of ``dataset`` (an SSEG1 path) or ``synth`` (a synthetic
    generator config) may be set; with neither the default synthetic task is
    generated with ``seed``.
    """

    method: str = "tce-stochastic"
    dataset: str | None = None
    synth: dict | None = None
    t: float | None = None
    gamma: float | None = None  # accumulator rate of tce-stochastic
    focal_gamma: float | None = None
    alpha: object = "inverse"
    eta: float = 0.01
    momentum: float = 0.9
    steps: int = 2000
    batch: int = 8
    partition: str = "overlapping"
    seed: int = 0
    arch: str = "linear"
    hidden: int = 16
    eval_fraction: float = 0.2
    k_fraction: float = 0.25
    reference_ious: str | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.method == "tce-stochastic":
            missing = [n for n in ("t", "gamma") if getattr(self, n) is None]
            if missing:
                raise ValueError(f"method tce-stochastic requires field(s): {', '.join(missing)}")
        if self.method == "focal" and self.focal_gamma is None:
            raise ValueError("method focal requires field: focal_gamma")
        if self.dataset is not None and self.synth is not None:
            raise ValueError("set either 'dataset' or 'synth', not both")
        if not 0.0 <= self.eval_fraction < 1.0:
            raise ValueError("eval_fraction must be in [0, 1)")
        if not 0.0 < self.k_fraction <= 0.5:
            raise ValueError(f"k_fraction must be in (0, 0.5], got {self.k_fraction}")
        self.trainer_config()  # validates the trainer fields

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown experiment config field(s): {sorted(unknown)}")
        return cls(**data)

    def to_dict(self):
        return asdict(self)

    def config_hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]

    def trainer_config(self):
        return TrainerConfig(
            t=0.0 if self.t is None else float(self.t),
            ema_rate=0.1 if self.gamma is None else float(self.gamma),
            lr=float(self.eta),
            momentum=float(self.momentum),
            steps=int(self.steps),
            batch_size=int(self.batch),
            partition=self.partition,
            seed=int(self.seed),
            arch=self.arch,
            hidden=int(self.hidden),
        )

    def synth_config(self):
        if self.synth is not None:
            return synthseg.SynthConfig.from_dict(self.synth)
        return synthseg.default_config(seed=int(self.seed))

    def load_dataset(self):
        if self.dataset is not None:
            return synthseg.load(self.dataset)
        return synthseg.generate(self.synth_config())
