"""Stochastic TCE training and uniform-sampling baselines.

Per step of :func:`stochastic_tce_train`:

1. draw a class ``c`` from the categorical distribution ``w``
2. draw a minibatch from the samples containing ``c``
3. compute the untilted cross-entropy ``L_B`` of the batch
4. ``acc_c <- (1 - gamma) acc_c + gamma exp(t L_B)``, then ``w = acc / sum(acc)``
5. take an SGD step on the untilted batch loss

The accumulators are kept as logarithms so that ``exp(t L_B)`` never has to be
materialised. They start at 1 (log 0), i.e. uniform class weights.

Random draw order, all from one ``numpy.random.Generator`` seeded with
``config.seed``: model initialisation first, then per step one uniform variate
for the class followed by the minibatch indices.
"""

import csv
import io
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import losses as L
from .diffmodel import LossKind, forward, init_params, loss_and_grad, sgd_step
from .errors import DivergenceError, EmptyInputError, InvalidDistributionError

log = logging.getLogger(__name__)

__all__ = [
    "TrainerConfig",
    "TrainerState",
    "TraceRecord",
    "ClassPartition",
    "partition_by_class",
    "sample_class",
    "init_state",
    "update_class_weight",
    "stochastic_tce_train",
    "baseline_train",
    "trace_to_csv",
    "run_summary",
]

BASELINE_CLASS = -1  # sentinel recorded as the "sampled class" of baseline steps


@dataclass(frozen=True)
class TrainerConfig:
    t: float = 1.0
    ema_rate: float = 0.1  # gamma of the accumulator update
    lr: float = 0.01
    momentum: float = 0.9
    steps: int = 2000
    batch_size: int = 8
    partition: str = "overlapping"
    loss: LossKind = field(default_factory=LossKind)
    seed: int = 0
    arch: str = "linear"
    hidden: int = 16

    def __post_init__(self):
        if not math.isfinite(self.t):
            raise ValueError("t must be finite")
        if not 0.0 < self.ema_rate <= 1.0:
            raise ValueError(f"ema_rate (gamma) must be in (0, 1], got {self.ema_rate}")
        if not self.lr > 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.partition not in ("overlapping", "disjoint"):
            raise ValueError(f"partition must be 'overlapping' or 'disjoint', got {self.partition!r}")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")

    def to_dict(self):
        d = asdict(self)
        d["loss"] = {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self.loss).items()}
        return d


@dataclass
class ClassPartition:
    """Sample indices per class. ``classes[j]`` is the dataset class of subset ``j``."""

    classes: list
    subsets: list
    mode: str
    excluded: list = field(default_factory=list)

    def __len__(self):
        return len(self.classes)


@dataclass
class TraceRecord:
    step: int
    sampled_class: int
    batch: tuple
    loss: float
    weights: tuple


@dataclass
class TrainerState:
    params: object
    velocity: np.ndarray | None
    log_tilted_loss: np.ndarray
    weights: np.ndarray
    step: int
    rng: np.random.Generator


def partition_by_class(labels, num_classes, mode="overlapping", ignore_value=None):
    """Split sample indices by class presence.

    ``overlapping``: sample m belongs to every class it contains.
    ``disjoint``: sample m belongs only to its present class with the smallest
    dataset-wide pixel count (ties go to the smaller class index).
    Classes left with no samples are dropped and listed in ``excluded``.
    """
    if ignore_value is None:
        ignore_value = getattr(labels, "ignore_value", None)
    labels = np.asarray(getattr(labels, "labels", labels))
    if labels.ndim < 1 or labels.shape[0] == 0:
        raise EmptyInputError("dataset is empty")
    m = labels.shape[0]
    flat = labels.reshape(m, -1)
    present = np.zeros((m, num_classes), dtype=bool)
    counts = np.zeros((m, num_classes), dtype=np.int64)
    for i in range(m):
        lab = flat[i]
        if ignore_value is not None:
            lab = lab[lab != ignore_value]
        counts[i] = np.bincount(lab, minlength=num_classes)[:num_classes]
        present[i] = counts[i] > 0
    if mode == "overlapping":
        member = present
    elif mode == "disjoint":
        totals = counts.sum(axis=0)
        member = np.zeros_like(present)
        for i in range(m):
            cands = np.flatnonzero(present[i])
            if cands.size:
                # lexsort: last key is primary
                best = cands[np.lexsort((cands, totals[cands]))[0]]
                member[i, best] = True
    else:
        raise ValueError(f"unknown partition mode {mode!r}")

    classes, subsets, excluded = [], [], []
    for c in range(num_classes):
        idx = np.flatnonzero(member[:, c])
        if idx.size:
            classes.append(c)
            subsets.append(idx)
        else:
            excluded.append(c)
    if excluded:
        log.warning("classes %s have no samples in %s partition; excluded", excluded, mode)
    if not classes:
        raise EmptyInputError("no class has any sample")
    return ClassPartition(classes, subsets, mode, excluded)


def sample_class(weights, rng):
    """Inverse-CDF draw from ``weights`` using a single ``rng.random()`` variate."""
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1 or w.size == 0 or np.any(w < 0) or not np.all(np.isfinite(w)):
        raise InvalidDistributionError("invalid distribution: weights must be finite and >= 0")
    if abs(w.sum() - 1.0) > 1e-9:
        raise InvalidDistributionError(f"invalid distribution: weights sum to {w.sum()!r}")
    u = rng.random()
    c = int(np.searchsorted(np.cumsum(w), u, side="right"))
    # guard against a cumulative sum ending just below 1
    if c >= w.size:
        c = int(np.flatnonzero(w > 0)[-1])
    return c


def _normalize(log_acc):
    e = np.exp(log_acc - log_acc.max())
    return e / e.sum()


def init_state(params, num_classes, rng):
    log_acc = np.zeros(num_classes)
    return TrainerState(params, None, log_acc, _normalize(log_acc), 0, rng)


def update_class_weight(state, c, batch_loss, t, gamma):
    """Fold ``exp(t * batch_loss)`` into class ``c``'s accumulator and renormalize.

    Equivalent to ``log(acc_c) <- logaddexp(log(1-gamma) + log(acc_c),
    log(gamma) + t*batch_loss)``, but written around ``log1p``/``expm1`` so
    that an unchanged accumulator (``t * batch_loss == log(acc_c)``, e.g.
    ``t = 0`` from the initial state) stays bit-identical.
    """
    if not math.isfinite(batch_loss):
        raise DivergenceError(f"divergence: non-finite batch loss {batch_loss!r}")
    tilted = t * batch_loss
    if not math.isfinite(tilted):
        raise DivergenceError(f"divergence: non-finite tilted loss {tilted!r}")
    log_acc = state.log_tilted_loss.copy()
    old = log_acc[c]
    if gamma == 1.0:
        new = tilted
    else:
        d = tilted - old
        if d <= 0:
            new = old + math.log1p(gamma * math.expm1(d))
        else:
            new = tilted + math.log1p((1.0 - gamma) * math.expm1(-d))
    log_acc[c] = new
    state.log_tilted_loss = log_acc
    state.weights = _normalize(log_acc)
    return state


def _batch_indices(pool, batch_size, rng):
    replace_ = len(pool) < batch_size
    return np.sort(rng.choice(pool, size=batch_size, replace=replace_))


def _gradient_step(state, dataset, batch, config):
    feats = dataset.features[batch]
    labs = dataset.labels[batch]
    value, grad = loss_and_grad(state.params, feats, labs, config.loss, dataset.ignore_value)
    if not math.isfinite(value):
        raise DivergenceError(f"divergence: non-finite loss at step {state.step}")
    state.params, state.velocity = sgd_step(
        state.params, grad, config.lr, config.momentum, state.velocity
    )
    return value


def _init(dataset, config):
    rng = np.random.default_rng(config.seed)
    params = init_params(
        dataset.features.shape[-1], dataset.num_classes, rng, config.arch, config.hidden
    )
    return rng, params


def stochastic_tce_train(dataset, config, return_state=False):
    """Train with tilted class sampling. Returns ``(params, trace)``.

    ``dataset`` needs ``features`` (M,H,W,d), ``labels`` (M,H,W),
    ``num_classes`` and ``ignore_value``. Trace weights are indexed by
    partition slot; see ``partition_by_class`` for the class mapping.
    """
    rng, params = _init(dataset, config)
    partition = partition_by_class(
        dataset.labels, dataset.num_classes, config.partition, dataset.ignore_value
    )
    state = init_state(params, len(partition), rng)
    mcce = LossKind.mcce()
    trace = []
    try:
        for step in range(config.steps):
            state.step = step
            j = sample_class(state.weights, rng)
            batch = _batch_indices(partition.subsets[j], config.batch_size, rng)
            feats, labs = dataset.features[batch], dataset.labels[batch]
            if config.loss == mcce:
                batch_loss = _gradient_step(state, dataset, batch, config)
            else:
                # tilting always tracks the untilted cross-entropy, whatever loss drives the step
                batch_loss = L.mcce_loss(forward(state.params, feats), labs, dataset.ignore_value)
                _gradient_step(state, dataset, batch, config)
            update_class_weight(state, j, batch_loss, config.t, config.ema_rate)
            trace.append(
                TraceRecord(step, partition.classes[j], tuple(int(i) for i in batch),
                            float(batch_loss), tuple(float(w) for w in state.weights))
            )
    except DivergenceError as exc:
        raise DivergenceError(str(exc), trace) from exc
    state.step = config.steps
    if return_state:
        return state.params, trace, state, partition
    return state.params, trace


def baseline_train(dataset, config):
    """Uniform minibatch SGD on ``config.loss`` (mcce or focal). Returns ``(params, trace)``."""
    if config.loss.name not in ("mcce", "focal"):
        raise ValueError(f"baseline loss must be mcce or focal, got {config.loss.name}")
    rng, params = _init(dataset, config)
    state = TrainerState(params, None, np.zeros(0), np.zeros(0), 0, rng)
    pool = np.arange(len(dataset.labels))
    trace = []
    try:
        for step in range(config.steps):
            state.step = step
            batch = _batch_indices(pool, config.batch_size, rng)
            value = _gradient_step(state, dataset, batch, config)
            trace.append(TraceRecord(step, BASELINE_CLASS, tuple(int(i) for i in batch), float(value), ()))
    except DivergenceError as exc:
        raise DivergenceError(str(exc), trace) from exc
    return state.params, trace


def trace_to_csv(trace, num_weights=None, header_comment=None):
    """One row per step: step, class, loss, w_0..w_{C-1}."""
    if num_weights is None:
        num_weights = len(trace[0].weights) if trace else 0
    buf = io.StringIO()
    if header_comment:
        buf.write(f"# {header_comment}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["step", "class", "loss"] + [f"w_{i}" for i in range(num_weights)])
    for r in trace:
        writer.writerow([r.step, r.sampled_class, repr(r.loss)] + [repr(w) for w in r.weights])
    return buf.getvalue()


def run_summary(config, trace, wall_time, extra=None):
    summary = {
        "config": config.to_dict(),
        "steps_completed": len(trace),
        "final_weights": list(trace[-1].weights) if trace else [],
        "final_batch_loss": trace[-1].loss if trace else None,
        "wall_time_s": wall_time,
    }
    if extra:
        summary.update(extra)
    return summary


def timed(fn, *args, **kwargs):
    """Call ``fn`` and return ``(result, seconds)``."""
    start = time.perf_counter()
    out = fn(*args, **kwargs)
    return out, time.perf_counter() - start
