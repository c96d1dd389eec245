"""Per-pixel softmax classifiers with hand-derived gradients.

Two architectures are supported, both with a 1x1 receptive field:

* ``linear``      logits = W x + b
* ``one-hidden``  logits = W2 relu(W1 x + b1) + b2

Every supported loss is a weighted sum over pixels of a function of the
true-class probability ``p``, so its gradient w.r.t. the logits at a pixel is
``coef * h(p) * (onehot - softmax)`` with ``h(p) = p * d(term)/dp``. The
per-pixel ``coef`` carries the tilt weights.
"""

from dataclasses import dataclass

import numpy as np

from . import losses as L
from .errors import DivergenceError, ShapeError
from .tilt import tilt_weights

__all__ = [
    "LossKind",
    "ModelParams",
    "init_params",
    "forward",
    "predict",
    "loss_value",
    "loss_and_grad",
    "central_difference",
    "finite_diff_grad",
    "sgd_step",
]

ARCHITECTURES = ("linear", "one-hidden")


@dataclass(frozen=True)
class LossKind:
    """Which loss to evaluate. ``t`` is the tilt, ``gamma``/``alpha`` are focal parameters."""

    name: str = "mcce"
    t: float = 0.0
    gamma: float = 2.0
    alpha: tuple | None = None

    def __post_init__(self):
        if self.name not in ("mcce", "tce_image", "tce_class", "focal"):
            raise ValueError(f"unknown loss kind {self.name!r}")
        if self.alpha is not None:
            object.__setattr__(self, "alpha", tuple(float(a) for a in self.alpha))

    @classmethod
    def mcce(cls):
        return cls("mcce")

    @classmethod
    def tce_image(cls, t):
        return cls("tce_image", t=float(t))

    @classmethod
    def tce_class(cls, t):
        return cls("tce_class", t=float(t))

    @classmethod
    def focal(cls, gamma=2.0, alpha=None):
        return cls("focal", gamma=float(gamma), alpha=alpha)

    def __str__(self):
        if self.name in ("tce_image", "tce_class"):
            return f"{self.name}(t={self.t:g})"
        if self.name == "focal":
            return f"focal(gamma={self.gamma:g})"
        return self.name


@dataclass
class ModelParams:
    arch: str
    arrays: list  # linear: [W, b]; one-hidden: [W1, b1, W2, b2]

    def __post_init__(self):
        if self.arch not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.arch!r}")
        self.arrays = [np.asarray(a, dtype=np.float64) for a in self.arrays]
        expected = 2 if self.arch == "linear" else 4
        if len(self.arrays) != expected:
            raise ShapeError(f"shape: {self.arch} model takes {expected} arrays")
        for w, b in zip(self.arrays[::2], self.arrays[1::2]):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ShapeError(f"shape: weight {w.shape} / bias {b.shape} mismatch")
        if self.arch == "one-hidden" and self.arrays[2].shape[1] != self.arrays[0].shape[0]:
            raise ShapeError("shape: hidden layer widths disagree")
        if not all(np.all(np.isfinite(a)) for a in self.arrays):
            raise ValueError("model parameters must be finite")

    @property
    def feature_dim(self):
        return self.arrays[0].shape[1]

    @property
    def num_classes(self):
        return self.arrays[-1].shape[0]

    @property
    def size(self):
        return sum(a.size for a in self.arrays)

    def flat(self):
        return np.concatenate([a.ravel() for a in self.arrays])

    def with_flat(self, vec):
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.size,):
            raise ShapeError(f"shape: flat vector of length {vec.size}, expected {self.size}")
        out, i = [], 0
        for a in self.arrays:
            out.append(vec[i : i + a.size].reshape(a.shape).copy())
            i += a.size
        return ModelParams(self.arch, out)

    def copy(self):
        return ModelParams(self.arch, [a.copy() for a in self.arrays])


def init_params(feature_dim, num_classes, rng, arch="linear", hidden=16):
    """Weights uniform in [-0.1, 0.1] drawn from ``rng`` in layer order, biases zero."""
    if arch == "linear":
        w = rng.uniform(-0.1, 0.1, size=(num_classes, feature_dim))
        return ModelParams(arch, [w, np.zeros(num_classes)])
    if arch == "one-hidden":
        w1 = rng.uniform(-0.1, 0.1, size=(hidden, feature_dim))
        w2 = rng.uniform(-0.1, 0.1, size=(num_classes, hidden))
        return ModelParams(arch, [w1, np.zeros(hidden), w2, np.zeros(num_classes)])
    raise ValueError(f"unknown architecture {arch!r}")


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _forward(params, features):
    x = np.asarray(features, dtype=np.float64)
    if x.ndim < 1 or x.shape[-1] != params.feature_dim:
        raise ShapeError(
            f"shape: features have dim {x.shape[-1] if x.ndim else None}, "
            f"model expects {params.feature_dim}"
        )
    if params.arch == "linear":
        w, b = params.arrays
        return x, None, _softmax(x @ w.T + b)
    w1, b1, w2, b2 = params.arrays
    pre = x @ w1.T + b1
    return x, pre, _softmax(np.maximum(pre, 0.0) @ w2.T + b2)


def forward(params, features):
    """Per-pixel class probabilities, shape ``features.shape[:-1] + (K,)``."""
    return _forward(params, features)[2]


def predict(params, features):
    """Arg-max label map."""
    return forward(params, features).argmax(axis=-1)


def loss_value(probs, labels, loss, ignore_value=None):
    """Evaluate ``loss`` (a :class:`LossKind`) on score maps."""
    if loss.name == "mcce":
        return L.mcce_loss(probs, labels, ignore_value)
    if loss.name == "tce_image":
        return L.tce_image_loss(probs, labels, loss.t, ignore_value)
    if loss.name == "tce_class":
        return L.tce_class_loss(probs, labels, loss.t, ignore_value)
    return L.focal_loss(probs, labels, loss.gamma, loss.alpha, ignore_value)


def _pixel_coefficients(probs, labels, loss, ignore_value):
    """Per-pixel weight of each pixel term in the loss, shape (M, H, W)."""
    nll, valid = L.pixel_nll(probs, labels, ignore_value)
    coef = np.zeros(nll.shape)
    if loss.name in ("mcce", "focal"):
        coef[valid] = 1.0 / valid.sum()
        return coef
    if loss.name == "tce_image":
        per_image = L.image_losses(probs, labels, ignore_value)
        w = tilt_weights(per_image, loss.t)
        for m in range(nll.shape[0]):
            coef[m][valid[m]] = w[m] / valid[m].sum()
        return coef
    # tce_class
    n_images = nll.shape[0]
    for m in range(n_images):
        losses = L._class_losses(nll[m], labels[m], valid[m])
        w = tilt_weights(list(losses.values()), loss.t)
        for wc, c in zip(w, losses):
            mask = valid[m] & (labels[m] == c)
            coef[m][mask] = wc / mask.sum() / n_images
    return coef


def _pixel_h(probs, labels, loss, ignore_value):
    """``p * d(term)/dp`` at the true class; zero where the clamp is active."""
    p, valid = L.true_class_probs(probs, labels, ignore_value)
    active = valid & (p >= L.EPS)
    if loss.name != "focal":
        return np.where(active, -1.0, 0.0)
    k = probs.shape[-1]
    alpha = L._alpha_vector(loss.alpha, k)[np.where(valid, labels, 0)]
    g = loss.gamma
    pc = np.clip(p, L.EPS, 1.0)
    q = 1.0 - pc
    if g == 0.0:
        h = -np.ones_like(pc)
    else:
        with np.errstate(divide="ignore", invalid="ignore"):
            lead = np.where(q > 0, g * q ** (g - 1.0) * pc * np.log(pc), 0.0)
        h = lead - q**g
    return np.where(active, alpha * h, 0.0)


def loss_and_grad(params, features, labels, loss=LossKind(), ignore_value=None):
    """Loss value and its exact gradient w.r.t. ``params.flat()``.

    ``features`` has shape ``(M, H, W, d)`` and ``labels`` ``(M, H, W)``.
    """
    x, pre, probs = _forward(params, features)
    probs, labels = L.as_batch(probs, labels)
    if x.shape[:-1] != labels.shape:
        x = x.reshape(labels.shape + (x.shape[-1],))
    value = loss_value(probs, labels, loss, ignore_value)

    coef = _pixel_coefficients(probs, labels, loss, ignore_value)
    h = _pixel_h(probs, labels, loss, ignore_value)
    onehot = np.zeros_like(probs)
    safe = np.where(coef != 0, labels, 0).astype(np.intp)
    np.put_along_axis(onehot, safe[..., None], 1.0, axis=-1)
    dz = (coef * h)[..., None] * (onehot - probs)

    k = probs.shape[-1]
    dz2 = dz.reshape(-1, k)
    x2 = x.reshape(-1, x.shape[-1])
    if params.arch == "linear":
        grads = [dz2.T @ x2, dz2.sum(axis=0)]
    else:
        _, _, w2, _ = params.arrays
        pre2 = pre.reshape(-1, pre.shape[-1])
        act = np.maximum(pre2, 0.0)
        dact = (dz2 @ w2) * (pre2 > 0)
        grads = [dact.T @ x2, dact.sum(axis=0), dz2.T @ act, dz2.sum(axis=0)]
    return value, np.concatenate([g.ravel() for g in grads])


def central_difference(f, x, step):
    """Central-difference gradient of scalar ``f`` at flat vector ``x``."""
    if not step > 0:
        raise ValueError(f"step must be > 0, got {step}")
    x = np.asarray(x, dtype=np.float64)
    g = np.empty_like(x)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp[i] += step
        xm[i] -= step
        g[i] = (f(xp) - f(xm)) / (2.0 * step)
    return g


def finite_diff_grad(params, features, labels, loss=LossKind(), step=1e-5, ignore_value=None):
    """Central-difference estimate of the gradient returned by :func:`loss_and_grad`."""

    def f(vec):
        probs = forward(params.with_flat(vec), features)
        return loss_value(probs, labels, loss, ignore_value)

    return central_difference(f, params.flat(), step)


def sgd_step(params, grad, lr=0.01, momentum=0.9, velocity=None):
    """One heavy-ball SGD step. Returns ``(new_params, new_velocity)``.

    velocity <- momentum * velocity + grad; params <- params - lr * velocity
    """
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != (params.size,):
        raise ShapeError(f"shape: gradient of length {grad.size}, expected {params.size}")
    if not np.all(np.isfinite(grad)):
        raise DivergenceError("divergence: non-finite gradient")
    if not lr > 0:
        raise ValueError(f"learning rate must be > 0, got {lr}")
    if not 0.0 <= momentum < 1.0:
        raise ValueError(f"momentum must be in [0, 1), got {momentum}")
    v = grad.copy() if velocity is None else momentum * velocity + grad
    with np.errstate(over="ignore", invalid="ignore"):
        new = params.flat() - lr * v
    if not np.all(np.isfinite(new)):
        raise DivergenceError("divergence: non-finite parameters after update")
    return params.with_flat(new), v
