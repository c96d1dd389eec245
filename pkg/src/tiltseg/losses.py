"""Segmentation losses on probability score maps.

Score maps are arrays of shape ``(M, H, W, K)`` holding per-pixel class
probabilities and label maps are integer arrays of shape ``(M, H, W)``. A single
image ``(H, W, K)`` / ``(H, W)`` is accepted as a batch of one. Pixels whose
label equals ``ignore_value`` are dropped from every loss and every count.
"""

import numpy as np

from .errors import DegenerateClassError, EmptyInputError, ShapeError
from .tilt import tilt_aggregate

__all__ = [
    "EPS",
    "as_batch",
    "true_class_probs",
    "pixel_nll",
    "mcce_loss",
    "image_losses",
    "per_class_losses",
    "tce_image_loss",
    "tce_class_loss",
    "focal_loss",
    "inverse_frequency_alpha",
]

# probabilities are clamped to [EPS, 1] before taking logs
EPS = 1e-12


def as_batch(probs, labels):
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.ndim == 3 and labels.ndim == 2:
        probs, labels = probs[None], labels[None]
    if probs.ndim != 4 or labels.ndim != 3:
        raise ShapeError(
            f"shape: expected scores (M,H,W,K) and labels (M,H,W), "
            f"got {probs.shape} and {labels.shape}"
        )
    if probs.shape[:3] != labels.shape:
        raise ShapeError(f"shape mismatch: scores {probs.shape} vs labels {labels.shape}")
    if probs.shape[0] == 0:
        raise EmptyInputError("empty batch")
    if not np.issubdtype(labels.dtype, np.integer):
        raise ShapeError(f"labels must be integers, got dtype {labels.dtype}")
    return probs, labels


def valid_mask(labels, ignore_value=None):
    if ignore_value is None:
        return np.ones(labels.shape, dtype=bool)
    return labels != ignore_value


def true_class_probs(probs, labels, ignore_value=None):
    """Probability assigned to the ground-truth class at every pixel.

    Returns ``(p, valid)``; ``p`` is 1.0 on ignored pixels.
    """
    probs, labels = as_batch(probs, labels)
    valid = valid_mask(labels, ignore_value)
    k = probs.shape[-1]
    lab = labels[valid]
    if lab.size and (lab.min() < 0 or lab.max() >= k):
        raise ShapeError(f"label outside [0, {k}) found")
    safe = np.where(valid, labels, 0).astype(np.intp)
    p = np.take_along_axis(probs, safe[..., None], axis=-1)[..., 0]
    return np.where(valid, p, 1.0), valid


def pixel_nll(probs, labels, ignore_value=None):
    """Per-pixel ``-log(p_true)`` with clamping; zero on ignored pixels."""
    p, valid = true_class_probs(probs, labels, ignore_value)
    return -np.log(np.clip(p, EPS, 1.0)), valid


def mcce_loss(probs, labels, ignore_value=None):
    """Pixel-wise multi-class cross-entropy averaged over all valid pixels."""
    nll, valid = pixel_nll(probs, labels, ignore_value)
    n = int(valid.sum())
    if n == 0:
        raise EmptyInputError("no valid pixels in batch")
    return float(nll[valid].sum() / n)


def image_losses(probs, labels, ignore_value=None):
    """Mean cross-entropy of each image over its own valid pixels."""
    nll, valid = pixel_nll(probs, labels, ignore_value)
    out = np.empty(nll.shape[0])
    for m in range(nll.shape[0]):
        n = int(valid[m].sum())
        if n == 0:
            raise EmptyInputError(f"no valid pixels in image {m}")
        out[m] = nll[m][valid[m]].sum() / n
    return out


def _class_losses(nll_m, labels_m, valid_m):
    classes = np.unique(labels_m[valid_m])
    return {int(c): float(nll_m[valid_m & (labels_m == c)].mean()) for c in classes}


def per_class_losses(probs, labels, ignore_value=None):
    """Mean cross-entropy over the pixels of each class present in one image.

    Returns a dict ``{class_index: loss}``; classes without pixels are absent.
    """
    probs, labels = as_batch(probs, labels)
    if probs.shape[0] != 1:
        raise ShapeError("shape: per_class_losses takes a single image")
    nll, valid = pixel_nll(probs, labels, ignore_value)
    return _class_losses(nll[0], labels[0], valid[0])


def tce_image_loss(probs, labels, t, ignore_value=None):
    """Image-level tilted cross-entropy: tilt of the per-image mean losses."""
    return tilt_aggregate(image_losses(probs, labels, ignore_value), t)


def tce_class_loss(probs, labels, t, ignore_value=None):
    """Class-level tilted cross-entropy.

    Each image contributes the tilted mean of its present-class losses;
    the result is the plain mean of those over the batch.
    """
    nll, valid = pixel_nll(probs, labels, ignore_value)
    labels = np.asarray(labels).reshape(nll.shape)
    per_image = []
    for m in range(nll.shape[0]):
        if not valid[m].any():
            raise EmptyInputError(f"no valid pixels in image {m}")
        losses = _class_losses(nll[m], labels[m], valid[m])
        per_image.append(tilt_aggregate(list(losses.values()), t))
    return float(np.mean(per_image))


def _alpha_vector(alpha, k):
    if alpha is None:
        return np.ones(k)
    alpha = np.asarray(alpha, dtype=np.float64).ravel()
    if alpha.size != k:
        raise ShapeError(f"shape: alpha has {alpha.size} entries, expected {k}")
    if np.any(alpha < 0) or not np.all(np.isfinite(alpha)):
        raise ValueError("alpha entries must be finite and >= 0")
    return alpha


def focal_terms(probs, labels, gamma, alpha=None, ignore_value=None):
    """Per-pixel focal terms ``-alpha_y (1 - p)^gamma log p`` and the valid mask."""
    if gamma < 0:
        raise ValueError(f"focal gamma must be >= 0, got {gamma}")
    p, valid = true_class_probs(probs, labels, ignore_value)
    k = np.asarray(probs).shape[-1]
    a = _alpha_vector(alpha, k)
    labels = np.asarray(labels).reshape(p.shape)
    pc = np.clip(p, EPS, 1.0)
    weight = a[np.where(valid, labels, 0)]
    terms = weight * (1.0 - pc) ** gamma * -np.log(pc)
    return np.where(valid, terms, 0.0), valid


def focal_loss(probs, labels, gamma=2.0, alpha=None, ignore_value=None):
    """Focal loss averaged over valid pixels; ``alpha=None`` means all ones."""
    terms, valid = focal_terms(probs, labels, gamma, alpha, ignore_value)
    n = int(valid.sum())
    if n == 0:
        raise EmptyInputError("no valid pixels in batch")
    return float(terms[valid].sum() / n)


def inverse_frequency_alpha(labels, num_classes, ignore_value=None):
    """Class weights proportional to inverse pixel counts, summing to ``num_classes``.

    ``labels`` is any array of label maps (or an object with a ``labels``
    attribute, such as a dataset).
    """
    if ignore_value is None:
        ignore_value = getattr(labels, "ignore_value", None)
    labels = np.asarray(getattr(labels, "labels", labels))
    lab = labels[valid_mask(labels, ignore_value)].astype(np.int64).ravel()
    if lab.size and (lab.min() < 0 or lab.max() >= num_classes):
        raise ShapeError(f"label outside [0, {num_classes}) found")
    counts = np.bincount(lab, minlength=num_classes)
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        raise DegenerateClassError(f"empty class {int(empty[0])}: no pixels in dataset")
    inv = 1.0 / counts
    return inv / inv.sum() * num_classes
