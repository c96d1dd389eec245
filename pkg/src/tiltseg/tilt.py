"""Tilted aggregation of a list of losses.

For a tilt ``t`` the tilted mean of ``v_1..v_n`` is

    (1/t) * log( (1/n) * sum_i exp(t * v_i) )

which is the arithmetic mean at ``t = 0``, tends to ``max(v)`` as ``t -> +inf``
and to ``min(v)`` as ``t -> -inf``.
"""

import math

import numpy as np

from .errors import EmptyInputError, NonFiniteError

__all__ = ["tilt_aggregate", "tilt_weights"]


def _as_values(values):
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise EmptyInputError("empty aggregation")
    if not np.all(np.isfinite(v)):
        raise NonFiniteError("non-finite value in aggregation input")
    return v


def _as_tilt(t):
    t = float(t)
    if not math.isfinite(t):
        raise NonFiniteError(f"non-finite value for tilt t={t!r}")
    return t


def tilt_aggregate(values, t):
    """Tilted mean of ``values``.

    ``t == 0`` is an exact branch returning the arithmetic mean (computed with
    ``math.fsum``). Otherwise the sum is shifted by the value maximizing
    ``t * v`` and evaluated as ``log1p(mean(expm1(.)))``, which stays finite
    for large ``|t * v|`` and keeps full precision as ``t -> 0``.
    """
    v = _as_values(values)
    t = _as_tilt(t)
    lo, hi = float(v.min()), float(v.max())
    if v.size == 1:
        return float(v[0])
    if t == 0.0:
        return min(max(math.fsum(v) / v.size, lo), hi)
    shift = hi if t > 0 else lo
    scaled = np.expm1(t * (v - shift))
    result = shift + math.log1p(math.fsum(scaled) / v.size) / t
    # the exact value lies in [lo, hi]; clip away rounding excursions
    return min(max(result, lo), hi)


def tilt_weights(values, t):
    """Softmax weights ``exp(t v_i) / sum_j exp(t v_j)``.

    These are the coefficients by which the gradient of the tilted mean mixes
    the gradients of the individual losses.
    """
    v = _as_values(values)
    t = _as_tilt(t)
    if t == 0.0:
        return np.full(v.size, 1.0 / v.size)
    z = t * v
    e = np.exp(z - z.max())
    return e / e.sum()
