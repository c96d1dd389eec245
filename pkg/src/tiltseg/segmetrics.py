"""Confusion-matrix IoU and per-class fairness summaries.

IoU vectors use ``nan`` for classes that are undefined (absent from both the
ground truth and the prediction); every aggregate skips them. The functions
are agnostic to the IoU scale, so published percentage tables can be fed in
as they are.
"""

import csv
import io
import json
import math
from dataclasses import asdict, dataclass
from decimal import ROUND_HALF_UP, Decimal
from fractions import Fraction

import numpy as np

from .errors import EmptyInputError, ShapeError

__all__ = [
    "confusion_matrix",
    "accumulate_confusion",
    "merge_confusion",
    "iou_per_class",
    "miou",
    "group_size",
    "sorted_group_miou",
    "percentile_summary",
    "FairnessReport",
    "fairness_report",
    "read_iou_csv",
    "write_iou_csv",
]


def confusion_matrix(num_classes):
    return np.zeros((num_classes, num_classes), dtype=np.int64)


def accumulate_confusion(pred, truth, matrix, ignore_value=None):
    """Add the (truth, pred) pixel counts of one label map pair to ``matrix`` in place."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ShapeError(f"shape mismatch: pred {pred.shape} vs truth {truth.shape}")
    k = matrix.shape[0]
    keep = np.ones(truth.shape, dtype=bool) if ignore_value is None else truth != ignore_value
    g = truth[keep].astype(np.int64).ravel()
    p = pred[keep].astype(np.int64).ravel()
    if g.size and (g.min() < 0 or g.max() >= k or p.min() < 0 or p.max() >= k):
        raise ShapeError(f"label outside [0, {k}) in confusion accumulation")
    matrix += np.bincount(g * k + p, minlength=k * k).reshape(k, k)
    return matrix


def merge_confusion(a, b):
    return a + b


def iou_per_class(matrix):
    """TP / (TP + FP + FN) per class; ``nan`` where the denominator is zero."""
    matrix = np.asarray(matrix)
    tp = np.diag(matrix).astype(np.float64)
    denom = matrix.sum(axis=0) + matrix.sum(axis=1) - np.diag(matrix)
    out = np.full(tp.shape, np.nan)
    np.divide(tp, denom, out=out, where=denom > 0)
    return out


def _defined(ious):
    v = np.asarray(ious, dtype=np.float64).ravel()
    return v[~np.isnan(v)]


def miou(ious):
    v = _defined(ious)
    if v.size == 0:
        raise EmptyInputError("no defined IoU to average")
    return float(v.mean())


def group_size(fraction, count):
    """Number of classes in a ``fraction`` group: round-half-even of ``fraction * count``.

    The product is rounded on its decimal value, so 15% of 150 gives 22 and 25%
    of 19 gives 5.
    """
    if not 0 < fraction <= 0.5:
        raise ValueError(f"group fraction must be in (0, 0.5], got {fraction}")
    n = round(Fraction(str(fraction)) * count)
    if n < 1:
        raise ValueError(f"fraction {fraction} of {count} classes selects no class")
    return int(n)


def _check_side(side):
    if side not in ("bottom", "top"):
        raise ValueError(f"side must be 'bottom' or 'top', got {side!r}")


def sorted_group_miou(ious, reference_ious, fraction, side="bottom"):
    """Mean IoU over the classes ranked lowest/highest by ``reference_ious``.

    Classes whose reference IoU is undefined take no part in the ranking; ties
    in the reference go to the smaller class index.
    """
    _check_side(side)
    ious = np.asarray(ious, dtype=np.float64).ravel()
    ref = np.asarray(reference_ious, dtype=np.float64).ravel()
    if ious.shape != ref.shape:
        raise ShapeError(f"length mismatch: {ious.size} IoUs vs {ref.size} reference IoUs")
    ranked = [i for i in np.argsort(ref, kind="stable") if not np.isnan(ref[i])]
    n = group_size(fraction, len(ranked))
    chosen = ranked[:n] if side == "bottom" else ranked[-n:]
    return miou(ious[chosen])


def percentile_summary(ious, fraction, side="bottom"):
    """``(threshold, tail mean)`` for a model's own IoUs.

    The threshold is the linearly interpolated quantile at rank position
    ``q * (n - 1)`` with ``q = fraction`` (bottom) or ``1 - fraction`` (top).
    The tail holds IoUs strictly below (bottom) or above (top) it; an empty
    tail gives ``nan``.
    """
    _check_side(side)
    v = _defined(ious)
    if v.size < 2:
        raise EmptyInputError("percentile summary needs at least 2 defined IoUs")
    q = fraction if side == "bottom" else 1.0 - fraction
    threshold = float(np.quantile(v, q, method="linear"))
    tail = v[v < threshold] if side == "bottom" else v[v > threshold]
    return threshold, float(tail.mean()) if tail.size else math.nan


@dataclass
class FairnessReport:
    miou: float
    sorted_bottom: float
    sorted_top: float
    percentile_bottom: tuple
    percentile_top: tuple
    worst: float
    std: float
    k_fraction: float
    group_size: int
    reference_order: list  # class indices ascending by reference IoU

    def to_dict(self):
        d = asdict(self)
        d["percentile_bottom"] = list(self.percentile_bottom)
        d["percentile_top"] = list(self.percentile_top)
        return d

    def to_json(self, **extra):
        d = self.to_dict()
        d.update(extra)
        return json.dumps(_nan_to_none(d), indent=2, sort_keys=True)

    def format_table(self, name="model"):
        return format_table([(name, self)])


def _nan_to_none(obj):
    if isinstance(obj, float) and math.isnan(obj):
        return None
    if isinstance(obj, dict):
        return {k: _nan_to_none(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_nan_to_none(v) for v in obj]
    return obj


def fmt2(x):
    """Two decimals, half-up, after snapping away binary noise (64.595 -> 64.60)."""
    if x is None or math.isnan(x):
        return "nan"
    return str(Decimal(f"{x:.10f}").quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


def format_table(rows):
    """Aligned text table with the columns of a sorted/percentile/overall fairness table."""
    if not rows:
        return ""
    pct = round(rows[0][1].k_fraction * 100)
    head1 = ["", f"sorted {pct}%", "", f"({pct}th perc., mIoU)", "", "overall", "", ""]
    head2 = ["Method", "bottom", "top", "bottom", "top", "worst", "std.", "mIoU"]
    body = []
    for name, r in rows:
        body.append([
            name,
            fmt2(r.sorted_bottom),
            fmt2(r.sorted_top),
            f"({fmt2(r.percentile_bottom[0])}, {fmt2(r.percentile_bottom[1])})",
            f"({fmt2(r.percentile_top[0])}, {fmt2(r.percentile_top[1])})",
            fmt2(r.worst),
            fmt2(r.std),
            fmt2(r.miou),
        ])
    table = [head1, head2] + body
    widths = [max(len(row[i]) for row in table) for i in range(len(head2))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in table]
    lines.insert(2, "-" * len(lines[1]))
    return "\n".join(lines) + "\n"


def fairness_report(ious, reference_ious=None, k_fraction=0.25):
    """Mean, sorted group means, percentile tuples, worst class and sample std.

    ``reference_ious`` fixes the class ordering for the sorted groups; it
    defaults to ``ious`` itself.
    """
    ious = np.asarray(ious, dtype=np.float64).ravel()
    ref = ious if reference_ious is None else np.asarray(reference_ious, dtype=np.float64).ravel()
    v = _defined(ious)
    if v.size < 2:
        raise EmptyInputError("fairness report needs at least 2 defined IoUs")
    order = [int(i) for i in np.argsort(ref, kind="stable") if not np.isnan(ref[i])]
    return FairnessReport(
        miou=miou(ious),
        sorted_bottom=sorted_group_miou(ious, ref, k_fraction, "bottom"),
        sorted_top=sorted_group_miou(ious, ref, k_fraction, "top"),
        percentile_bottom=percentile_summary(ious, k_fraction, "bottom"),
        percentile_top=percentile_summary(ious, k_fraction, "top"),
        worst=float(v.min()),
        std=float(v.std(ddof=1)),
        k_fraction=float(k_fraction),
        group_size=group_size(k_fraction, len(order)),
        reference_order=order,
    )


def read_iou_csv(path_or_text):
    """Read ``class_name,iou`` rows. Lines starting with ``#`` are comments; a
    header row whose second field is not numeric is skipped; an empty IoU
    field means undefined.
    """
    if isinstance(path_or_text, str) and "\n" in path_or_text:
        text = path_or_text
    else:
        with open(path_or_text, newline="") as fh:
            text = fh.read()
    names, values = [], []
    rows = csv.reader(line for line in io.StringIO(text) if not line.lstrip().startswith("#"))
    for i, row in enumerate(rows):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) < 2:
            raise ValueError(f"row {i + 1}: expected 'class_name,iou', got {row!r}")
        name, raw = row[0].strip(), row[1].strip()
        try:
            val = float(raw) if raw else math.nan
        except ValueError:
            if i == 0:
                continue
            raise ValueError(f"row {i + 1}: IoU {raw!r} is not a number") from None
        names.append(name)
        values.append(val)
    if not values:
        raise EmptyInputError("IoU table is empty")
    return names, np.asarray(values)


def write_iou_csv(names, ious, header_comment=None):
    buf = io.StringIO()
    if header_comment:
        buf.write(f"# {header_comment}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["class_name", "iou"])
    for n, v in zip(names, ious):
        writer.writerow([n, "" if math.isnan(v) else repr(float(v))])
    return buf.getvalue()
