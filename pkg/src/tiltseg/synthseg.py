"""Synthetic imbalanced segmentation datasets and the SSEG1 file format.

Each pixel's feature vector is its class mean plus isotropic Gaussian noise.
Label maps are built from geometric units (full-width rows for ``stripes``,
grid tiles for ``rectangles``). The number of units per class is fixed
dataset-wide from ``class_frequency``; units are grouped into blocks, shuffled,
and dealt out to the samples in order, so rare classes show up as a few thick
regions in a subset of images rather than a thin sprinkle everywhere.
"""

import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .errors import DegenerateClassError, FormatError, ShapeError

__all__ = [
    "SynthConfig",
    "SegDataset",
    "default_config",
    "class_means",
    "generate",
    "save",
    "load",
]

LAYOUTS = ("stripes", "rectangles")
HARD_FRACTION = 0.4  # hard class mean sits at this fraction of the distance to its confuser


@dataclass(frozen=True)
class SynthConfig:
    num_classes: int = 5
    height: int = 32
    width: int = 32
    feature_dim: int = 8
    num_samples: int = 200
    class_frequency: tuple = (0.40, 0.25, 0.17, 0.15, 0.03)
    mean_separation: float = 3.0
    noise_sigma: float = 1.0
    # entries are a class index (confused with the most frequent other class)
    # or a [hard, confuser] pair
    hard_classes: tuple = (3,)
    layout: str = "stripes"
    seed: int = 0
    ignore_value: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "class_frequency", tuple(float(f) for f in self.class_frequency))
        object.__setattr__(
            self,
            "hard_classes",
            tuple(h if isinstance(h, int) else tuple(int(x) for x in h) for h in self.hard_classes),
        )
        self.validate()

    def validate(self):
        k = self.num_classes
        for name in ("num_classes", "height", "width", "feature_dim", "num_samples"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if len(self.class_frequency) != k:
            raise ValueError(f"class_frequency has {len(self.class_frequency)} entries, expected {k}")
        if any(f < 0 or not math.isfinite(f) for f in self.class_frequency):
            raise ValueError("class_frequency entries must be finite and >= 0")
        if abs(math.fsum(self.class_frequency) - 1.0) > 1e-9:
            raise ValueError(
                f"class_frequency must sum to 1 (got {math.fsum(self.class_frequency):.12g})"
            )
        if not self.mean_separation > 0:
            raise ValueError("mean_separation must be > 0")
        if not self.noise_sigma > 0:
            raise ValueError("noise_sigma must be > 0")
        if self.layout not in LAYOUTS:
            raise ValueError(f"layout must be one of {LAYOUTS}, got {self.layout!r}")
        for h in self.hard_classes:
            pair = (h,) if isinstance(h, int) else h
            if len(pair) not in (1, 2) or any(not 0 <= c < k for c in pair):
                raise ValueError(f"hard_classes entry {h!r} is not a valid class (K={k})")
            if len(pair) == 2 and pair[0] == pair[1]:
                raise ValueError(f"hard class {pair[0]} cannot be its own confuser")
        if self.ignore_value is not None and 0 <= self.ignore_value < k:
            raise ValueError("ignore_value must not be a class index")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")

    def to_dict(self):
        d = asdict(self)
        d["class_frequency"] = list(self.class_frequency)
        d["hard_classes"] = [h if isinstance(h, int) else list(h) for h in self.hard_classes]
        return d

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown synth config field(s): {sorted(unknown)}")
        return cls(**data)


def default_config(**overrides):
    """The 5-class task used for the desk-scale fairness comparison."""
    return SynthConfig(**overrides)


@dataclass
class SegDataset:
    features: np.ndarray  # (M, H, W, d) float32
    labels: np.ndarray  # (M, H, W) int64
    num_classes: int
    ignore_value: int | None = None
    config: SynthConfig | None = field(default=None, compare=False)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 4 or self.labels.shape != self.features.shape[:3]:
            raise ShapeError(
                f"shape: features {self.features.shape} and labels {self.labels.shape} disagree"
            )

    def __len__(self):
        return self.labels.shape[0]

    def __eq__(self, other):
        if not isinstance(other, SegDataset):
            return NotImplemented
        return (
            self.num_classes == other.num_classes
            and self.ignore_value == other.ignore_value
            and self.config == other.config
            and self.features.shape == other.features.shape
            and self.labels.shape == other.labels.shape
            and self.features.tobytes() == other.features.tobytes()
            and np.array_equal(self.labels, other.labels)
        )

    def subset(self, indices):
        idx = np.asarray(indices, dtype=np.intp)
        return SegDataset(
            self.features[idx], self.labels[idx], self.num_classes, self.ignore_value, self.config
        )

    def class_pixel_counts(self):
        lab = self.labels
        if self.ignore_value is not None:
            lab = lab[lab != self.ignore_value]
        return np.bincount(lab.ravel(), minlength=self.num_classes)


def class_means(config, rng):
    """Class mean vectors, shape (K, d).

    With ``d >= K`` the means are scaled orthonormal directions, so every pair
    sits exactly ``mean_separation`` apart; otherwise they are random points on
    a sphere of the same radius. Hard classes are then pulled towards their
    confuser.
    """
    k, d = config.num_classes, config.feature_dim
    radius = config.mean_separation / math.sqrt(2.0)
    g = rng.standard_normal((d, k))
    if d >= k:
        q, r = np.linalg.qr(g)
        q = q * np.sign(np.diag(r))
        means = radius * q.T
    else:
        means = radius * (g / np.linalg.norm(g, axis=0)).T
    base = means.copy()
    freq = np.asarray(config.class_frequency)
    for h in config.hard_classes:
        if isinstance(h, int):
            order = np.argsort(-freq, kind="stable")
            conf = int(next(c for c in order if c != h))
        else:
            h, conf = h
        means[h] = base[conf] + HARD_FRACTION * (base[h] - base[conf])
    return means


def _unit_grid(config):
    """Pixel slices of each layout unit within an image."""
    h, w = config.height, config.width
    if config.layout == "stripes":
        return [(slice(r, r + 1), slice(0, w)) for r in range(h)]
    g = min(4, h, w)
    rows = np.array_split(np.arange(h), g)
    cols = np.array_split(np.arange(w), g)
    return [
        (slice(r[0], r[-1] + 1), slice(c[0], c[-1] + 1)) for r in rows for c in cols
    ]


def _unit_counts(freq, total):
    """Largest-remainder allocation of ``total`` units, at least one per class."""
    exact = np.asarray(freq) * total
    counts = np.maximum(np.floor(exact).astype(np.int64), 1)
    while counts.sum() < total:
        frac = exact - counts
        counts[int(np.argmax(frac))] += 1
    while counts.sum() > total:
        counts[int(np.argmax(counts))] -= 1
    return counts


def generate(config):
    """Build a :class:`SegDataset`; a pure function of ``config``."""
    config.validate()
    k, h, w = config.num_classes, config.height, config.width
    for c, f in enumerate(config.class_frequency):
        if f * h * w < 1:
            raise DegenerateClassError(
                f"degenerate class {c}: share {f} covers less than one pixel of a {h}x{w} image"
            )
    units = _unit_grid(config)
    n_units = len(units)
    total = config.num_samples * n_units
    if total < k:
        raise DegenerateClassError(f"degenerate class: {total} layout units for {k} classes")

    ss = np.random.SeedSequence(config.seed)
    layout_ss, means_ss, noise_ss = ss.spawn(3)
    means = class_means(config, np.random.default_rng(means_ss))

    counts = _unit_counts(config.class_frequency, total)
    # four blocks per image: each image holds only a few classes, so the
    # per-class sample subsets differ enough for class sampling to matter
    block = max(1, n_units // 4)
    blocks = []
    for c, n in enumerate(counts):
        full, rest = divmod(int(n), block)
        blocks += [(c, block)] * full + ([(c, rest)] if rest else [])
    order = np.random.default_rng(layout_ss).permutation(len(blocks))
    sequence = np.concatenate([np.full(blocks[i][1], blocks[i][0]) for i in order])

    labels = np.empty((config.num_samples, h, w), dtype=np.int64)
    features = np.empty((config.num_samples, h, w, config.feature_dim), dtype=np.float32)
    sample_seeds = noise_ss.spawn(config.num_samples)
    for m in range(config.num_samples):
        chunk = sequence[m * n_units : (m + 1) * n_units]
        for (rs, cs), c in zip(units, chunk):
            labels[m, rs, cs] = c
        noise = np.random.default_rng(sample_seeds[m]).standard_normal((h, w, config.feature_dim))
        features[m] = means[labels[m]] + config.noise_sigma * noise
    return SegDataset(features, labels, k, config.ignore_value, config)


# --- SSEG1 binary format -------------------------------------------------------
#
#   magic     5 bytes  b"SSEG1"
#   version   u16
#   header    u32 M, u32 H, u32 W, u32 K, u32 d, i32 ignore_value (-1 = none)
#   config    u32 byte length, then UTF-8 JSON (length 0 = no config)
#   samples   M x (H*W u16 labels, H*W*d f32 features), row-major
#
# All integers and floats are little-endian.

MAGIC = b"SSEG1"
VERSION = 1
_HEAD = struct.Struct("<5sH5Ii")
_LEN = struct.Struct("<I")


def to_bytes(dataset):
    m, h, w, d = dataset.features.shape
    ignore = -1 if dataset.ignore_value is None else int(dataset.ignore_value)
    if dataset.labels.size and (dataset.labels.min() < 0 or dataset.labels.max() > 0xFFFF):
        raise ValueError("labels must fit in 16 bits")
    cfg = b"" if dataset.config is None else json.dumps(
        dataset.config.to_dict(), sort_keys=True
    ).encode("utf-8")
    parts = [_HEAD.pack(MAGIC, VERSION, m, h, w, dataset.num_classes, d, ignore), _LEN.pack(len(cfg)), cfg]
    lab = dataset.labels.astype("<u2")
    feat = dataset.features.astype("<f4")
    for i in range(m):
        parts.append(lab[i].tobytes())
        parts.append(feat[i].tobytes())
    return b"".join(parts)


def from_bytes(data):
    data = memoryview(bytes(data))
    if bytes(data[: len(MAGIC)]) != MAGIC[: len(data)]:
        raise FormatError("not an SSEG1 file (bad magic)")
    if len(data) < _HEAD.size + _LEN.size:
        raise FormatError("unexpected end of file in header")
    _, version, m, h, w, k, d, ignore = _HEAD.unpack_from(data, 0)
    if version != VERSION:
        raise FormatError(f"unsupported SSEG1 version {version}")
    off = _HEAD.size
    (cfg_len,) = _LEN.unpack_from(data, off)
    off += _LEN.size
    if len(data) < off + cfg_len:
        raise FormatError("unexpected end of file in config block")
    config = None
    if cfg_len:
        try:
            config = SynthConfig.from_dict(json.loads(bytes(data[off : off + cfg_len]).decode("utf-8")))
        except (ValueError, TypeError) as exc:
            raise FormatError(f"corrupt config block: {exc}") from exc
    off += cfg_len
    lab_bytes, feat_bytes = h * w * 2, h * w * d * 4
    need = off + m * (lab_bytes + feat_bytes)
    if len(data) < need:
        raise FormatError(f"unexpected end of file: need {need} bytes, have {len(data)}")
    if len(data) > need:
        raise FormatError(f"trailing data: {len(data) - need} bytes after last sample")
    labels = np.empty((m, h, w), dtype=np.int64)
    features = np.empty((m, h, w, d), dtype=np.float32)
    for i in range(m):
        labels[i] = np.frombuffer(data, "<u2", h * w, off).reshape(h, w)
        off += lab_bytes
        features[i] = np.frombuffer(data, "<f4", h * w * d, off).reshape(h, w, d)
        off += feat_bytes
    return SegDataset(features, labels, k, None if ignore < 0 else ignore, config)


def save(dataset, path):
    with open(path, "wb") as fh:
        fh.write(to_bytes(dataset))


def load(path):
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
