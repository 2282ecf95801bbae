"""Datasets: synthetic blob generation, corruption, normalization, file I/O.

A :class:`Dataset` is a plain value: a feature matrix with integer labels,
per-feature domain bounds, and a per-sample corruption flag. Every operation
returns a new dataset; nothing mutates its input.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path

import numpy as np

from .errors import ConfigError, DomainError

_MAGIC = b"MWDS"
_BIN_VERSION = 1


class SampleFlag(IntEnum):
    CLEAN = 0
    LABEL_CORRUPTED = 1
    INPUT_CORRUPTED = 2


@dataclass
class Dataset:
    """Feature matrix (s, n), labels (s,), per-feature bounds, per-sample flags."""

    features: np.ndarray
    labels: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    corrupt_flags: np.ndarray
    class_count: int

    @property
    def sample_count(self) -> int:
        return self.features.shape[0]

    @property
    def feature_count(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class NormalizationMeta:
    """How a dataset was normalized, plus the bounds in normalized space.

    ``x_normalized = (x - offsets) / scales``; the inverse is exact to float
    round-off. ``lower``/``upper`` are the dataset bounds pushed through the
    same map and are the clip domain for input-space boundary searches.
    """

    scheme: str
    offsets: np.ndarray
    scales: np.ndarray
    lower: np.ndarray
    upper: np.ndarray


@dataclass(frozen=True)
class CorruptionReport:
    fraction_requested: float
    indices_corrupted: np.ndarray
    seed: int
    mode: str


@dataclass(frozen=True)
class BlobConfig:
    classes: int
    samples_per_class: int
    dim: int
    spread: float
    seed: int
    centers: np.ndarray | None = None


def _expanded_bounds(features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Observed min/max per feature, widened by 1% of the range per side.

    Zero-range features get an absolute 0.01 pad so lower < upper always holds.
    """
    lo = features.min(axis=0)
    hi = features.max(axis=0)
    span = hi - lo
    pad = 0.01 * np.where(span > 0, span, 1.0)
    return lo - pad, hi + pad


def gen_blobs(config: BlobConfig) -> Dataset:
    """Sample isotropic Gaussian blobs, one per class, deterministically."""
    if config.classes < 2:
        raise DomainError("blob generation needs at least 2 classes")
    if config.samples_per_class < 1:
        raise DomainError("samples_per_class must be >= 1")
    if config.dim < 2:
        raise DomainError("dim must be >= 2")
    if not config.spread > 0:
        raise DomainError("spread must be positive")

    rng = np.random.default_rng(config.seed)
    if config.centers is None:
        centers = rng.uniform(-10.0, 10.0, size=(config.classes, config.dim))
    else:
        centers = np.asarray(config.centers, dtype=np.float64)
        if centers.shape != (config.classes, config.dim):
            raise DomainError(
                f"centers shape {centers.shape} does not match "
                f"({config.classes}, {config.dim})"
            )

    blocks = []
    for k in range(config.classes):
        noise = rng.normal(0.0, config.spread, size=(config.samples_per_class, config.dim))
        blocks.append(centers[k] + noise)
    features = np.concatenate(blocks, axis=0)
    labels = np.repeat(np.arange(config.classes, dtype=np.int64), config.samples_per_class)
    lower, upper = _expanded_bounds(features)
    return Dataset(
        features=features,
        labels=labels,
        lower=lower,
        upper=upper,
        corrupt_flags=np.zeros(len(labels), dtype=np.int64),
        class_count=config.classes,
    )


def _corruption_indices(sample_count: int, fraction: float, rng: np.random.Generator) -> np.ndarray:
    if not 0.0 <= fraction <= 1.0:
        raise DomainError("corruption fraction must lie in [0, 1]")
    # round half up: 2.5 -> 3
    count = int(np.floor(fraction * sample_count + 0.5))
    return np.sort(rng.choice(sample_count, size=count, replace=False))


def corrupt_labels(ds: Dataset, fraction: float, seed: int) -> tuple[Dataset, CorruptionReport]:
    """Reassign a uniformly chosen *different* label on round(fraction*s) samples."""
    if ds.class_count < 2:
        raise DomainError("label corruption needs at least 2 classes")
    rng = np.random.default_rng(seed)
    indices = _corruption_indices(ds.sample_count, fraction, rng)

    labels = ds.labels.copy()
    flags = ds.corrupt_flags.copy()
    for i in indices:
        # uniform over the class_count-1 labels that differ from the current one
        draw = int(rng.integers(0, ds.class_count - 1))
        labels[i] = draw if draw < labels[i] else draw + 1
    flags[indices] = SampleFlag.LABEL_CORRUPTED

    out = Dataset(ds.features.copy(), labels, ds.lower.copy(), ds.upper.copy(),
                  flags, ds.class_count)
    return out, CorruptionReport(fraction, indices, seed, mode="label")


def corrupt_inputs_gaussian(ds: Dataset, fraction: float, seed: int) -> tuple[Dataset, CorruptionReport]:
    """Replace chosen samples with Gaussian noise fit to each sample's own features.

    Every feature of a chosen sample is redrawn from N(mean(x), std(x)) where
    the statistics are over that sample's feature vector (population std). A
    zero-std sample is reproduced exactly. Results are clipped to the dataset
    bounds.
    """
    rng = np.random.default_rng(seed)
    indices = _corruption_indices(ds.sample_count, fraction, rng)

    features = ds.features.copy()
    flags = ds.corrupt_flags.copy()
    n = ds.feature_count
    for i in indices:
        x = ds.features[i]
        mu = float(x.mean())
        sigma = float(x.std())
        if sigma == 0.0:
            continue  # redrawing from N(mu, 0) reproduces the sample exactly
        noise = rng.normal(mu, sigma, size=n)
        features[i] = np.clip(noise, ds.lower, ds.upper)
    flags[indices] = SampleFlag.INPUT_CORRUPTED

    out = Dataset(features, ds.labels.copy(), ds.lower.copy(), ds.upper.copy(),
                  flags, ds.class_count)
    return out, CorruptionReport(fraction, indices, seed, mode="gaussian")


def max_margin(ds: Dataset, indices=None) -> np.ndarray:
    """Exact distance from each sample to its nearest different-class sample."""
    present = np.unique(ds.labels)
    if present.size < 2:
        raise DomainError("max margin is undefined with a single class present")
    if indices is None:
        idx = np.arange(ds.sample_count)
    else:
        idx = np.asarray(indices, dtype=np.int64)
    out = np.empty(len(idx), dtype=np.float64)
    for pos, i in enumerate(idx):
        mask = ds.labels != ds.labels[i]
        diff = ds.features[mask] - ds.features[i]
        out[pos] = np.sqrt(np.min(np.einsum("ij,ij->i", diff, diff)))
    return out


def normalize(ds: Dataset, scheme: str) -> tuple[Dataset, NormalizationMeta]:
    """Normalize features per the scheme and return the dataset plus its meta.

    znorm: per-feature zero mean, unit (population) std; zero-variance features
    keep scale 1. minmax: observed range mapped onto [0, 1]; constant features
    map to 0. The dataset bounds are pushed through the same affine map.
    """
    X = ds.features
    if scheme == "znorm":
        offsets = X.mean(axis=0)
        scales = X.std(axis=0)
        scales = np.where(scales == 0.0, 1.0, scales)
    elif scheme == "minmax":
        offsets = X.min(axis=0)
        span = X.max(axis=0) - offsets
        scales = np.where(span > 0.0, span, 1.0)
    else:
        raise DomainError(f"unknown normalization scheme: {scheme!r}")

    features = (X - offsets) / scales
    lower = (ds.lower - offsets) / scales
    upper = (ds.upper - offsets) / scales
    meta = NormalizationMeta(scheme=scheme, offsets=offsets, scales=scales,
                             lower=lower, upper=upper)
    out = Dataset(features, ds.labels.copy(), lower, upper,
                  ds.corrupt_flags.copy(), ds.class_count)
    return out, meta


def denormalize(features: np.ndarray, meta: NormalizationMeta) -> np.ndarray:
    return np.asarray(features) * meta.scales + meta.offsets


def apply_normalization(features: np.ndarray, meta: NormalizationMeta) -> np.ndarray:
    """Map raw features into the normalized space described by ``meta``."""
    return (np.asarray(features) - meta.offsets) / meta.scales


# ---------------------------------------------------------------------------
# file formats


def save_dataset_bin(ds: Dataset, path) -> None:
    """Write the MWDS binary layout (f32 features, u32 labels, little-endian)."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IQQI", _BIN_VERSION, ds.sample_count,
                             ds.feature_count, ds.class_count))
        fh.write(np.ascontiguousarray(ds.features, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(ds.labels, dtype="<u4").tobytes())


def load_dataset_bin(path) -> Dataset:
    """Read the MWDS layout. Bounds are recomputed; flags reset to clean."""
    raw = Path(path).read_bytes()
    if len(raw) < 4 + 24 or raw[:4] != _MAGIC:
        raise ConfigError(f"{path}: not an MWDS dataset file")
    version, s, n, class_count = struct.unpack_from("<IQQI", raw, 4)
    if version != _BIN_VERSION:
        raise ConfigError(f"{path}: unsupported MWDS version {version}")
    offset = 4 + 24
    need = offset + s * n * 4 + s * 4
    if len(raw) != need:
        raise ConfigError(f"{path}: truncated or oversized MWDS payload")
    features = np.frombuffer(raw, dtype="<f4", count=s * n, offset=offset)
    features = features.reshape(s, n).astype(np.float64)
    labels = np.frombuffer(raw, dtype="<u4", count=s, offset=offset + s * n * 4)
    labels = labels.astype(np.int64)
    if class_count < 2:
        raise ConfigError(f"{path}: class_count must be >= 2")
    if labels.size and labels.max() >= class_count:
        raise ConfigError(f"{path}: label exceeds class_count")
    lower, upper = _expanded_bounds(features)
    return Dataset(features, labels, lower, upper,
                   np.zeros(s, dtype=np.int64), int(class_count))


def save_dataset_csv(ds: Dataset, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([f"f{j}" for j in range(ds.feature_count)] + ["label"])
        for x, y in zip(ds.features, ds.labels):
            writer.writerow([repr(float(v)) for v in x] + [int(y)])


def load_dataset_csv(path) -> Dataset:
    """Last column is the label; a non-numeric first row is treated as a header."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        for row in reader:
            if row:
                rows.append(row)
    if not rows:
        raise ConfigError(f"{path}: empty CSV")
    start = 0
    try:
        [float(v) for v in rows[0]]
    except ValueError:
        start = 1
    if start == len(rows):
        raise ConfigError(f"{path}: CSV has a header but no data rows")
    try:
        features = np.array([[float(v) for v in row[:-1]] for row in rows[start:]])
        labels = np.array([int(float(row[-1])) for row in rows[start:]], dtype=np.int64)
    except ValueError as exc:
        raise ConfigError(f"{path}: malformed CSV row ({exc})") from exc
    if features.ndim != 2 or features.shape[1] < 1:
        raise ConfigError(f"{path}: need at least one feature column")
    if labels.min() < 0:
        raise ConfigError(f"{path}: negative label")
    class_count = int(labels.max()) + 1
    if class_count < 2:
        raise ConfigError(f"{path}: need at least 2 classes")
    lower, upper = _expanded_bounds(features)
    return Dataset(features, labels, lower, upper,
                   np.zeros(len(labels), dtype=np.int64), class_count)


def load_dataset(path, fmt: str = "auto") -> Dataset:
    if fmt == "auto":
        fmt = "csv" if str(path).endswith(".csv") else "bin"
    if fmt == "bin":
        return load_dataset_bin(path)
    if fmt == "csv":
        return load_dataset_csv(path)
    raise ConfigError(f"unknown dataset format: {fmt!r}")


def save_dataset(ds: Dataset, path, fmt: str = "auto") -> None:
    if fmt == "auto":
        fmt = "csv" if str(path).endswith(".csv") else "bin"
    if fmt == "bin":
        save_dataset_bin(ds, path)
    elif fmt == "csv":
        save_dataset_csv(ds, path)
    else:
        raise ConfigError(f"unknown dataset format: {fmt!r}")
