"""Synthetic datasets, non-IID partitioners and pixel statistics."""
from __future__ import annotations

import hashlib
import struct
import warnings
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .rng import stream


class Provenance(IntEnum):
    REAL = 0
    SYNTHETIC = 1


@dataclass
class Dataset:
    """Images in [-1, 1] (float32), integer labels, per-sample provenance.

    ``soft_labels`` optionally overrides the one-hot training targets row by row.
    """

    images: np.ndarray
    labels: np.ndarray
    class_count: int
    provenance: np.ndarray | None = None
    soft_labels: np.ndarray | None = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = len(self.labels)
        if self.images.shape[0] != n:
            raise ConfigError(f"{self.images.shape[0]} images but {n} labels")
        if self.provenance is None:
            self.provenance = np.zeros(n, dtype=np.uint8)
        self.provenance = np.asarray(self.provenance, dtype=np.uint8)
        if n and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ConfigError(f"labels must lie in [0, {self.class_count})")
        if self.soft_labels is not None:
            self.soft_labels = np.asarray(self.soft_labels, dtype=np.float64)
            if self.soft_labels.shape != (n, self.class_count):
                raise ConfigError("soft_labels must be [samples, class_count]")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, ...]:
        return tuple(self.images.shape[1:])

    def targets(self) -> np.ndarray:
        """Per-sample label distributions (soft labels where set, else one-hot)."""
        if self.soft_labels is not None:
            return self.soft_labels
        return np.eye(self.class_count)[self.labels]

    def class_present(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.class_count) > 0

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(
            self.images[idx],
            self.labels[idx],
            self.class_count,
            self.provenance[idx],
            None if self.soft_labels is None else self.soft_labels[idx],
        )

    @staticmethod
    def concat(parts: list["Dataset"]) -> "Dataset":
        if not parts:
            raise ConfigError("cannot concatenate zero datasets")
        k = parts[0].class_count
        soft = None
        if any(p.soft_labels is not None for p in parts):
            soft = np.concatenate([p.targets() for p in parts])
        return Dataset(
            np.concatenate([p.images for p in parts]),
            np.concatenate([p.labels for p in parts]),
            k,
            np.concatenate([p.provenance for p in parts]),
            soft,
        )

    def equals(self, other: "Dataset") -> bool:
        same_soft = (self.soft_labels is None) == (other.soft_labels is None) and (
            self.soft_labels is None or np.array_equal(self.soft_labels, other.soft_labels)
        )
        return (
            self.class_count == other.class_count
            and np.array_equal(self.images, other.images)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.provenance, other.provenance)
            and same_soft
        )


# -- generation ---------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    num_classes: int = 2
    samples_per_class: int = 100
    image_shape: tuple[int, ...] = (1, 32, 32)
    class_signal: float = 1.0
    noise_level: float = 0.5
    frequencies: int = 3


def _template(shape, freqs: int, rng: np.random.Generator) -> np.ndarray:
    c, h, w = shape
    yy = (np.arange(h) + 0.5) / h
    xx = (np.arange(w) + 0.5) / w
    out = np.zeros(shape)
    coef = rng.normal(size=(c, freqs, freqs))
    for u in range(freqs):
        for v in range(freqs):
            basis = np.outer(np.cos(np.pi * u * yy), np.cos(np.pi * v * xx))
            out += coef[:, u, v][:, None, None] * basis
    return out / np.max(np.abs(out))


def gen_synthetic(spec: SyntheticSpec, seed: int) -> Dataset:
    """Class-conditional images: a low-frequency template per class plus Gaussian noise."""
    if spec.num_classes < 2:
        raise ConfigError("num_classes must be >= 2")
    shape = tuple(spec.image_shape)
    if len(shape) != 3:
        raise ConfigError(f"image_shape must be (C, H, W), got {shape}")
    images, labels = [], []
    for c in range(spec.num_classes):
        tmpl = 0.5 * spec.class_signal * _template(shape, spec.frequencies, stream(seed, "template", c))
        noise = stream(seed, "pixel-noise", c).normal(size=(spec.samples_per_class,) + shape)
        images.append(np.clip(tmpl[None] + spec.noise_level * noise, -1.0, 1.0))
        labels.append(np.full(spec.samples_per_class, c))
    images = np.concatenate(images)
    labels = np.concatenate(labels)
    order = stream(seed, "order").permutation(len(labels))
    return Dataset(images[order], labels[order], spec.num_classes)


def gaussian_mixture(means, samples_per_class: int, image_shape, sigma: float, seed: int) -> Dataset:
    """Each class is N(mean_c * 1, sigma^2 I) clipped to [-1, 1]."""
    images, labels = [], []
    for c, m in enumerate(means):
        x = m + sigma * stream(seed, "mixture", c).normal(size=(samples_per_class,) + tuple(image_shape))
        images.append(np.clip(x, -1.0, 1.0))
        labels.append(np.full(samples_per_class, c))
    return Dataset(np.concatenate(images), np.concatenate(labels), len(means))


# -- partitioning ---------------------------------------------------------------

def _canonical_order(dataset: Dataset) -> np.ndarray:
    """Sample order that depends only on sample content, not input order."""
    keys = [
        hashlib.blake2b(
            dataset.images[i].tobytes() + struct.pack("<qB", int(dataset.labels[i]), int(dataset.provenance[i])),
            digest_size=16,
        ).digest()
        for i in range(len(dataset))
    ]
    return np.array(sorted(range(len(dataset)), key=lambda i: keys[i]), dtype=np.int64)


def _fold_sizes(n: int, folds: int) -> list[int]:
    base, extra = divmod(n, folds)
    return [base + (1 if i < extra else 0) for i in range(folds)]


def kfold_indices(dataset: Dataset, folds: int, seed: int) -> list[np.ndarray]:
    if folds < 2:
        raise ConfigError("folds must be >= 2")
    if folds > len(dataset):
        raise ConfigError(f"{folds} folds for only {len(dataset)} samples")
    order = _canonical_order(dataset)[stream(seed, "kfold").permutation(len(dataset))]
    bounds = np.cumsum([0] + _fold_sizes(len(dataset), folds))
    return [order[bounds[i]:bounds[i + 1]] for i in range(folds)]


def partition_kfold(dataset: Dataset, folds: int, seed: int, test_fold: int = 0):
    """Split into ``folds`` parts; fold ``test_fold`` is the test set, the rest are clients."""
    parts = kfold_indices(dataset, folds, seed)
    if not 0 <= test_fold < folds:
        raise ConfigError(f"test_fold must be in [0, {folds})")
    clients = [dataset.subset(p) for i, p in enumerate(parts) if i != test_fold]
    return clients, dataset.subset(parts[test_fold])


def _class_indices(dataset: Dataset, seed: int, purpose: str) -> list[np.ndarray]:
    order = _canonical_order(dataset)
    out = []
    for c in range(dataset.class_count):
        idx = order[dataset.labels[order] == c]
        out.append(idx[stream(seed, purpose, c).permutation(len(idx))])
    return out


def _largest_remainder(n: int, proportions: np.ndarray) -> np.ndarray:
    exact = proportions * n
    counts = np.floor(exact).astype(np.int64)
    short = n - counts.sum()
    if short:
        # stable sort: ties go to the lower client index
        order = np.argsort(-(exact - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def partition_quantity(dataset: Dataset, proportions, seed: int) -> list[Dataset]:
    """Class-stratified split with client sizes proportional to ``proportions``."""
    p = np.asarray(proportions, dtype=np.float64)
    if p.ndim != 1 or len(p) < 1 or np.any(p <= 0) or abs(p.sum() - 1.0) > 1e-9:
        raise ConfigError("proportions must be positive and sum to 1")
    buckets: list[list[np.ndarray]] = [[] for _ in p]
    for c, idx in enumerate(_class_indices(dataset, seed, "quantity")):
        counts = _largest_remainder(len(idx), p)
        for k, part in enumerate(np.split(idx, np.cumsum(counts)[:-1])):
            if len(part) == 0 and len(idx) > 0:
                warnings.warn(f"quantity partition: client {k} receives no samples of class {c}")
            buckets[k].append(part)
    return [dataset.subset(np.concatenate(b)) for b in buckets]


def partition_dirichlet(dataset: Dataset, clients: int, concentration: float, seed: int,
                        max_attempts: int = 100) -> list[Dataset]:
    """Label skew: each class is split over clients by a Dirichlet(concentration) draw."""
    if concentration <= 0:
        raise ConfigError("concentration must be > 0")
    if clients < 2:
        raise ConfigError("clients must be >= 2")
    per_class = _class_indices(dataset, seed, "dirichlet-order")
    for attempt in range(max_attempts):
        rng = stream(seed, "dirichlet", attempt)
        buckets: list[list[np.ndarray]] = [[] for _ in range(clients)]
        for idx in per_class:
            props = rng.dirichlet(np.full(clients, concentration))
            cuts = (np.cumsum(props)[:-1] * len(idx)).astype(np.int64)
            for k, part in enumerate(np.split(idx, cuts)):
                buckets[k].append(part)
        parts = [np.concatenate(b) for b in buckets]
        if all(len(p) > 0 for p in parts):
            return [dataset.subset(p) for p in parts]
    raise ConfigError(f"Dirichlet partition left a client empty after {max_attempts} draws")


@dataclass(frozen=True)
class FeatureShift:
    brightness_offset: float = 0.0
    contrast_scale: float = 1.0
    noise_sigma: float = 0.0

    @property
    def is_identity(self) -> bool:
        return self.brightness_offset == 0.0 and self.contrast_scale == 1.0 and self.noise_sigma == 0.0


def apply_feature_shift(clients: list[Dataset], shifts: list[FeatureShift], seed: int) -> list[Dataset]:
    """x <- clip(contrast * x + brightness + noise) per client; labels untouched."""
    if len(shifts) != len(clients):
        raise ConfigError(f"{len(shifts)} shift specs for {len(clients)} clients")
    out = []
    for k, (client, spec) in enumerate(zip(clients, shifts)):
        if spec.is_identity:
            out.append(client.subset(np.arange(len(client))))
            continue
        x = spec.contrast_scale * client.images.astype(np.float64) + spec.brightness_offset
        if spec.noise_sigma:
            x = x + spec.noise_sigma * stream(seed, "feature-shift", k).normal(size=x.shape)
        shifted = client.subset(np.arange(len(client)))
        shifted.images = np.clip(x, -1.0, 1.0).astype(np.float32)
        out.append(shifted)
    return out


# -- statistics ------------------------------------------------------------------

@dataclass
class PixelStats:
    histogram: np.ndarray
    mean: float
    std: float

    @property
    def mean_8bit(self) -> float:
        """Mean on the 0..255 intensity scale."""
        return (self.mean + 1.0) * 127.5


def to_8bit(pixels: np.ndarray) -> np.ndarray:
    return np.clip(np.rint((np.asarray(pixels, dtype=np.float64) + 1.0) * 127.5), 0, 255).astype(np.int64)


def pixel_stats(dataset: Dataset) -> PixelStats:
    if len(dataset) == 0:
        raise ConfigError("pixel statistics of an empty dataset")
    px = dataset.images.astype(np.float64).ravel()
    counts = np.bincount(to_8bit(px), minlength=256)
    return PixelStats(counts / counts.sum(), float(px.mean()), float(px.std()))


def cross_client_std(clients: list[Dataset]) -> float:
    """Population std of the per-client pixel means."""
    if not clients:
        raise ConfigError("cross-client std of zero clients")
    return float(np.std([pixel_stats(c).mean for c in clients]))


# -- FDS1 binary format ----------------------------------------------------------

FDS_MAGIC = b"FDS1"


def _record_dtype(shape):
    return np.dtype([("pixels", "<f4", tuple(shape)), ("label", "<u2"), ("provenance", "u1")])


def save_dataset(dataset: Dataset, path) -> None:
    """Header: magic, K, N, ndim, dims (uint32 LE); then one packed record per sample."""
    shape = dataset.image_shape
    header = FDS_MAGIC + struct.pack(f"<III{len(shape)}I", dataset.class_count, len(dataset), len(shape), *shape)
    rec = np.zeros(len(dataset), dtype=_record_dtype(shape))
    rec["pixels"] = dataset.images
    rec["label"] = dataset.labels
    rec["provenance"] = dataset.provenance
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(header + rec.tobytes())
    tmp.replace(path)


def load_dataset(path) -> Dataset:
    raw = Path(path).read_bytes()
    if raw[:4] != FDS_MAGIC:
        raise ConfigError(f"{path}: not an FDS1 dataset file")
    k, n, ndim = struct.unpack_from("<III", raw, 4)
    shape = struct.unpack_from(f"<{ndim}I", raw, 16)
    offset = 16 + 4 * ndim
    rec = np.frombuffer(raw, dtype=_record_dtype(shape), count=n, offset=offset)
    return Dataset(rec["pixels"].copy(), rec["label"].astype(np.int64), k, rec["provenance"].copy())
