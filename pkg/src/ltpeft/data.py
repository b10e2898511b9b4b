"""Synthetic two-domain long-tailed benchmark, dataset files and samplers.

Every class owns a prototype image. The source domain renders prototypes
plus noise with equal counts per class; the target domain adds a per-class
drift, then a fixed global transform (patch permutation, channel roll,
brightness offset), with an exponential count profile on the train split and
equal counts on the val split.
"""

from __future__ import annotations

import logging
from collections.abc import Iterator
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Literal, NamedTuple

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .autodiff import Array
from .errors import ConfigError, ContractError, DataError
from .losses import BatchKind, ClassCounts

logger = logging.getLogger(__name__)

Split = Literal["source", "train", "val"]
ShotTag = Literal["many", "medium", "few"]

MAGIC = b"LTDS"
FORMAT_VERSION = 1
SPLIT_CODES: dict[Split, int] = {"source": 0, "train": 1, "val": 2}
FILE_NAMES: dict[Split, str] = {
    "source": "source.ltds",
    "train": "target-train.ltds",
    "val": "target-val.ltds",
}

# Random streams spawned from the dataset seed
_PROTOTYPES, _DRIFT, _TRANSFORM, _SOURCE, _TRAIN, _VAL = range(6)


@dataclass(frozen=True)
class DatasetSpec:
    classes: int = 30
    n_max: int = 100
    imbalance: float = 100.0
    val_per_class: int = 20
    source_per_class: int = 100
    image: int = 16
    patch: int = 4
    channels: int = 3
    noise: float = 0.3
    domain_shift: float = 0.5
    class_drift: float = 0.3
    seed: int = 0

    def __post_init__(self) -> None:
        if self.classes < 1:
            raise ConfigError("classes must be at least 1")
        if self.n_max < 1:
            raise ConfigError("n_max must be at least 1")
        if self.imbalance < 1:
            raise ConfigError(f"imbalance {self.imbalance} must be >= 1")
        if self.image % self.patch:
            raise ConfigError(f"image {self.image} is not divisible by patch {self.patch}")
        if self.val_per_class < 1 or self.source_per_class < 1:
            raise ConfigError("val_per_class and source_per_class must be at least 1")
        if self.noise < 0:
            raise ConfigError("noise must be non-negative")

    def counts(self) -> NDArray[np.int64]:
        """``n_i = round(n_max * rho^(-(i-1)/(C-1)))``, at least 1, nonincreasing."""
        if self.classes == 1:
            return np.array([self.n_max], dtype=np.int64)
        exponents = np.arange(self.classes, dtype=np.float64) / (self.classes - 1)
        raw = np.floor(self.n_max * self.imbalance ** (-exponents) + 0.5)
        return np.maximum(raw, 1).astype(np.int64)

    @property
    def thresholds(self) -> tuple[float, float]:
        """(t_few, t_many) scaled to ``n_max``."""
        return self.n_max / 5.0, float(self.n_max)


@dataclass
class LongTailDataset:
    images: NDArray[np.float32]
    labels: NDArray[np.int64]
    num_classes: int
    split: Split
    sample_ids: NDArray[np.int64] = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise DataError(f"images {self.images.shape} do not match {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError(f"label outside [0, {self.num_classes})")
        if self.sample_ids is None:
            self.sample_ids = np.arange(len(self.labels), dtype=np.int64)

    def __len__(self) -> int:
        return len(self.labels)

    def per_class(self) -> NDArray[np.int64]:
        return np.bincount(self.labels, minlength=self.num_classes).astype(np.int64)

    def class_counts(self) -> ClassCounts:
        counts = self.per_class()
        if (counts == 0).any():
            missing = np.flatnonzero(counts == 0)[:5].tolist()
            raise DataError(f"classes {missing} have no {self.split} samples")
        return ClassCounts(counts)

    @cached_property
    def members(self) -> list[NDArray[np.int64]]:
        """Row indices of every class."""
        order = np.argsort(self.labels, kind="stable")
        bounds = np.cumsum(self.per_class())[:-1]
        return [np.asarray(part, dtype=np.int64) for part in np.split(order, bounds)]

    def batches(self, size: int) -> Iterator[Batch]:
        """Sequential batches in storage order."""
        if size < 1:
            raise ContractError("batch size must be at least 1")
        for start in range(0, len(self), size):
            rows = np.arange(start, min(start + size, len(self)))
            yield self.take(rows, "instance")

    def take(self, rows: NDArray[np.int64], kind: BatchKind) -> Batch:
        return Batch(self.images[rows], self.labels[rows], self.sample_ids[rows], kind)


class Benchmark(NamedTuple):
    source: LongTailDataset
    train: LongTailDataset
    val: LongTailDataset


@dataclass(frozen=True)
class Batch:
    images: NDArray[np.float32]
    labels: NDArray[np.int64]
    sample_ids: NDArray[np.int64]
    kind: BatchKind

    def __len__(self) -> int:
        return len(self.labels)


class BatchPair(NamedTuple):
    instance: Batch
    balanced: Batch


# ---------------------------------------------------------------------------
# Generation


def _stream(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream])


def _prototypes(spec: DatasetSpec) -> Array:
    """Coarse per-patch pattern plus fine texture, one image per class."""
    rng = _stream(spec.seed, _PROTOTYPES)
    grid = spec.image // spec.patch
    coarse = rng.normal(0.0, 1.0, size=(spec.classes, grid, grid, spec.channels))
    coarse = coarse.repeat(spec.patch, axis=1).repeat(spec.patch, axis=2)
    fine = rng.normal(0.0, 0.5, size=(spec.classes, spec.image, spec.image, spec.channels))
    return coarse + fine


def target_transform(images: Array, spec: DatasetSpec) -> Array:
    """Fixed source-to-target map: permute patch positions, roll channels, shift brightness."""
    rng = _stream(spec.seed, _TRANSFORM)
    grid = spec.image // spec.patch
    perm = rng.permutation(grid * grid)
    p = spec.patch
    blocks = images.reshape(-1, grid, p, grid, p, spec.channels).transpose(0, 1, 3, 2, 4, 5)
    blocks = blocks.reshape(-1, grid * grid, p, p, spec.channels)[:, perm]
    out = blocks.reshape(-1, grid, grid, p, p, spec.channels).transpose(0, 1, 3, 2, 4, 5)
    out = out.reshape(images.shape)
    return np.roll(out, 1, axis=-1) + spec.domain_shift


def _render(
    prototypes: Array, labels: NDArray[np.int64], noise: float, rng: np.random.Generator
) -> NDArray[np.float32]:
    images = prototypes[labels] + noise * rng.standard_normal((len(labels), *prototypes.shape[1:]))
    return images.astype(np.float32)


def generate_dataset(spec: DatasetSpec) -> Benchmark:
    """Balanced source set plus long-tailed target train and balanced target val."""
    prototypes = _prototypes(spec)
    drift = spec.class_drift * _stream(spec.seed, _DRIFT).standard_normal(prototypes.shape)
    target_prototypes = target_transform(prototypes + drift, spec)

    source_labels = np.repeat(np.arange(spec.classes, dtype=np.int64), spec.source_per_class)
    train_labels = np.repeat(np.arange(spec.classes, dtype=np.int64), spec.counts())
    val_labels = np.repeat(np.arange(spec.classes, dtype=np.int64), spec.val_per_class)

    benchmark = Benchmark(
        source=LongTailDataset(
            _render(prototypes, source_labels, spec.noise, _stream(spec.seed, _SOURCE)),
            source_labels,
            spec.classes,
            "source",
        ),
        train=LongTailDataset(
            _render(target_prototypes, train_labels, spec.noise, _stream(spec.seed, _TRAIN)),
            train_labels,
            spec.classes,
            "train",
        ),
        val=LongTailDataset(
            _render(target_prototypes, val_labels, spec.noise, _stream(spec.seed, _VAL)),
            val_labels,
            spec.classes,
            "val",
        ),
    )
    logger.info(
        "Generated benchmark",
        extra={"operation": "gen-data", "count": len(benchmark.train)},
    )
    return benchmark


def render_source(spec: DatasetSpec, render_seed: int) -> LongTailDataset:
    """Source split drawn again from the same class prototypes with another noise stream."""
    labels = np.repeat(np.arange(spec.classes, dtype=np.int64), spec.source_per_class)
    rng = np.random.default_rng([spec.seed, _SOURCE, render_seed])
    return LongTailDataset(_render(_prototypes(spec), labels, spec.noise, rng), labels, spec.classes, "source")


def shot_split(counts: ArrayLike, t_few: float, t_many: float) -> list[ShotTag]:
    """Tag each class many (n >= t_many), few (n <= t_few) or medium."""
    if not t_few < t_many:
        raise ContractError(f"t_few {t_few} must be below t_many {t_many}")
    tags: list[ShotTag] = []
    for n in np.asarray(counts).tolist():
        if n >= t_many:
            tags.append("many")
        elif n <= t_few:
            tags.append("few")
        else:
            tags.append("medium")
    return tags


# ---------------------------------------------------------------------------
# Samplers


def _check_batch(dataset: LongTailDataset, size: int) -> None:
    if size < 1:
        raise ContractError("batch size must be at least 1")
    if len(dataset) == 0:
        raise DataError(f"cannot sample from an empty {dataset.split} split")


def class_balanced_batch(dataset: LongTailDataset, size: int, rng: np.random.Generator) -> Batch:
    """Classes uniformly with replacement, then one instance uniformly within each."""
    _check_batch(dataset, size)
    present = np.flatnonzero(dataset.per_class())
    classes = present[rng.integers(0, len(present), size=size)]
    members = dataset.members
    rows = np.array([members[c][rng.integers(0, len(members[c]))] for c in classes], dtype=np.int64)
    return dataset.take(rows, "balanced")


def instance_balanced_batch(dataset: LongTailDataset, size: int, rng: np.random.Generator) -> Batch:
    """Instances uniformly with replacement."""
    _check_batch(dataset, size)
    return dataset.take(rng.integers(0, len(dataset), size=size).astype(np.int64), "instance")


def dual_sample(dataset: LongTailDataset, size: int, rng: np.random.Generator) -> BatchPair:
    """One instance-balanced and one class-balanced batch, drawn in that order."""
    instance = instance_balanced_batch(dataset, size, rng)
    return BatchPair(instance, class_balanced_batch(dataset, size, rng))


# ---------------------------------------------------------------------------
# Files


def save_dataset(dataset: LongTailDataset, path: Path) -> None:
    """Write ``dataset`` as a little-endian LTDS file."""
    images = np.ascontiguousarray(dataset.images, dtype="<f4")
    _, height, width, channels = images.shape
    header = np.array(
        [
            FORMAT_VERSION,
            dataset.num_classes,
            *dataset.per_class().tolist(),
            height,
            width,
            channels,
            SPLIT_CODES[dataset.split],
        ],
        dtype="<u4",
    )
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as handle:
        handle.write(MAGIC)
        handle.write(header.tobytes())
        handle.write(images.tobytes())
        handle.write(np.ascontiguousarray(dataset.labels, dtype="<u4").tobytes())


def load_dataset(path: Path) -> LongTailDataset:
    """Read an LTDS file written by :func:`save_dataset`.

    Raises:
        DataError: On a missing, truncated or foreign file

    """
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise DataError(f"cannot read dataset {path}: {e}") from e
    if raw[:4] != MAGIC:
        raise DataError(f"{path} is not an LTDS dataset")

    def words(offset: int, count: int) -> NDArray[np.uint32]:
        stop = offset + 4 * count
        if stop > len(raw):
            raise DataError(f"{path} is truncated")
        return np.frombuffer(raw, dtype="<u4", count=count, offset=offset)

    version, classes = (int(v) for v in words(4, 2))
    if version != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported dataset version {version}")
    counts = words(12, classes).astype(np.int64)
    height, width, channels, split_code = (int(v) for v in words(12 + 4 * classes, 4))
    splits = {code: name for name, code in SPLIT_CODES.items()}
    if split_code not in splits:
        raise DataError(f"{path}: unknown split code {split_code}")

    total = int(counts.sum())
    offset = 12 + 4 * classes + 16
    pixels = total * height * width * channels
    if offset + 4 * pixels + 4 * total != len(raw):
        raise DataError(f"{path} is truncated or has trailing bytes")
    images = np.frombuffer(raw, dtype="<f4", count=pixels, offset=offset).reshape(total, height, width, channels)
    labels = np.frombuffer(raw, dtype="<u4", count=total, offset=offset + 4 * pixels).astype(np.int64)
    dataset = LongTailDataset(images.astype(np.float32), labels, classes, splits[split_code])
    if not np.array_equal(dataset.per_class(), counts):
        raise DataError(f"{path}: header counts do not match labels")
    return dataset


def save_benchmark(benchmark: Benchmark, directory: Path) -> list[Path]:
    paths = []
    for dataset in benchmark:
        path = directory / FILE_NAMES[dataset.split]
        save_dataset(dataset, path)
        paths.append(path)
    return paths


def load_benchmark(directory: Path) -> Benchmark:
    """Load the three dataset files of ``directory``.

    Raises:
        DataError: When a file is missing or malformed

    """
    loaded = {split: load_dataset(directory / name) for split, name in FILE_NAMES.items()}
    return Benchmark(loaded["source"], loaded["train"], loaded["val"])
