"""Shot-split accuracy, K-NN probe and cluster separability statistics."""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass
from itertools import combinations
from typing import Literal

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .autodiff import Array
from .data import ShotTag
from .errors import ContractError, DataError, DegenerateError, ShapeError

ClusterMetric = Literal["euclidean", "cosine"]

DEFAULT_KNN = 20


@dataclass(frozen=True)
class SplitReport:
    """Accuracies in percent; a split without classes is ``None``."""

    overall: float
    many: float | None
    medium: float | None
    few: float | None
    per_class: Array
    class_counts: NDArray[np.int64]

    def row(self) -> dict[str, float | None]:
        return {"overall": self.overall, "many": self.many, "medium": self.medium, "few": self.few}


@dataclass(frozen=True)
class ClusterStats:
    radii: Array
    inter: float
    gamma: float


def split_accuracy(preds: ArrayLike, labels: ArrayLike, shot_tags: Sequence[ShotTag]) -> SplitReport:
    """Overall accuracy over samples plus class-macro accuracy per shot split."""
    p = np.asarray(preds, dtype=np.int64)
    y = np.asarray(labels, dtype=np.int64)
    if p.shape != y.shape:
        raise ShapeError(f"{p.size} predictions for {y.size} labels")
    if y.size == 0:
        raise DataError("cannot score an empty prediction set")
    num_classes = len(shot_tags)
    if y.max() >= num_classes:
        raise ContractError(f"label {int(y.max())} has no shot tag")

    counts = np.bincount(y, minlength=num_classes).astype(np.int64)
    hits = np.bincount(y, weights=(p == y).astype(np.float64), minlength=num_classes)
    with np.errstate(invalid="ignore", divide="ignore"):
        per_class = np.where(counts > 0, 100.0 * hits / counts, np.nan)

    def split(tag: ShotTag) -> float | None:
        members = [c for c, t in enumerate(shot_tags) if t == tag and counts[c] > 0]
        return float(np.mean(per_class[members])) if members else None

    return SplitReport(
        overall=100.0 * float((p == y).mean()),
        many=split("many"),
        medium=split("medium"),
        few=split("few"),
        per_class=per_class,
        class_counts=counts,
    )


def _unit_rows(x: Array) -> Array:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.maximum(norms, 1e-12)


def knn_accuracy(
    train_feats: ArrayLike,
    train_labels: ArrayLike,
    val_feats: ArrayLike,
    val_labels: ArrayLike,
    k_nn: int = DEFAULT_KNN,
) -> float:
    """Percent of val points whose cosine K-NN majority vote is their label.

    Neighbour ties go to the lower train index, vote ties to the lower class.
    """
    if k_nn < 1:
        raise ContractError("k_nn must be at least 1")
    train = np.asarray(train_feats, dtype=np.float64)
    val = np.asarray(val_feats, dtype=np.float64)
    y_train = np.asarray(train_labels, dtype=np.int64)
    y_val = np.asarray(val_labels, dtype=np.int64)
    if len(train) == 0:
        raise DataError("K-NN needs a non-empty train set")
    if len(val) == 0:
        raise DataError("K-NN needs a non-empty val set")

    sims = _unit_rows(val) @ _unit_rows(train).T
    k = min(k_nn, len(train))
    nearest = np.argsort(-sims, axis=1, kind="stable")[:, :k]
    num_classes = int(max(y_train.max(), y_val.max())) + 1
    votes = np.zeros((len(val), num_classes), dtype=np.int64)
    np.add.at(votes, (np.repeat(np.arange(len(val)), k), y_train[nearest].reshape(-1)), 1)
    return 100.0 * float((votes.argmax(axis=1) == y_val).mean())


def _distance(a: Array, b: Array, metric: ClusterMetric) -> Array:
    if metric == "euclidean":
        return np.linalg.norm(a - b, axis=-1)
    if metric == "cosine":
        cosine = (_unit_rows(np.atleast_2d(a)) * _unit_rows(np.atleast_2d(b))).sum(axis=-1)
        return np.arccos(np.clip(cosine, -1.0, 1.0))
    raise ContractError(f"unknown cluster metric {metric!r}")


def cluster_metrics(features: ArrayLike, labels: ArrayLike, metric: ClusterMetric = "euclidean") -> ClusterStats:
    """Mean distance to the class center per class, mean center-to-center distance and their ratio.

    ``gamma = sum_i R_i / (C * D)`` over the classes present in ``labels``.

    Raises:
        DegenerateError: With fewer than two classes or coincident centers

    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if len(x) != len(y):
        raise ShapeError(f"{len(x)} features for {len(y)} labels")
    classes = np.unique(y)
    if classes.size < 2:
        raise DegenerateError("inter-class distance needs at least two classes")

    centers = np.stack([x[y == c].mean(axis=0) for c in classes])
    radii = np.array([_distance(x[y == c], centers[i], metric).mean() for i, c in enumerate(classes)])
    pairs = list(combinations(range(classes.size), 2))
    inter = float(np.mean([_distance(centers[a], centers[b], metric) for a, b in pairs]))
    if inter <= 0:
        raise DegenerateError("all class centers coincide")
    return ClusterStats(radii, inter, float(radii.sum() / (classes.size * inter)))


@dataclass(frozen=True)
class FeatureReport:
    """K-NN accuracy and val-set cluster statistics of one feature extractor."""

    name: str
    knn: float
    stats: ClusterStats


def feature_report(
    name: str,
    train_feats: Array,
    train_labels: ArrayLike,
    val_feats: Array,
    val_labels: ArrayLike,
    k_nn: int = DEFAULT_KNN,
    metric: ClusterMetric = "euclidean",
) -> FeatureReport:
    return FeatureReport(
        name,
        knn_accuracy(train_feats, train_labels, val_feats, val_labels, k_nn),
        cluster_metrics(val_feats, val_labels, metric),
    )
