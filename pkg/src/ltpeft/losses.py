"""Training objectives: logit adjustment, asymmetric GCL, key matching, MSE."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .autodiff import Array, Tensor, as_tensor, l2_normalize, maximum, softmax
from .errors import ConfigError, ContractError, DegenerateError, ShapeError

FormulaVariant = Literal["asl_corrected", "paper_literal"]
LossKind = Literal["agcl", "gcl", "ce"]
BatchKind = Literal["balanced", "instance"]

LOG_FLOOR = 1e-12
# E|N(0, 1)|
HALF_NORMAL_MEAN = float(np.sqrt(2.0 / np.pi))


@dataclass(frozen=True)
class GclConfig:
    alpha: float = 1.0
    lambda_plus: float = 0.0
    lambda_minus: float = 4.0
    noise_enabled: bool = True
    formula_variant: FormulaVariant = "asl_corrected"
    kind: LossKind = "agcl"

    def __post_init__(self) -> None:
        if self.alpha <= 0:
            raise ConfigError("gcl_alpha must be positive")
        if self.lambda_plus < 0 or self.lambda_minus < 0:
            raise ConfigError("focusing parameters must be non-negative")
        if self.formula_variant not in ("asl_corrected", "paper_literal"):
            raise ConfigError(f"unknown agcl_variant {self.formula_variant!r}")
        if self.kind not in ("agcl", "gcl", "ce"):
            raise ConfigError(f"unknown loss {self.kind!r}")


@dataclass(frozen=True)
class ClassCounts:
    """Per-class training counts ``n_1..n_C``."""

    n: NDArray[np.int64] = field(repr=False)

    def __post_init__(self) -> None:
        counts = np.asarray(self.n, dtype=np.int64)
        if counts.ndim != 1 or counts.size == 0:
            raise ContractError("class counts must be a non-empty vector")
        if (counts < 1).any():
            raise ContractError("every class needs at least one training sample")
        object.__setattr__(self, "n", counts)

    @property
    def num_classes(self) -> int:
        return int(self.n.size)

    @property
    def n_max(self) -> int:
        return int(self.n.max())

    @property
    def log_gap(self) -> Array:
        """``log n_max - log n_i`` per class."""
        return np.log(float(self.n_max)) - np.log(self.n.astype(np.float64))


@dataclass(frozen=True)
class ScheduleState:
    eta: float = 0.5
    epochs: int = 40
    epoch: int = 0

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ContractError("schedule needs at least one epoch")
        if not 0 <= self.epoch <= self.epochs:
            raise ContractError(f"epoch {self.epoch} outside [0, {self.epochs}]")


def noise_magnitude(
    shape: tuple[int, ...], cfg: GclConfig, rng: np.random.Generator | None, train: bool
) -> Array:
    """``|eps|`` per score: a half-normal draw in training, its mean otherwise."""
    if train and cfg.noise_enabled:
        if rng is None:
            raise ContractError("noisy logit adjustment needs an rng")
        return np.abs(rng.standard_normal(shape))
    return np.full(shape, HALF_NORMAL_MEAN)


def gcl_adjust(
    scores: Tensor,
    counts: ClassCounts,
    cfg: GclConfig,
    rng: np.random.Generator | None,
    train: bool,
    noise: ArrayLike | None = None,
) -> Tensor:
    """``v = alpha * (s - (log n_max - log n_i) * |eps|)``.

    ``noise`` overrides the drawn ``|eps|`` (broadcast against ``scores``).
    """
    if scores.shape[-1] != counts.num_classes:
        raise ShapeError(f"{scores.shape[-1]} scores for {counts.num_classes} classes")
    eps = noise_magnitude(scores.shape, cfg, rng, train) if noise is None else np.asarray(noise, dtype=np.float64)
    return (scores - as_tensor(counts.log_gap * eps)) * cfg.alpha


def _one_hot(labels: ArrayLike, num_classes: int, batch_shape: tuple[int, ...]) -> Array:
    y = np.asarray(labels, dtype=np.intp).reshape(batch_shape)
    if (y < 0).any() or (y >= num_classes).any():
        raise ContractError(f"label outside [0, {num_classes})")
    return np.eye(num_classes)[y]


def log_softmax(v: Tensor) -> Tensor:
    shift = v.data.max(axis=-1, keepdims=True)
    shifted = v - shift
    return shifted - shifted.exp().sum(axis=-1, keepdims=True).log()


def cross_entropy(v: Tensor, labels: ArrayLike) -> Tensor:
    """Mean ``-log softmax(v)_y`` over the batch."""
    onehot = _one_hot(labels, v.shape[-1], v.shape[:-1])
    return -(log_softmax(v) * onehot).sum(axis=-1).mean()


def agcl_loss(v: Tensor, labels: ArrayLike, cfg: GclConfig) -> Tensor:
    """Asymmetric focusing loss over adjusted logits ``v``, averaged over the batch.

    ``asl_corrected``: ``-[(1 - p_j)^l+ log p_j + sum_{i != j} p_i^l- log(1 - p_i)]``.
    ``paper_literal``: same with ``log p_i`` for the negatives.
    """
    onehot = _one_hot(labels, v.shape[-1], v.shape[:-1])
    p = softmax(v, axis=-1)
    p_true = (p * onehot).sum(axis=-1)
    positive = (1.0 - p_true) ** cfg.lambda_plus * maximum(p_true, LOG_FLOOR).log()
    if cfg.formula_variant == "asl_corrected":
        negative_log = maximum(1.0 - p, LOG_FLOOR).log()
    else:
        negative_log = maximum(p, LOG_FLOOR).log()
    negative = (p**cfg.lambda_minus * negative_log * (1.0 - onehot)).sum(axis=-1)
    return -(positive + negative).mean()


def classification_loss(
    scores: Tensor,
    labels: ArrayLike,
    counts: ClassCounts,
    cfg: GclConfig,
    rng: np.random.Generator | None,
    train: bool = True,
    noise: ArrayLike | None = None,
) -> Tensor:
    """``L_cls`` for the configured loss kind (agcl, gcl or plain ce)."""
    if cfg.kind == "ce":
        return cross_entropy(scores, labels)
    adjusted = gcl_adjust(scores, counts, cfg, rng, train, noise)
    if cfg.kind == "gcl":
        return cross_entropy(adjusted, labels)
    return agcl_loss(adjusted, labels, cfg)


def key_loss(query: ArrayLike, keys: Tensor) -> Tensor:
    """``1 - mean_i cos(q, k_i)`` averaged over the batch; gradient reaches keys only.

    ``query`` is (d,) or (B, d); ``keys`` is (k, d) or (B, k, d).
    """
    q = np.asarray(query, dtype=np.float64)
    if keys.shape[-1] != q.shape[-1] or keys.ndim != q.ndim + 1:
        raise ShapeError(f"query {q.shape} does not pair with keys {keys.shape}")
    if keys.shape[-2] < 1:
        raise ContractError("key_loss needs at least one matched key")
    q_norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if (q_norm <= LOG_FLOOR).any():
        raise DegenerateError("key_loss: zero-norm query")
    if (np.linalg.norm(keys.data, axis=-1) <= LOG_FLOOR).any():
        raise DegenerateError("key_loss: zero-norm key")
    unit_q = (q / q_norm)[..., None, :]
    cosine = (l2_normalize(keys) * unit_q).sum(axis=-1)
    return (1.0 - cosine.mean(axis=-1)).mean()


def beta_schedule(state: ScheduleState, batch_kind: BatchKind) -> float:
    """1 for class-balanced batches, ``eta * (E - e) / E`` for instance batches."""
    if batch_kind == "balanced":
        return 1.0
    if batch_kind == "instance":
        return state.eta * (state.epochs - state.epoch) / state.epochs
    raise ContractError(f"unknown batch kind {batch_kind!r}")


def phase2_loss(
    scores: Tensor,
    labels: ArrayLike,
    query: ArrayLike,
    keys: Tensor,
    beta: float,
    counts: ClassCounts,
    cfg: GclConfig,
    rng: np.random.Generator | None,
    train: bool = True,
    noise: ArrayLike | None = None,
) -> Tensor:
    """``beta * L_cls + L_key``."""
    return classification_loss(scores, labels, counts, cfg, rng, train, noise) * beta + key_loss(query, keys)


def mse_loss(predicted: Tensor | float, target: ArrayLike) -> Tensor:
    """Mean squared error; a scalar pair gives ``(W_moe - W_hat)^2``."""
    diff = as_tensor(predicted) - as_tensor(np.asarray(target, dtype=np.float64))
    return (diff * diff).mean()
