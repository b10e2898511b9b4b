"""Two-expert mixture: score tables, fusion, base-weight search and the offset scorer."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .autodiff import Array, Tensor, activation, as_tensor, backward, clip
from .checkpoint import Checkpoint
from .errors import CheckpointError, ContractError, DataError, ShapeError
from .logger import log_epoch

logger = logging.getLogger(__name__)

GRID_STEP = 1.0 / 32
MINORITY_WARNING = 0.25
SCORER_LAYERS = ("w1", "b1", "w2", "b2", "w3", "b3")


@dataclass(frozen=True)
class ScoreTable:
    """One expert's raw scores, one row per sample."""

    sample_ids: NDArray[np.int64]
    labels: NDArray[np.int64]
    scores: Array

    def __post_init__(self) -> None:
        if self.scores.ndim != 2 or not len(self.sample_ids) == len(self.labels) == len(self.scores):
            raise ShapeError(
                f"score table rows disagree: ids {len(self.sample_ids)}, labels {len(self.labels)}, scores {self.scores.shape}"
            )

    @property
    def num_classes(self) -> int:
        return int(self.scores.shape[1])

    def save_csv(self, path: Path) -> Path:
        """Write ``sample_id,label,s_0..s_{C-1}``; floats use their shortest exact repr."""
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(["sample_id", "label", *(f"s_{c}" for c in range(self.num_classes))])
            for sample_id, label, row in zip(self.sample_ids, self.labels, self.scores, strict=True):
                writer.writerow([int(sample_id), int(label), *(repr(float(v)) for v in row)])
        return path

    @classmethod
    def load_csv(cls, path: Path) -> ScoreTable:
        """Read a table written by :meth:`save_csv` or any tool using the same header.

        Raises:
            DataError: On a missing file, bad header or non-numeric cell

        """
        try:
            with path.open(newline="", encoding="utf-8") as handle:
                rows = list(csv.reader(handle))
        except OSError as e:
            raise DataError(f"cannot read scores {path}: {e}") from e
        if not rows or rows[0][:2] != ["sample_id", "label"] or len(rows[0]) < 3:
            raise DataError(f"{path}: expected header sample_id,label,s_0,...")
        width = len(rows[0])
        ids, labels, scores = [], [], []
        for number, row in enumerate(rows[1:], start=2):
            if len(row) != width:
                raise DataError(f"{path}:{number}: expected {width} cells, got {len(row)}")
            try:
                ids.append(int(row[0]))
                labels.append(int(row[1]))
                scores.append([float(v) for v in row[2:]])
            except ValueError as e:
                raise DataError(f"{path}:{number}: {e}") from e
        return cls(
            np.array(ids, dtype=np.int64),
            np.array(labels, dtype=np.int64),
            np.array(scores, dtype=np.float64).reshape(len(ids), width - 2),
        )


@dataclass(frozen=True)
class ExpertScores:
    """Row-aligned scores of the visual-only (vo) and second (vl) expert."""

    s_vo: Array
    s_vl: Array
    labels: NDArray[np.int64]
    sample_ids: NDArray[np.int64] | None = None

    def __post_init__(self) -> None:
        if self.s_vo.shape != self.s_vl.shape or self.s_vo.ndim != 2:
            raise ShapeError(f"expert score shapes differ: {self.s_vo.shape} vs {self.s_vl.shape}")
        if len(self.labels) != len(self.s_vo):
            raise ShapeError(f"{len(self.labels)} labels for {len(self.s_vo)} score rows")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return int(self.s_vo.shape[1])

    @classmethod
    def pair(cls, vo: ScoreTable, vl: ScoreTable) -> ExpertScores:
        """Align two tables by sample id.

        Raises:
            DataError: When the tables cover different samples or disagree on labels

        """
        order_vo = np.argsort(vo.sample_ids, kind="stable")
        order_vl = np.argsort(vl.sample_ids, kind="stable")
        if not np.array_equal(vo.sample_ids[order_vo], vl.sample_ids[order_vl]):
            raise DataError("expert score tables cover different samples")
        if not np.array_equal(vo.labels[order_vo], vl.labels[order_vl]):
            raise DataError("expert score tables disagree on labels")
        return cls(vo.scores[order_vo], vl.scores[order_vl], vo.labels[order_vo], vo.sample_ids[order_vo])


@dataclass
class ConflictSet:
    """Samples where exactly one expert is right; target 1 means the vo expert."""

    indices: NDArray[np.int64]
    targets: Array

    def __len__(self) -> int:
        return len(self.indices)

    @property
    def vo_share(self) -> float:
        return float(self.targets.mean()) if len(self) else 0.0

    @property
    def minority_share(self) -> float:
        return min(self.vo_share, 1.0 - self.vo_share) if len(self) else 0.0


@dataclass(frozen=True)
class MoEConfig:
    hidden: int = 128
    epochs: int = 50
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 32
    epsilon: float = 1e-3
    seed: int = 0


@dataclass
class MoEScorerState:
    """Searched base weight plus the MLP that predicts a per-sample offset."""

    w_base: float
    tensors: dict[str, Tensor]
    num_classes: int
    epsilon: float = 1e-3
    inert: bool = False
    meta: dict[str, Any] = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Fusion and search


def fuse(s_vo: ArrayLike, s_vl: ArrayLike, w_moe: ArrayLike) -> Array:
    """``W * s_vo + (1 - W) * s_vl`` with ``W`` clamped to [0, 1]; ``W`` may be per row."""
    vo = np.asarray(s_vo, dtype=np.float64)
    vl = np.asarray(s_vl, dtype=np.float64)
    if vo.shape != vl.shape:
        raise ShapeError(f"cannot fuse scores of shape {vo.shape} and {vl.shape}")
    w = np.clip(np.asarray(w_moe, dtype=np.float64), 0.0, 1.0)
    if w.ndim == 1 and vo.ndim == 2:
        w = w[:, None]
    return w * vo + (1.0 - w) * vl


def fused_correct(scores: ExpertScores, w: float) -> int:
    """Number of samples whose fused argmax equals the label."""
    return int((fuse(scores.s_vo, scores.s_vl, w).argmax(axis=1) == scores.labels).sum())


def correct_intervals(scores: ExpertScores) -> tuple[Array, Array]:
    """Per sample, the open W-interval (lo, hi) on which the fused argmax is the label.

    The label wins against class ``c`` where ``p + W * s > 0`` with
    ``p = vl_y - vl_c`` and ``s = (vo_y - vo_c) - p``; the intersection over
    all ``c`` is an interval, empty when ``lo >= hi``.
    """
    rows = np.arange(len(scores))
    vo_y = scores.s_vo[rows, scores.labels][:, None]
    vl_y = scores.s_vl[rows, scores.labels][:, None]
    p = vl_y - scores.s_vl
    s = (vo_y - scores.s_vo) - p
    others = np.ones_like(p, dtype=bool)
    others[rows, scores.labels] = False

    with np.errstate(divide="ignore", invalid="ignore"):
        root = -p / s
    lo = np.where(others & (s > 0), root, -np.inf).max(axis=1)
    hi = np.where(others & (s < 0), root, np.inf).min(axis=1)
    never = (others & (s == 0) & (p <= 0)).any(axis=1)
    hi[never] = -np.inf
    return lo, hi


def _candidates(scores: ExpertScores) -> Array:
    lo, hi = correct_intervals(scores)
    edges = np.concatenate([lo, hi])
    edges = edges[(edges > 0.0) & (edges < 1.0)]
    points = np.unique(np.concatenate([[0.0, 1.0], edges]))
    midpoints = (points[:-1] + points[1:]) / 2.0
    grid = np.arange(33) * GRID_STEP
    return np.unique(np.concatenate([grid, midpoints]))


def _bisect_edge(scores: ExpertScores, inside: float, outside: float, best: int, epsilon: float) -> float:
    """Shrink [inside, outside] around the plateau boundary; returns the last inside point."""
    while abs(outside - inside) > epsilon:
        mid = (inside + outside) / 2.0
        if fused_correct(scores, mid) == best:
            inside = mid
        else:
            outside = mid
    return inside


def search_w_base(scores: ExpertScores, epsilon: float = 1e-3) -> float:
    """Base weight maximising fused top-1 accuracy.

    Candidates are the 1/32 grid plus one point inside every accuracy
    plateau. The first best candidate wins (smaller W on ties); its plateau
    edges are refined by bisection to width ``epsilon`` and the midpoint is
    returned when it still attains the best count.
    """
    if len(scores) == 0:
        raise ContractError("search_w_base needs at least one sample")
    if epsilon <= 0:
        raise ContractError("search threshold must be positive")
    candidates = _candidates(scores)
    counts = np.array([fused_correct(scores, w) for w in candidates])
    first = int(np.argmax(counts))
    best = int(counts[first])

    left = 0.0 if first == 0 else _bisect_edge(scores, candidates[first], candidates[first - 1], best, epsilon)
    lower = np.flatnonzero(counts[first:] < best)
    if lower.size:
        right = _bisect_edge(scores, candidates[first], candidates[first + lower[0]], best, epsilon)
    else:
        right = 1.0
    middle = (left + right) / 2.0
    w_base = middle if fused_correct(scores, middle) == best else float(candidates[first])
    logger.debug(f"Searched base weight {w_base:.4f}", extra={"count": best})
    return float(w_base)


def build_conflict_set(scores: ExpertScores) -> ConflictSet:
    """Samples where the experts disagree and exactly one of them is right."""
    pred_vo = scores.s_vo.argmax(axis=1)
    pred_vl = scores.s_vl.argmax(axis=1)
    vo_right = pred_vo == scores.labels
    vl_right = pred_vl == scores.labels
    keep = (pred_vo != pred_vl) & (vo_right ^ vl_right)
    conflicts = ConflictSet(np.flatnonzero(keep).astype(np.int64), vo_right[keep].astype(np.float64))
    if not len(conflicts):
        logger.warning("Experts never conflict; the scorer will use the base weight only")
    elif conflicts.minority_share < MINORITY_WARNING:
        logger.warning(
            f"Conflict set is unbalanced: vo expert wins {conflicts.vo_share:.1%}",
            extra={"count": len(conflicts)},
        )
    return conflicts


# ---------------------------------------------------------------------------
# Offset scorer


def init_scorer(num_classes: int, hidden: int, seed: int, w_base: float = 0.5, epsilon: float = 1e-3) -> MoEScorerState:
    """MLP ``2C -> H -> H -> 1`` with a zero final layer, so the offset starts at 0."""
    rng = np.random.default_rng(seed)
    inputs = 2 * num_classes
    arrays = {
        "w1": rng.normal(0.0, 1.0 / np.sqrt(inputs), size=(inputs, hidden)),
        "b1": np.zeros(hidden),
        "w2": rng.normal(0.0, 1.0 / np.sqrt(hidden), size=(hidden, hidden)),
        "b2": np.zeros(hidden),
        "w3": np.zeros((hidden, 1)),
        "b3": np.zeros(1),
    }
    tensors = {name: Tensor(value, requires_grad=True, name=f"scorer.{name}") for name, value in arrays.items()}
    return MoEScorerState(w_base, tensors, num_classes, epsilon)


def _softmax_rows(scores: Array) -> Array:
    shifted = np.exp(scores - scores.max(axis=1, keepdims=True))
    return shifted / shifted.sum(axis=1, keepdims=True)


def scorer_inputs(s_vo: ArrayLike, s_vl: ArrayLike) -> Array:
    """Both score rows softmax-normalised and concatenated, shape (N, 2C)."""
    vo = np.atleast_2d(np.asarray(s_vo, dtype=np.float64))
    vl = np.atleast_2d(np.asarray(s_vl, dtype=np.float64))
    return np.concatenate([_softmax_rows(vo), _softmax_rows(vl)], axis=1)


def _offset(state: MoEScorerState, inputs: Tensor) -> Tensor:
    t = state.tensors
    h = activation(inputs @ t["w1"] + t["b1"], "relu")
    h = activation(h @ t["w2"] + t["b2"], "relu")
    return (h @ t["w3"] + t["b3"]).reshape(inputs.shape[0])


def scorer_forward(state: MoEScorerState, s_vo: ArrayLike, s_vl: ArrayLike) -> Array:
    """Per-sample ``W_moe = clip(W_base + W_offset, 0, 1)``."""
    inputs = scorer_inputs(s_vo, s_vl)
    if inputs.shape[1] != 2 * state.num_classes:
        raise ShapeError(f"scorer trained for {state.num_classes} classes, got {inputs.shape[1] // 2}")
    if state.inert:
        return np.full(len(inputs), float(np.clip(state.w_base, 0.0, 1.0)))
    offset = _offset(state, as_tensor(inputs)).data
    return np.clip(state.w_base + offset, 0.0, 1.0)


def moe_scores(state: MoEScorerState, scores: ExpertScores) -> Array:
    """Fused scores with the per-sample mixture weight."""
    return fuse(scores.s_vo, scores.s_vl, scorer_forward(state, scores.s_vo, scores.s_vl))


def run_phase3(scores: ExpertScores, cfg: MoEConfig | None = None) -> MoEScorerState:
    """Search ``W_base`` on ``scores`` then fit the offset MLP to the conflict set by MSE."""
    from .losses import mse_loss
    from .trainer import sgd_step

    cfg = cfg or MoEConfig()
    w_base = search_w_base(scores, cfg.epsilon)
    conflicts = build_conflict_set(scores)
    state = init_scorer(scores.num_classes, cfg.hidden, cfg.seed, w_base, cfg.epsilon)
    state.meta["conflicts"] = len(conflicts)
    state.meta["vo_share"] = conflicts.vo_share
    if not len(conflicts):
        state.inert = True
        return state

    inputs = scorer_inputs(scores.s_vo[conflicts.indices], scores.s_vl[conflicts.indices])
    rng = np.random.default_rng(cfg.seed)
    momenta: dict[str, Array] = {}
    history: list[float] = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(conflicts))
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            rows = order[start : start + cfg.batch_size]
            w_moe = clip(_offset(state, as_tensor(inputs[rows])) + w_base, 0.0, 1.0)
            loss = mse_loss(w_moe, conflicts.targets[rows])
            backward(loss)
            sgd_step(state.tensors, momenta, cfg.lr, cfg.momentum, cfg.weight_decay)
            total += loss.item() * len(rows)
        history.append(total / len(conflicts))
        log_epoch(logger, "phase3", epoch + 1, history[-1], cfg.lr)

    for tensor in state.tensors.values():
        tensor.requires_grad = False
        tensor.grad = None
    state.meta["history"] = history
    return state


def train_mse(state: MoEScorerState, scores: ExpertScores) -> float:
    """Mean squared error of ``W_moe`` on the conflict set of ``scores``."""
    conflicts = build_conflict_set(scores)
    if not len(conflicts):
        return 0.0
    w = scorer_forward(state, scores.s_vo[conflicts.indices], scores.s_vl[conflicts.indices])
    return float(np.mean((w - conflicts.targets) ** 2))


def scorer_checkpoint(state: MoEScorerState, meta: dict[str, Any]) -> Checkpoint:
    return Checkpoint(
        "moe",
        {f"scorer.{name}": tensor.data.copy() for name, tensor in state.tensors.items()},
        {
            **meta,
            **state.meta,
            "w_base": state.w_base,
            "epsilon": state.epsilon,
            "inert": state.inert,
            "num_classes": state.num_classes,
        },
    )


def scorer_from_checkpoint(ckpt: Checkpoint) -> MoEScorerState:
    tensors = {
        name: Tensor(ckpt.tensors[f"scorer.{name}"], requires_grad=False, name=f"scorer.{name}")
        for name in SCORER_LAYERS
        if f"scorer.{name}" in ckpt.tensors
    }
    if len(tensors) != len(SCORER_LAYERS):
        raise CheckpointError("moe checkpoint is missing scorer tensors")
    reserved = {"w_base", "epsilon", "inert", "num_classes"}
    return MoEScorerState(
        float(ckpt.meta["w_base"]),
        tensors,
        int(ckpt.meta["num_classes"]),
        float(ckpt.meta["epsilon"]),
        bool(ckpt.meta["inert"]),
        {k: v for k, v in ckpt.meta.items() if k not in reserved},
    )
