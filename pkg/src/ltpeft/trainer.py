"""Backbone pretraining, class-centric init, the phase loops and SGD."""

from __future__ import annotations

import logging
import math
from collections.abc import Callable, Mapping
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Literal, Protocol

import numpy as np

from .autodiff import Array, Tensor, backward, no_grad
from .backbone import BackboneParams, ClassifierParams, ViTConfig, encode, init_adapters, init_backbone
from .cache import FeatureCache, prime_cache
from .checkpoint import Checkpoint
from .data import Batch, LongTailDataset, class_balanced_batch, dual_sample
from .errors import ConfigError, DataError, DependencyError, NumericalError
from .inference import Expert, expert_checkpoint, expert_from_checkpoint
from .logger import log_epoch, log_operation
from .losses import (
    GclConfig,
    ScheduleState,
    beta_schedule,
    classification_loss,
    cross_entropy,
    key_loss,
)
from .prompts import PromptState, init_prompts, matched_keys

logger = logging.getLogger(__name__)

Phase1Mode = Literal["prompt", "linear_probe"]
PHASE1_PREFIXES = ("prompt.shared", "adapter.", "classifier.")
PHASE2_PREFIXES = ("pool.", "classifier.")
JOINT_PREFIXES = ("prompt.shared", "pool.", "adapter.", "classifier.")


class Schedule(Protocol):
    @property
    def base_lr(self) -> float: ...

    @property
    def warmup_epochs(self) -> int: ...

    @property
    def epochs(self) -> int: ...


@dataclass(frozen=True)
class TrainConfig:
    """Optimisation settings shared by phase 1, phase 2 and joint training."""

    batch_size: int = 32
    lr: float | None = None
    warmup_epochs: int = 5
    weight_decay: float = 1e-2
    momentum: float = 0.9
    epochs: int = 40
    seed: int = 0
    eta: float = 0.5
    dual_sampling: bool = True
    phase1_mode: Phase1Mode = "prompt"
    use_adapters: bool = True
    pool_size: int = 20
    top_k: int = 2
    steps_per_epoch: int | None = None

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if self.epochs < 0 or self.warmup_epochs < 0:
            raise ConfigError("epochs and warmup_epochs must be non-negative")
        if self.lr is not None and self.lr <= 0:
            raise ConfigError("lr must be positive")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")
        if self.phase1_mode not in ("prompt", "linear_probe"):
            raise ConfigError(f"unknown phase1_mode {self.phase1_mode!r}")

    @property
    def base_lr(self) -> float:
        """Explicit ``lr`` or ``0.002 * B / 256``."""
        return self.lr if self.lr is not None else 0.002 * self.batch_size / 256


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 30
    lr: float = 0.05
    batch_size: int = 32
    warmup_epochs: int = 1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0

    @property
    def base_lr(self) -> float:
        return self.lr


@dataclass
class EpochRecord:
    phase: str
    epoch: int
    loss_ins: float | None
    loss_bal: float
    lr: float
    train_acc: float


@dataclass
class TrainState:
    """Everything a resumed run needs besides the parameters."""

    rng: np.random.Generator
    epoch: int = 0
    momenta: dict[str, Array] = field(default_factory=dict)
    history: list[EpochRecord] = field(default_factory=list)

    @classmethod
    def fresh(cls, seed: int) -> TrainState:
        return cls(np.random.default_rng(seed))

    def to_meta(self) -> dict[str, Any]:
        return {
            "epoch": self.epoch,
            "rng_state": self.rng.bit_generator.state,
            "history": [asdict(record) for record in self.history],
        }

    def momenta_tensors(self) -> dict[str, Array]:
        return {f"momentum.{name}": value.copy() for name, value in self.momenta.items()}

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> TrainState:
        rng = np.random.default_rng()
        rng.bit_generator.state = ckpt.meta["rng_state"]
        momenta = {
            name.removeprefix("momentum."): value.copy()
            for name, value in ckpt.tensors.items()
            if name.startswith("momentum.")
        }
        history = [EpochRecord(**record) for record in ckpt.meta.get("history", [])]
        return cls(rng, int(ckpt.meta["epoch"]), momenta, history)


# ---------------------------------------------------------------------------
# Schedule and optimizer


def steps_per_epoch(dataset: LongTailDataset, cfg: TrainConfig | PretrainConfig) -> int:
    fixed = getattr(cfg, "steps_per_epoch", None)
    return fixed if fixed is not None else max(1, math.ceil(len(dataset) / cfg.batch_size))


def lr_at(step: int, cfg: Schedule, steps_per_epoch: int) -> float:
    """Linear warmup from 0, then cosine decay reaching 0 on the last step."""
    if step < 0:
        raise ConfigError("step must be non-negative")
    warmup = cfg.warmup_epochs * steps_per_epoch
    total = cfg.epochs * steps_per_epoch
    if step < warmup:
        return cfg.base_lr * step / warmup
    span = total - 1 - warmup
    if span <= 0:
        return cfg.base_lr
    progress = min((step - warmup) / span, 1.0)
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def sgd_step(
    params: Mapping[str, Tensor],
    momenta: dict[str, Array],
    lr: float,
    momentum: float = 0.9,
    weight_decay: float = 0.0,
    grads: Mapping[str, Array] | None = None,
) -> None:
    """``m <- mu * m + g + wd * p``; ``p <- p - lr * m``, in place.

    Gradients default to each tensor's ``grad``; a missing gradient counts
    as zero. Gradients are cleared afterwards.

    Raises:
        NumericalError: On a non-finite gradient (nothing is updated)

    """
    resolved: dict[str, Array] = {}
    for name, tensor in params.items():
        grad = grads.get(name) if grads is not None else tensor.grad
        grad = np.zeros_like(tensor.data) if grad is None else grad
        if not np.isfinite(grad).all():
            raise NumericalError(f"non-finite gradient for {name}", dump={"parameter": name, "lr": lr})
        resolved[name] = grad
    for name, tensor in params.items():
        update = resolved[name] + weight_decay * tensor.data
        previous = momenta.get(name)
        momenta[name] = update if previous is None else momentum * previous + update
        tensor.data -= lr * momenta[name]
        tensor.grad = None


# ---------------------------------------------------------------------------
# Backbone and classifier init


def pretrain_backbone(
    source: LongTailDataset,
    vit: ViTConfig,
    cfg: PretrainConfig | None = None,
    history: list[EpochRecord] | None = None,
) -> BackboneParams:
    """Cross-entropy training of backbone plus a linear head on ``source``.

    The head is dropped; the returned backbone is frozen.

    Raises:
        NumericalError: When the loss diverges

    """
    cfg = cfg or PretrainConfig()
    if len(source) == 0:
        raise DataError("cannot pretrain on an empty source split")
    backbone = init_backbone(vit, cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    head = {
        "head.weight": Tensor(
            rng.normal(0.0, 1.0 / np.sqrt(vit.dim), size=(vit.dim, source.num_classes)),
            requires_grad=True,
            name="head.weight",
        ),
        "head.bias": Tensor(np.zeros(source.num_classes), requires_grad=True, name="head.bias"),
    }
    params = {**backbone.tensors, **head}
    momenta: dict[str, Array] = {}
    spe = steps_per_epoch(source, cfg)
    log_operation(logger, "pretrain", count=len(source))

    for epoch in range(cfg.epochs):
        order = rng.permutation(len(source))
        total = correct = 0.0
        lr = 0.0
        for i in range(spe):
            rows = order[i * cfg.batch_size : (i + 1) * cfg.batch_size]
            if rows.size == 0:
                continue
            batch = source.take(rows, "instance")
            lr = lr_at(epoch * spe + i, cfg, spe)
            feature, _ = encode(batch.images, backbone, vit, phase="frozen")
            logits = feature @ head["head.weight"] + head["head.bias"]
            loss = cross_entropy(logits, batch.labels)
            value = loss.item()
            if not math.isfinite(value):
                raise NumericalError(
                    "pretraining loss diverged",
                    dump={"phase": "pretrain", "epoch": epoch + 1, "step": i, "loss": value, "lr": lr},
                )
            backward(loss)
            sgd_step(params, momenta, lr, cfg.momentum, cfg.weight_decay)
            total += value * len(rows)
            correct += float((logits.data.argmax(axis=1) == batch.labels).sum())
        record = EpochRecord("pretrain", epoch + 1, None, total / len(source), lr, correct / len(source))
        if history is not None:
            history.append(record)
        log_epoch(logger, "pretrain", epoch + 1, record.loss_bal, lr)
    return backbone.freeze()


def class_centric_init(
    backbone: BackboneParams, train: LongTailDataset, vit: ViTConfig, batch_size: int = 64
) -> ClassifierParams:
    """Classifier rows set to the normalised mean frozen-backbone feature of each class.

    Raises:
        DataError: When a class has no training sample

    """
    counts = train.per_class()
    missing = np.flatnonzero(counts == 0)
    if missing.size:
        raise DataError(f"classes {missing.tolist()} have no training samples")
    sums = np.zeros((train.num_classes, vit.dim))
    for batch in train.batches(batch_size):
        with no_grad():
            feature, _ = encode(batch.images, backbone, vit, phase="frozen")
        np.add.at(sums, batch.labels, feature.data)
    means = sums / counts[:, None]
    rows = means / np.maximum(np.linalg.norm(means, axis=1, keepdims=True), 1e-12)
    return ClassifierParams.from_weight(rows, vit.logit_scale)


# ---------------------------------------------------------------------------
# Phase loops

# (classification loss, extra loss added unweighted, raw scores)
BatchLoss = Callable[[Batch, np.random.Generator], tuple[Tensor, Tensor | None, Array]]


def _run_epochs(
    stage: str,
    trainables: Mapping[str, Tensor],
    train: LongTailDataset,
    cfg: TrainConfig,
    state: TrainState,
    batch_loss: BatchLoss,
    until_epoch: int | None,
) -> TrainState:
    """Dual-sampled epochs: one update per iteration on the summed batch losses."""
    spe = steps_per_epoch(train, cfg)
    stop = cfg.epochs if until_epoch is None else min(until_epoch, cfg.epochs)
    while state.epoch < stop:
        beta = beta_schedule(ScheduleState(cfg.eta, max(cfg.epochs, 1), state.epoch), "instance")
        sums = {"instance": 0.0, "balanced": 0.0}
        correct = seen = 0
        lr = 0.0
        for i in range(spe):
            step = state.epoch * spe + i
            lr = lr_at(step, cfg, spe)
            if cfg.dual_sampling:
                pair = dual_sample(train, cfg.batch_size, state.rng)
                weighted = [(pair.instance, beta), (pair.balanced, 1.0)]
            else:
                weighted = [(class_balanced_batch(train, cfg.batch_size, state.rng), 1.0)]

            total: Tensor | None = None
            for batch, weight in weighted:
                cls, extra, scores = batch_loss(batch, state.rng)
                term = cls * weight if extra is None else cls * weight + extra
                total = term if total is None else total + term
                sums[batch.kind] += cls.item()
                correct += int((scores.argmax(axis=1) == batch.labels).sum())
                seen += len(batch)
            assert total is not None  # noqa: S101
            value = total.item()
            if not math.isfinite(value):
                raise NumericalError(
                    f"{stage} loss is not finite",
                    dump={"phase": stage, "epoch": state.epoch + 1, "step": step, "loss": value, "lr": lr},
                )
            backward(total)
            sgd_step(trainables, state.momenta, lr, cfg.momentum, cfg.weight_decay)

        state.epoch += 1
        record = EpochRecord(
            stage,
            state.epoch,
            sums["instance"] / spe if cfg.dual_sampling else None,
            sums["balanced"] / spe,
            lr,
            correct / max(seen, 1),
        )
        state.history.append(record)
        log_epoch(logger, stage, state.epoch, record.loss_bal + (record.loss_ins or 0.0), lr)
    return state


def _stage_meta(state: TrainState, cfg: TrainConfig, gcl: GclConfig, **extra: Any) -> dict[str, Any]:
    return {**state.to_meta(), "epochs": cfg.epochs, "train": asdict(cfg), "gcl": asdict(gcl), **extra}


def _classification_step(expert: Expert, train: LongTailDataset, gcl: GclConfig) -> BatchLoss:
    counts = train.class_counts()

    def batch_loss(batch: Batch, rng: np.random.Generator) -> tuple[Tensor, Tensor | None, Array]:
        scores, _ = expert.forward(batch.images)
        return classification_loss(scores, batch.labels, counts, gcl, rng, True), None, scores.data

    return batch_loss


def _pool_step(
    expert: Expert, train: LongTailDataset, gcl: GclConfig, cache: FeatureCache | None
) -> BatchLoss:
    counts = train.class_counts()
    prompts = expert.prompts
    assert prompts is not None and prompts.pool is not None  # noqa: S101
    pool = prompts.pool

    def batch_loss(batch: Batch, rng: np.random.Generator) -> tuple[Tensor, Tensor | None, Array]:
        ids = batch.sample_ids if cache is not None else None
        scores, forward = expert.forward(batch.images, cache=cache, sample_ids=ids)
        assert forward.query is not None and forward.matched is not None  # noqa: S101
        cls = classification_loss(scores, batch.labels, counts, gcl, rng, True)
        return cls, key_loss(forward.query, matched_keys(pool, forward.matched)), scores.data

    return batch_loss


def run_phase1(
    backbone: BackboneParams,
    vit: ViTConfig,
    train: LongTailDataset,
    cfg: TrainConfig,
    gcl: GclConfig,
    resume: Checkpoint | None = None,
    until_epoch: int | None = None,
) -> Checkpoint:
    """Train shared prompt, adapters and classifier (or the classifier alone when linear probing)."""
    probe = cfg.phase1_mode == "linear_probe"
    if resume is not None:
        expert = expert_from_checkpoint(resume, backbone)
        state = TrainState.from_checkpoint(resume)
    else:
        classifier = class_centric_init(backbone, train, vit)
        if probe:
            expert = Expert(vit, backbone, classifier, phase="frozen", top_k=cfg.top_k)
        else:
            shared, _ = init_prompts(vit, cfg.seed, cfg.pool_size, cfg.top_k)
            adapters = init_adapters(vit, cfg.seed) if cfg.use_adapters else None
            expert = Expert(vit, backbone, classifier, PromptState(shared), adapters, "phase1", cfg.top_k)
        state = TrainState.fresh(cfg.seed)

    log_operation(logger, "phase1", count=len(train))
    trainables = expert.set_trainable(("classifier.",) if probe else PHASE1_PREFIXES)
    _run_epochs("phase1", trainables, train, cfg, state, _classification_step(expert, train, gcl), until_epoch)
    expert.set_trainable(())
    return expert_checkpoint("phase1", expert, _stage_meta(state, cfg, gcl, mode=cfg.phase1_mode), state.momenta_tensors())


def run_phase2(
    phase1: Checkpoint,
    backbone: BackboneParams,
    train: LongTailDataset,
    cfg: TrainConfig,
    gcl: GclConfig,
    resume: Checkpoint | None = None,
    until_epoch: int | None = None,
) -> Checkpoint:
    """Train group prompts, keys and classifier on top of the frozen phase-1 result.

    Raises:
        DependencyError: When phase 1 produced no shared prompt

    """
    base = expert_from_checkpoint(phase1, backbone)
    if base.prompts is None:
        raise DependencyError("phase 2 needs a prompt-tuned phase-1 checkpoint, not a linear probe")
    vit = base.vit

    if resume is not None:
        expert = expert_from_checkpoint(resume, backbone)
        state = TrainState.from_checkpoint(resume)
    else:
        _, pool = init_prompts(vit, cfg.seed, cfg.pool_size, cfg.top_k)
        classifier = ClassifierParams.from_weight(base.classifier.weight.data, vit.logit_scale)
        prompts = PromptState(base.prompts.shared, pool)
        expert = Expert(vit, backbone, classifier, prompts, base.adapters, "phase2", cfg.top_k)
        state = TrainState.fresh(cfg.seed)

    assert expert.prompts is not None  # noqa: S101
    trainables = expert.set_trainable(PHASE2_PREFIXES)
    cache = FeatureCache()
    digest = prime_cache(cache, train.images, train.sample_ids, backbone, vit, expert.prompts, expert.adapters)
    if resume is not None and resume.meta.get("phase1_digest") != digest:
        raise DependencyError("resumed phase-2 checkpoint belongs to a different phase-1 result")

    log_operation(logger, "phase2", count=len(train))
    _run_epochs("phase2", trainables, train, cfg, state, _pool_step(expert, train, gcl, cache), until_epoch)
    expert.set_trainable(())
    meta = _stage_meta(state, cfg, gcl, phase1_digest=digest)
    return expert_checkpoint("phase2", expert, meta, state.momenta_tensors())


def run_joint(
    backbone: BackboneParams,
    vit: ViTConfig,
    train: LongTailDataset,
    cfg: TrainConfig,
    gcl: GclConfig,
    resume: Checkpoint | None = None,
    until_epoch: int | None = None,
) -> Checkpoint:
    """Train every prompt, adapter, key and the classifier together for ``2 * epochs``.

    The matching query comes from the live shared prompt, detached.
    """
    cfg = replace(cfg, epochs=2 * cfg.epochs)
    if resume is not None:
        expert = expert_from_checkpoint(resume, backbone)
        state = TrainState.from_checkpoint(resume)
    else:
        classifier = class_centric_init(backbone, train, vit)
        shared, pool = init_prompts(vit, cfg.seed, cfg.pool_size, cfg.top_k)
        adapters = init_adapters(vit, cfg.seed) if cfg.use_adapters else None
        expert = Expert(vit, backbone, classifier, PromptState(shared, pool), adapters, "phase2", cfg.top_k)
        state = TrainState.fresh(cfg.seed)

    log_operation(logger, "joint", count=len(train))
    trainables = expert.set_trainable(JOINT_PREFIXES)
    _run_epochs("joint", trainables, train, cfg, state, _pool_step(expert, train, gcl, None), until_epoch)
    expert.set_trainable(())
    return expert_checkpoint("joint", expert, _stage_meta(state, cfg, gcl), state.momenta_tensors())
