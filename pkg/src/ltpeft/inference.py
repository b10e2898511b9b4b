"""Trained expert bundles, checkpoint conversion and parallel scoring."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import asdict, dataclass
from typing import Any, Literal

import numpy as np
from numpy.typing import NDArray
from rich.console import Console
from rich.progress import BarColumn, Progress, SpinnerColumn, TextColumn

from .autodiff import Array, Tensor, digest, no_grad
from .backbone import (
    AdapterParams,
    BackboneParams,
    ClassifierParams,
    ForwardCache,
    Phase,
    ViTConfig,
    encode,
    phase1_features,
    vit_forward,
)
from .cache import FeatureCache
from .checkpoint import Checkpoint
from .data import LongTailDataset
from .errors import CheckpointError, ContractError, DataError
from .moe import ScoreTable
from .prompts import GroupPromptPool, PromptState, SharedPrompt

logger = logging.getLogger(__name__)
console = Console(stderr=True)

QueryKind = Literal["phase1", "frozen"]


@dataclass
class Expert:
    """Frozen backbone plus everything a stage trained on top of it."""

    vit: ViTConfig
    backbone: BackboneParams
    classifier: ClassifierParams
    prompts: PromptState | None = None
    adapters: AdapterParams | None = None
    phase: Phase = "frozen"
    top_k: int = 2

    def parameters(self) -> dict[str, Tensor]:
        """Every non-backbone tensor by checkpoint name."""
        out: dict[str, Tensor] = dict(self.classifier.tensors)
        if self.prompts is not None:
            out.update(self.prompts.tensors())
        if self.adapters is not None:
            out.update(self.adapters.tensors)
        return out

    def set_trainable(self, prefixes: tuple[str, ...]) -> dict[str, Tensor]:
        """Mark tensors whose name starts with one of ``prefixes`` trainable, freeze the rest."""
        chosen: dict[str, Tensor] = {}
        for name, tensor in self.parameters().items():
            tensor.requires_grad = name.startswith(prefixes)
            tensor.grad = None
            if tensor.requires_grad:
                chosen[name] = tensor
        return chosen

    def forward(
        self,
        images: Array,
        *,
        cache: FeatureCache | None = None,
        sample_ids: NDArray[np.int64] | None = None,
        pool_query: Array | None = None,
    ) -> tuple[Tensor, ForwardCache]:
        return vit_forward(
            images,
            self.backbone,
            self.vit,
            self.classifier,
            phase=self.phase,
            prompts=self.prompts,
            adapters=self.adapters,
            cache=cache,
            sample_ids=sample_ids,
            pool_query=pool_query,
        )

    def features(self, images: Array) -> Array:
        """Class-token features ``c_L`` without gradient."""
        with no_grad():
            feature, _ = encode(
                images, self.backbone, self.vit, phase=self.phase, prompts=self.prompts, adapters=self.adapters
            )
        return feature.data

    def scores(self, images: Array) -> Array:
        with no_grad():
            scores, _ = self.forward(images)
        return scores.data

    def digest(self) -> str:
        return digest(self.parameters())


# ---------------------------------------------------------------------------
# Checkpoint conversion


def vit_from_meta(meta: dict[str, Any]) -> ViTConfig:
    try:
        return ViTConfig(**meta["vit"])
    except (KeyError, TypeError) as e:
        raise CheckpointError(f"checkpoint lacks a usable backbone configuration: {e}") from e


def backbone_checkpoint(backbone: BackboneParams, vit: ViTConfig, meta: dict[str, Any]) -> Checkpoint:
    return Checkpoint(
        "backbone",
        backbone.arrays(),
        {**meta, "vit": asdict(vit), "backbone_digest": backbone.digest()},
    )


def backbone_from_checkpoint(ckpt: Checkpoint) -> tuple[BackboneParams, ViTConfig]:
    if ckpt.stage != "backbone":
        raise CheckpointError(f"expected a backbone checkpoint, got {ckpt.stage}")
    backbone = BackboneParams.from_arrays(ckpt.tensors, frozen=True)
    if backbone.digest() != ckpt.backbone_digest:
        raise CheckpointError("backbone tensors do not match their recorded digest")
    return backbone, vit_from_meta(ckpt.meta)


def expert_checkpoint(stage: str, expert: Expert, meta: dict[str, Any], extra: dict[str, Array] | None = None) -> Checkpoint:
    """Stage checkpoint with every expert tensor plus ``extra`` (e.g. momenta)."""
    tensors = {name: tensor.data.copy() for name, tensor in expert.parameters().items()}
    tensors.update(extra or {})
    return Checkpoint(
        stage,
        tensors,
        {
            **meta,
            "vit": asdict(expert.vit),
            "phase": expert.phase,
            "top_k": expert.top_k,
            "backbone_digest": expert.backbone.digest(),
        },
    )


def expert_from_checkpoint(ckpt: Checkpoint, backbone: BackboneParams) -> Expert:
    """Rebuild the expert stored in ``ckpt`` on top of ``backbone``.

    Raises:
        CheckpointError: On a backbone mismatch or missing tensors

    """
    if ckpt.backbone_digest != backbone.digest():
        raise CheckpointError(f"{ckpt.stage} checkpoint was trained against a different backbone")
    vit = vit_from_meta(ckpt.meta)
    t = ckpt.tensors
    if "classifier.weight" not in t:
        raise CheckpointError(f"{ckpt.stage} checkpoint has no classifier")

    def leaf(name: str) -> Tensor:
        return Tensor(t[name], requires_grad=False, name=name)

    prompts = None
    if "prompt.shared" in t:
        pool = None
        if "pool.keys" in t:
            pool = GroupPromptPool(leaf("pool.keys"), leaf("pool.prompts"), top_k=int(ckpt.meta.get("top_k", 2)))
        prompts = PromptState(SharedPrompt(leaf("prompt.shared")), pool)
    adapter_arrays = {name: value for name, value in t.items() if name.startswith("adapter.")}
    adapters = (
        AdapterParams.from_arrays(adapter_arrays, vit.adapter_scale, vit.adapter_activation, frozen=True)
        if adapter_arrays
        else None
    )
    return Expert(
        vit=vit,
        backbone=backbone,
        classifier=ClassifierParams.from_weight(t["classifier.weight"], vit.logit_scale, frozen=True),
        prompts=prompts,
        adapters=adapters,
        phase=ckpt.meta.get("phase", "frozen"),
        top_k=int(ckpt.meta.get("top_k", 2)),
    )


# ---------------------------------------------------------------------------
# Scoring


def _batch_rows(n: int, batch_size: int) -> list[NDArray[np.int64]]:
    return [np.arange(start, min(start + batch_size, n)) for start in range(0, n, batch_size)]


def map_batches(
    fn: Any,
    dataset: LongTailDataset,
    batch_size: int = 64,
    threads: int = 1,
    description: str | None = None,
) -> Array:
    """Apply ``fn(images) -> (b, ...)`` to every batch and stack rows in dataset order.

    Batches fan out over ``threads`` workers; ``description`` shows a progress bar.
    """
    chunks = _batch_rows(len(dataset), batch_size)
    results: dict[int, Array] = {}

    def run(index: int) -> Array:
        return np.asarray(fn(dataset.images[chunks[index]]))

    if not chunks:
        raise DataError(f"cannot score an empty {dataset.split} split")

    with Progress(
        SpinnerColumn(),
        TextColumn("[progress.description]{task.description}"),
        BarColumn(),
        TextColumn("[progress.percentage]{task.percentage:>3.0f}%"),
        console=console,
        disable=description is None,
    ) as progress:
        task = progress.add_task(description or "", total=len(chunks))
        with ThreadPoolExecutor(max_workers=max(threads, 1)) as executor:
            futures = {executor.submit(run, i): i for i in range(len(chunks))}
            for future in as_completed(futures):
                results[futures[future]] = future.result()
                progress.advance(task)
    return np.concatenate([results[i] for i in range(len(chunks))], axis=0)


def expert_scores(
    expert: Expert,
    dataset: LongTailDataset,
    batch_size: int = 64,
    threads: int = 1,
    description: str | None = None,
) -> Array:
    """Raw cosine-classifier scores, one row per sample in dataset order."""
    return map_batches(expert.scores, dataset, batch_size, threads, description)


def score_table(
    expert: Expert,
    dataset: LongTailDataset,
    batch_size: int = 64,
    threads: int = 1,
    description: str | None = None,
) -> ScoreTable:
    """Scores of a single expert in the CSV exchange layout."""
    scores = expert_scores(expert, dataset, batch_size, threads, description)
    return ScoreTable(dataset.sample_ids, dataset.labels, scores)


def query_features(
    expert: Expert,
    dataset: LongTailDataset,
    kind: QueryKind = "phase1",
    batch_size: int = 64,
    threads: int = 1,
) -> Array:
    """Matching queries for every sample: phase-1 class tokens or bare frozen-backbone ones.

    Raises:
        ContractError: When ``kind`` is ``phase1`` and the expert has no shared prompt

    """
    if kind == "frozen":
        bare = Expert(expert.vit, expert.backbone, expert.classifier)
        return map_batches(bare.features, dataset, batch_size, threads)
    if kind != "phase1":
        raise ContractError(f"unknown query kind {kind!r}")
    prompts = expert.prompts
    if prompts is None:
        raise ContractError("phase-1 queries need a prompt-tuned expert")

    def query(images: Array) -> Array:
        return phase1_features(images, expert.backbone, expert.vit, prompts, expert.adapters)[2]

    return map_batches(query, dataset, batch_size, threads)
