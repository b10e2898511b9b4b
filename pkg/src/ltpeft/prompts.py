"""Shared prompt, group prompt pool, key matching and prompt ensembling."""

from __future__ import annotations

from collections.abc import Iterator
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .autodiff import Array, Tensor, take
from .errors import ConfigError, ContractError, DegenerateError

if TYPE_CHECKING:
    from .backbone import ViTConfig

PROMPT_STD = 0.02
TRUNCATION = 2.0
NORM_FLOOR = 1e-12


@dataclass
class SharedPrompt:
    """``u_1..u_L``: one (p, d) token matrix per block, stored as (L, p, d)."""

    tokens: Tensor

    @property
    def layers(self) -> int:
        return self.tokens.shape[0]

    def tensors(self) -> dict[str, Tensor]:
        return {"prompt.shared": self.tokens}


@dataclass
class GroupPromptPool:
    """``m`` (key, prompt) pairs; every prompt covers the last ``L - K`` blocks."""

    keys: Tensor
    prompts: Tensor
    top_k: int = 2

    def __post_init__(self) -> None:
        if self.keys.ndim != 2 or self.prompts.ndim != 4 or self.keys.shape[0] != self.prompts.shape[0]:
            raise ContractError(f"pool keys {self.keys.shape} and prompts {self.prompts.shape} do not pair up")
        if not 1 <= self.top_k <= self.size:
            raise ConfigError(f"top_k {self.top_k} outside [1, {self.size}]")
        if not np.isfinite(self.keys.data).all():
            raise ContractError("pool keys must be finite")

    @property
    def size(self) -> int:
        return self.keys.shape[0]

    def tensors(self) -> dict[str, Tensor]:
        return {"pool.keys": self.keys, "pool.prompts": self.prompts}


@dataclass
class PromptState:
    shared: SharedPrompt
    pool: GroupPromptPool | None = None

    def __iter__(self) -> Iterator[SharedPrompt | GroupPromptPool | None]:
        yield self.shared
        yield self.pool

    def tensors(self) -> dict[str, Tensor]:
        out = self.shared.tensors()
        if self.pool is not None:
            out.update(self.pool.tensors())
        return out


def truncated_normal(
    rng: np.random.Generator, shape: tuple[int, ...], std: float = PROMPT_STD, bound: float = TRUNCATION
) -> Array:
    """Normal draws with everything beyond ``bound`` standard deviations redrawn."""
    out = rng.normal(0.0, std, size=shape)
    outside = np.abs(out) > bound * std
    while outside.any():
        out[outside] = rng.normal(0.0, std, size=int(outside.sum()))
        outside = np.abs(out) > bound * std
    return out


def init_prompts(
    cfg: ViTConfig, seed: int, pool_size: int = 20, top_k: int = 2
) -> tuple[SharedPrompt, GroupPromptPool]:
    """Truncated-normal prompts and keys; keys are unit-normalized afterwards."""
    if pool_size < 1:
        raise ConfigError("pool_size must be at least 1")
    rng = np.random.default_rng(seed)
    shared = truncated_normal(rng, (cfg.layers, cfg.prompt_length, cfg.dim))
    prompts = truncated_normal(rng, (pool_size, cfg.layers - cfg.k, cfg.prompt_length, cfg.dim))
    keys = truncated_normal(rng, (pool_size, cfg.dim))
    keys /= np.maximum(np.linalg.norm(keys, axis=1, keepdims=True), NORM_FLOOR)
    return (
        SharedPrompt(Tensor(shared, requires_grad=True, name="prompt.shared")),
        GroupPromptPool(
            Tensor(keys, requires_grad=True, name="pool.keys"),
            Tensor(prompts, requires_grad=True, name="pool.prompts"),
            top_k=top_k,
        ),
    )


def key_similarity(query: ArrayLike, keys: Array) -> Array:
    """Cosine similarity of each query row with each key, shape (B, m) or (m,).

    Raises:
        DegenerateError: On a zero-norm query or key

    """
    q = np.asarray(query, dtype=np.float64)
    q_norm = np.linalg.norm(q, axis=-1, keepdims=True)
    k_norm = np.linalg.norm(keys, axis=-1)
    if (q_norm <= NORM_FLOOR).any():
        raise DegenerateError("cannot match a zero-norm query")
    if (k_norm <= NORM_FLOOR).any():
        raise DegenerateError("pool holds a zero-norm key")
    return (q / q_norm) @ (keys / k_norm[:, None]).T


def match_group_prompts(query: ArrayLike, pool: GroupPromptPool, k: int) -> NDArray[np.intp]:
    """Indices of the ``k`` keys most similar to ``query``, best first.

    Ties go to the lower index. A (d,) query gives (k,) indices and a
    (B, d) batch gives (B, k).
    """
    if not 1 <= k <= pool.size:
        raise ContractError(f"k={k} outside [1, {pool.size}]")
    sims = key_similarity(query, pool.keys.data)
    order = np.argsort(-sims, axis=-1, kind="stable")
    return np.ascontiguousarray(order[..., :k]).astype(np.intp)


def ensemble_prompts(pool: GroupPromptPool, indices: ArrayLike) -> Tensor:
    """Mean of the selected group prompts, (L-K, p, d) or (B, L-K, p, d).

    Gradient reaches only the selected pool entries.
    """
    w = np.asarray(indices, dtype=np.intp)
    if w.size == 0 or w.shape[-1] == 0:
        raise ContractError("ensemble_prompts needs at least one index")
    if (w < 0).any() or (w >= pool.size).any():
        raise ContractError(f"prompt index outside [0, {pool.size})")
    return take(pool.prompts, w).mean(axis=w.ndim - 1)


def matched_keys(pool: GroupPromptPool, indices: ArrayLike) -> Tensor:
    """Keys of the selected entries, (k, d) or (B, k, d)."""
    return take(pool.keys, np.asarray(indices, dtype=np.intp))
