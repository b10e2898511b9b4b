"""Tiny ViT with prompt tokens on keys/values, parallel adapters and a cosine head.

Blocks are pre-norm. Prompt tokens are appended to the layer-normed token
sequence of a block, so they extend keys and values but never produce query
rows. Phase 2 reuses the tokens after block ``K`` of the phase-1 pass, matches
group prompts with the phase-1 class token and reruns the last ``L - K``
blocks with both the shared and the ensembled group prompt.
"""

from __future__ import annotations

from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Literal

import numpy as np
from numpy.typing import NDArray

from .autodiff import (
    Array,
    Tensor,
    activation,
    as_tensor,
    concat,
    digest,
    expand,
    l2_normalize,
    layer_norm,
    no_grad,
    parameter,
    softmax,
)
from .errors import ConfigError, ContractError, ShapeError

if TYPE_CHECKING:
    from .cache import FeatureCache
    from .prompts import PromptState, SharedPrompt

Phase = Literal["frozen", "phase1", "phase2"]


@dataclass(frozen=True)
class ViTConfig:
    """Shape of the backbone and of everything attached to it."""

    layers: int = 4
    dim: int = 32
    heads: int = 2
    patch: int = 4
    image: int = 16
    channels: int = 3
    mlp_ratio: int = 2
    prompt_length: int = 10
    shared_layers: int | None = None
    adapter_dim: int = 8
    adapter_scale: float = 0.1
    adapter_activation: Literal["relu", "gelu"] = "relu"
    logit_scale: float = 16.0
    ln_eps: float = 1e-5

    def __post_init__(self) -> None:
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} is not divisible by heads {self.heads}")
        if self.image % self.patch:
            raise ConfigError(f"image {self.image} is not divisible by patch {self.patch}")
        if not 0 <= self.k <= self.layers:
            raise ConfigError(f"shared_layers {self.k} outside [0, {self.layers}]")
        if self.adapter_scale <= 0:
            raise ConfigError("adapter_scale must be positive")
        if self.prompt_length < 0:
            raise ConfigError("prompt_length must be non-negative")

    @property
    def k(self) -> int:
        """Blocks that see only the shared prompt."""
        return self.layers // 2 if self.shared_layers is None else self.shared_layers

    @property
    def num_patches(self) -> int:
        return (self.image // self.patch) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.channels

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def hidden(self) -> int:
        return self.dim * self.mlp_ratio


@dataclass
class TensorGroup:
    """Named tensors that are checkpointed, digested and frozen together."""

    tensors: dict[str, Tensor]
    frozen: bool = False

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def freeze(self) -> TensorGroup:
        for tensor in self.tensors.values():
            tensor.requires_grad = False
            tensor.grad = None
        self.frozen = True
        return self

    def trainable(self) -> dict[str, Tensor]:
        return {} if self.frozen else dict(self.tensors)

    def arrays(self) -> dict[str, Array]:
        return {name: tensor.data for name, tensor in self.tensors.items()}

    def digest(self) -> str:
        return digest(self.tensors)

    @staticmethod
    def _leaves(arrays: Mapping[str, Array], frozen: bool) -> dict[str, Tensor]:
        return {
            name: Tensor(value, requires_grad=not frozen, name=name)
            for name, value in arrays.items()
        }


@dataclass
class BackboneParams(TensorGroup):
    """Patch embedding, class token, positions, blocks and final norm."""

    _digest: str | None = field(default=None, repr=False)

    def freeze(self) -> BackboneParams:
        super().freeze()
        self._digest = digest(self.tensors)
        return self

    def digest(self) -> str:
        if self.frozen and self._digest is not None:
            return self._digest
        return digest(self.tensors)

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, Array], frozen: bool = True) -> BackboneParams:
        params = cls(cls._leaves(arrays, frozen))
        return params.freeze() if frozen else params


@dataclass
class AdapterParams(TensorGroup):
    """Per-layer down/up projections of the parallel FFN branch."""

    scale: float = 0.1
    kind: Literal["relu", "gelu"] = "relu"

    @classmethod
    def from_arrays(
        cls,
        arrays: Mapping[str, Array],
        scale: float,
        kind: Literal["relu", "gelu"] = "relu",
        frozen: bool = False,
    ) -> AdapterParams:
        params = cls(cls._leaves(arrays, frozen), scale=scale, kind=kind)
        return params.freeze() if frozen else params  # type: ignore[return-value]


@dataclass
class ClassifierParams(TensorGroup):
    """Cosine classifier ``theta_f`` (C x d) with a fixed logit scale."""

    scale: float = 16.0

    @property
    def weight(self) -> Tensor:
        return self.tensors["classifier.weight"]

    @property
    def num_classes(self) -> int:
        return self.weight.shape[0]

    @classmethod
    def from_weight(cls, weight: Array, scale: float, frozen: bool = False) -> ClassifierParams:
        params = cls(cls._leaves({"classifier.weight": weight}, frozen), scale=scale)
        return params.freeze() if frozen else params  # type: ignore[return-value]


@dataclass
class ForwardCache:
    """Intermediate tokens of one forward pass, one row per sample."""

    c_k: Array
    z_k: Array
    c_l: Array
    query: Array | None = None
    matched: NDArray[np.intp] | None = None


# ---------------------------------------------------------------------------
# Initialisation


def _block_shapes(cfg: ViTConfig, layer: int) -> dict[str, tuple[int, ...]]:
    d, hidden = cfg.dim, cfg.hidden
    pre = f"blocks.{layer}."
    return {
        pre + "ln1.gain": (d,),
        pre + "ln1.bias": (d,),
        pre + "attn.wq": (d, d),
        pre + "attn.bq": (d,),
        pre + "attn.wk": (d, d),
        pre + "attn.bk": (d,),
        pre + "attn.wv": (d, d),
        pre + "attn.bv": (d,),
        pre + "attn.wo": (d, d),
        pre + "attn.bo": (d,),
        pre + "ln2.gain": (d,),
        pre + "ln2.bias": (d,),
        pre + "ffn.w1": (d, hidden),
        pre + "ffn.b1": (hidden,),
        pre + "ffn.w2": (hidden, d),
        pre + "ffn.b2": (d,),
    }


def init_backbone(cfg: ViTConfig, seed: int) -> BackboneParams:
    """Randomly initialised, trainable backbone."""
    rng = np.random.default_rng(seed)
    shapes: dict[str, tuple[int, ...]] = {
        "patch.weight": (cfg.patch_dim, cfg.dim),
        "patch.bias": (cfg.dim,),
        "cls_token": (cfg.dim,),
        "pos_embed": (1 + cfg.num_patches, cfg.dim),
    }
    for layer in range(cfg.layers):
        shapes.update(_block_shapes(cfg, layer))
    shapes["norm.gain"] = (cfg.dim,)
    shapes["norm.bias"] = (cfg.dim,)

    arrays: dict[str, Array] = {}
    for name, shape in shapes.items():
        if name.endswith("gain"):
            arrays[name] = np.ones(shape)
        elif name in ("cls_token", "pos_embed"):
            arrays[name] = rng.normal(0.0, 0.02, size=shape)
        elif len(shape) == 2:
            arrays[name] = rng.normal(0.0, 1.0 / np.sqrt(shape[0]), size=shape)
        else:
            arrays[name] = np.zeros(shape)
    return BackboneParams.from_arrays(arrays, frozen=False)


def init_adapters(cfg: ViTConfig, seed: int) -> AdapterParams:
    """Adapters with a zero up-projection, i.e. the identity at init."""
    rng = np.random.default_rng(seed)
    arrays: dict[str, Array] = {}
    for layer in range(cfg.layers):
        pre = f"adapter.{layer}."
        arrays[pre + "down"] = rng.normal(0.0, 1.0 / np.sqrt(cfg.dim), size=(cfg.dim, cfg.adapter_dim))
        arrays[pre + "down_bias"] = np.zeros(cfg.adapter_dim)
        arrays[pre + "up"] = np.zeros((cfg.adapter_dim, cfg.dim))
        arrays[pre + "up_bias"] = np.zeros(cfg.dim)
    return AdapterParams.from_arrays(arrays, cfg.adapter_scale, cfg.adapter_activation)


# ---------------------------------------------------------------------------
# Forward pieces


def patchify(images: Array, patch: int) -> Array:
    """(B, H, W, ch) or (H, W, ch) images to (B, patches, patch*patch*ch)."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    if images.ndim != 4:
        raise ShapeError(f"expected (B, H, W, ch) images, got shape {images.shape}")
    b, h, w, ch = images.shape
    if h % patch or w % patch:
        raise ShapeError(f"image {h}x{w} is not divisible by patch side {patch}")
    grid = images.reshape(b, h // patch, patch, w // patch, patch, ch)
    return grid.transpose(0, 1, 3, 2, 4, 5).reshape(b, (h // patch) * (w // patch), patch * patch * ch)


def patch_embed(images: Array, backbone: BackboneParams, cfg: ViTConfig) -> Tensor:
    """Patch tokens ``z_0`` (B, N, d), without positional embedding."""
    patches = patchify(images, cfg.patch)
    if patches.shape[-1] != backbone["patch.weight"].shape[0]:
        raise ShapeError(
            f"patch of {patches.shape[-1]} values does not fit projection {backbone['patch.weight'].shape}"
        )
    return as_tensor(patches) @ backbone["patch.weight"] + backbone["patch.bias"]


def embed(images: Array, backbone: BackboneParams, cfg: ViTConfig) -> Tensor:
    """Token sequence ``[c_0, z_0]`` plus positions, shape (B, 1 + N, d)."""
    z0 = patch_embed(images, backbone, cfg)
    batch, count = z0.shape[0], z0.shape[1]
    if count + 1 != backbone["pos_embed"].shape[0]:
        raise ShapeError(f"{count} patches do not match position table {backbone['pos_embed'].shape}")
    cls = expand(backbone["cls_token"].reshape(1, 1, cfg.dim), (batch, 1, cfg.dim))
    return concat([cls, z0], axis=1) + backbone["pos_embed"]


def attention(
    x: Tensor,
    extra_kv: Tensor | None,
    layer: int,
    backbone: BackboneParams,
    cfg: ViTConfig,
) -> tuple[Tensor, Tensor]:
    """Multi-head self-attention where ``extra_kv`` extends keys and values only.

    Returns:
        Attention output (B, T, d) and probabilities (B, heads, T, T + P)

    """
    batch, length, width = x.shape
    if width != cfg.dim or (extra_kv is not None and extra_kv.shape[-1] != width):
        other = None if extra_kv is None else extra_kv.shape
        raise ShapeError(f"token dims {x.shape} / {other} do not match d={cfg.dim}")
    pre = f"blocks.{layer}."
    seq = x if extra_kv is None else concat([x, extra_kv], axis=1)
    h = layer_norm(seq, backbone[pre + "ln1.gain"], backbone[pre + "ln1.bias"], cfg.ln_eps)
    h_query = h if extra_kv is None else h[:, :length]
    span = seq.shape[1]
    heads, head_dim = cfg.heads, cfg.head_dim

    q = (h_query @ backbone[pre + "attn.wq"] + backbone[pre + "attn.bq"]).reshape(batch, length, heads, head_dim)
    k = (h @ backbone[pre + "attn.wk"] + backbone[pre + "attn.bk"]).reshape(batch, span, heads, head_dim)
    v = (h @ backbone[pre + "attn.wv"] + backbone[pre + "attn.bv"]).reshape(batch, span, heads, head_dim)

    scores = (q.transpose(0, 2, 1, 3) @ k.transpose(0, 2, 3, 1)) * (1.0 / np.sqrt(head_dim))
    probs = softmax(scores, axis=-1)
    mixed = (probs @ v.transpose(0, 2, 1, 3)).transpose(0, 2, 1, 3).reshape(batch, length, width)
    return mixed @ backbone[pre + "attn.wo"] + backbone[pre + "attn.bo"], probs


def _block(
    x: Tensor,
    extra_kv: Tensor | None,
    layer: int,
    backbone: BackboneParams,
    cfg: ViTConfig,
    adapters: AdapterParams | None,
) -> Tensor:
    pre = f"blocks.{layer}."
    attended, _ = attention(x, extra_kv, layer, backbone, cfg)
    x = x + attended
    h = layer_norm(x, backbone[pre + "ln2.gain"], backbone[pre + "ln2.bias"], cfg.ln_eps)
    hidden = activation(h @ backbone[pre + "ffn.w1"] + backbone[pre + "ffn.b1"], "gelu")
    out = x + (hidden @ backbone[pre + "ffn.w2"] + backbone[pre + "ffn.b2"])
    if adapters is not None:
        ad = f"adapter.{layer}."
        down = activation(h @ adapters[ad + "down"] + adapters[ad + "down_bias"], adapters.kind)
        out = out + (down @ adapters[ad + "up"] + adapters[ad + "up_bias"]) * adapters.scale
    return out


def block_forward(
    c: Tensor,
    z: Tensor,
    extra_kv: Tensor | None,
    layer: int,
    backbone: BackboneParams,
    cfg: ViTConfig,
    adapters: AdapterParams | None = None,
) -> tuple[Tensor, Tensor]:
    """One transformer block on class token ``c`` (B, d) and patch tokens ``z`` (B, N, d).

    ``extra_kv`` holds prompt tokens (B, P, d) or (P, d); P may be zero.
    With adapters the block output is ``x + FFN(LN(x)) + s * Up(act(Down(LN(x))))``.
    """
    if not 0 <= layer < cfg.layers:
        raise ContractError(f"layer {layer} outside [0, {cfg.layers})")
    batch = z.shape[0]
    if extra_kv is not None and extra_kv.ndim == 2:
        extra_kv = expand(extra_kv.reshape(1, *extra_kv.shape), (batch, *extra_kv.shape))
    x = concat([c.reshape(batch, 1, c.shape[-1]), z], axis=1)
    out = _block(x, extra_kv, layer, backbone, cfg, adapters)
    return out[:, 0], out[:, 1:]


def final_feature(x: Tensor, backbone: BackboneParams, cfg: ViTConfig) -> Tensor:
    """Layer-normed class token ``c_L`` of a (B, T, d) token sequence."""
    return layer_norm(x[:, 0], backbone["norm.gain"], backbone["norm.bias"], cfg.ln_eps)


def _shared_tokens(shared: SharedPrompt | None, layer: int, batch: int) -> Tensor | None:
    if shared is None:
        return None
    tokens = shared.tokens[layer]
    return expand(tokens.reshape(1, *tokens.shape), (batch, *tokens.shape))


def _run_layers(
    x: Tensor,
    layers: Sequence[int],
    backbone: BackboneParams,
    cfg: ViTConfig,
    shared: SharedPrompt | None,
    adapters: AdapterParams | None,
) -> Tensor:
    for layer in layers:
        x = _block(x, _shared_tokens(shared, layer, x.shape[0]), layer, backbone, cfg, adapters)
    return x


def phase1_digest(backbone: BackboneParams, prompts: PromptState, adapters: AdapterParams | None) -> str:
    """Identity of everything that shapes the phase-1 pass."""
    tensors: dict[str, Tensor] = dict(prompts.shared.tensors())
    if adapters is not None:
        tensors.update(adapters.tensors)
    return f"{backbone.digest()}:{digest(tensors)}"


def phase1_features(
    images: Array,
    backbone: BackboneParams,
    cfg: ViTConfig,
    prompts: PromptState,
    adapters: AdapterParams | None,
) -> tuple[Array, Array, Array]:
    """Tokens after block K and the phase-1 query ``c_L``, without gradient.

    Returns:
        (c_K (B, d), z_K (B, N, d), query (B, d))

    """
    with no_grad():
        x_k = _run_layers(embed(images, backbone, cfg), range(cfg.k), backbone, cfg, prompts.shared, adapters)
        x_l = _run_layers(x_k, range(cfg.k, cfg.layers), backbone, cfg, prompts.shared, adapters)
        query = final_feature(x_l, backbone, cfg)
    return x_k.data[:, 0].copy(), x_k.data[:, 1:].copy(), query.data.copy()


def encode(
    images: Array,
    backbone: BackboneParams,
    cfg: ViTConfig,
    *,
    phase: Phase,
    prompts: PromptState | None = None,
    adapters: AdapterParams | None = None,
    cache: FeatureCache | None = None,
    sample_ids: Sequence[int] | NDArray[np.int64] | None = None,
    pool_query: Array | None = None,
) -> tuple[Tensor, ForwardCache]:
    """Class-token feature for ``phase`` plus the intermediate tokens.

    ``frozen`` runs the bare backbone. ``phase1`` adds the shared prompt to
    every block and the adapters. ``phase2`` takes (c_K, z_K) and the query
    from ``cache`` when one is given (a missing entry is an error), otherwise
    recomputes them; ``pool_query`` replaces the phase-1 query for matching.
    """
    from .prompts import ensemble_prompts, match_group_prompts

    if phase == "frozen":
        x = _run_layers(embed(images, backbone, cfg), range(cfg.layers), backbone, cfg, None, None)
        feature = final_feature(x, backbone, cfg)
        return feature, ForwardCache(x.data[:, 0], x.data[:, 1:], feature.data)

    if prompts is None:
        raise ContractError(f"{phase} forward needs a prompt state")

    if phase == "phase1":
        x_k = _run_layers(embed(images, backbone, cfg), range(cfg.k), backbone, cfg, prompts.shared, adapters)
        x = _run_layers(x_k, range(cfg.k, cfg.layers), backbone, cfg, prompts.shared, adapters)
        feature = final_feature(x, backbone, cfg)
        return feature, ForwardCache(x_k.data[:, 0], x_k.data[:, 1:], feature.data)

    if phase != "phase2":
        raise ContractError(f"unknown phase {phase!r}")
    if prompts.pool is None:
        raise ContractError("phase2 forward needs a group prompt pool")

    if cache is not None:
        if sample_ids is None:
            raise ContractError("cached phase2 forward needs sample ids")
        c_k, z_k, query = cache.get(sample_ids, phase1_digest(backbone, prompts, adapters))
        x_k = as_tensor(np.concatenate([c_k[:, None], z_k], axis=1))
    else:
        x_k = _run_layers(embed(images, backbone, cfg), range(cfg.k), backbone, cfg, prompts.shared, adapters)
        with no_grad():
            x_q = _run_layers(x_k.detach(), range(cfg.k, cfg.layers), backbone, cfg, prompts.shared, adapters)
            query = final_feature(x_q, backbone, cfg).data

    match_on = query if pool_query is None else np.asarray(pool_query, dtype=np.float64)
    matched = match_group_prompts(match_on, prompts.pool, prompts.pool.top_k)
    group = ensemble_prompts(prompts.pool, matched)

    x = x_k
    batch = x.shape[0]
    for layer in range(cfg.k, cfg.layers):
        shared = _shared_tokens(prompts.shared, layer, batch)
        extra = group[:, layer - cfg.k] if shared is None else concat([shared, group[:, layer - cfg.k]], axis=1)
        x = _block(x, extra, layer, backbone, cfg, adapters)
    feature = final_feature(x, backbone, cfg)
    return feature, ForwardCache(x_k.data[:, 0], x_k.data[:, 1:], feature.data, query, matched)


def cosine_classify(feature: Tensor, classifier: ClassifierParams) -> Tensor:
    """Scores ``sigma * <theta_i / |theta_i|, c / |c|>`` for every class, shape (B, C)."""
    weight = classifier.weight
    if feature.shape[-1] != weight.shape[1]:
        raise ShapeError(f"feature dim {feature.shape[-1]} does not match classifier {weight.shape}")
    return (l2_normalize(feature) @ l2_normalize(weight).transpose()) * classifier.scale


def vit_forward(
    images: Array,
    backbone: BackboneParams,
    cfg: ViTConfig,
    classifier: ClassifierParams,
    *,
    phase: Phase,
    prompts: PromptState | None = None,
    adapters: AdapterParams | None = None,
    cache: FeatureCache | None = None,
    sample_ids: Sequence[int] | NDArray[np.int64] | None = None,
    pool_query: Array | None = None,
) -> tuple[Tensor, ForwardCache]:
    """Classifier scores for ``phase`` and the forward cache."""
    feature, forward_cache = encode(
        images,
        backbone,
        cfg,
        phase=phase,
        prompts=prompts,
        adapters=adapters,
        cache=cache,
        sample_ids=sample_ids,
        pool_query=pool_query,
    )
    return cosine_classify(feature, classifier), forward_cache
