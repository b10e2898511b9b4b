"""Run configuration: a flat TOML document over a registry of documented keys."""

import os
import re
import tomllib
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from .backbone import ViTConfig
from .data import DatasetSpec
from .errors import ConfigError
from .losses import GclConfig
from .moe import MoEConfig
from .trainer import PretrainConfig, TrainConfig

THREADS_ENV = "LTPEFT_THREADS"
AUTO = "auto"

DESK = "desk-scale choice"


@dataclass(frozen=True)
class Key:
    default: Any
    help: str
    source: str = DESK
    choices: tuple[str, ...] | None = None
    auto: bool = False


KEYS: dict[str, Key] = {
    # dataset
    "classes": Key(30, "number of classes C"),
    "n_max": Key(100, "training samples of the largest class"),
    "imbalance": Key(100.0, "imbalance ratio n_max / n_min"),
    "val_per_class": Key(20, "validation samples per class"),
    "source_per_class": Key(100, "source-domain samples per class for pretraining"),
    "image": Key(16, "image side in pixels"),
    "patch": Key(4, "patch side in pixels"),
    "channels": Key(3, "image channels"),
    "noise": Key(0.3, "pixel noise standard deviation"),
    "domain_shift": Key(0.5, "brightness offset of the target domain"),
    "class_drift": Key(0.3, "per-class drift of target prototypes"),
    "data_seed": Key(0, "dataset seed"),
    # backbone
    "layers": Key(4, "transformer blocks L", "reference recipe uses 12; desk-scale choice"),
    "dim": Key(32, "embedding width d"),
    "heads": Key(2, "attention heads"),
    "mlp_ratio": Key(2, "FFN width over d"),
    "prompt_length": Key(10, "prompt tokens per block", "reference recipe: default prompt length 10"),
    "shared_layers": Key(AUTO, "blocks K seeing only the shared prompt (auto = L/2)", "reference recipe: K=6 of 12", auto=True),
    "adapter_dim": Key(8, "adapter hidden width", "reference recipe: 8 for Places-LT"),
    "adapter_scale": Key(0.1, "adapter branch scale s"),
    "adapter_activation": Key("relu", "adapter nonlinearity", choices=("relu", "gelu")),
    "use_adapters": Key(True, "train adapters alongside the shared prompt"),
    "logit_scale": Key(16.0, "cosine classifier scale sigma"),
    # pool
    "pool_size": Key(20, "group prompts m", "reference recipe: m=20"),
    "top_k": Key(2, "matched prompts ensembled per input", "reference recipe: k=2"),
    # training
    "batch_size": Key(32, "batch size B per sampler"),
    "lr": Key(AUTO, "initial learning rate (auto = 0.002 * B / 256)", "reference recipe: 0.002 x B/256", auto=True),
    "warmup_epochs": Key(5, "linear warmup epochs", "reference recipe: 5 warmup epochs"),
    "weight_decay": Key(0.01, "weight decay", "reference recipe: 1e-2"),
    "momentum": Key(0.9, "SGD momentum", "reference recipe: 0.9"),
    "epochs": Key(40, "epochs E per phase", "reference recipe: E=40"),
    "seed": Key(0, "training seed (also expert 1 backbone seed)"),
    "phase1_mode": Key("prompt", "phase-1 trainables", choices=("prompt", "linear_probe")),
    "dual_sampling": Key(True, "add the instance-balanced batch each iteration"),
    "eta": Key(0.5, "initial instance-batch weight", "reference recipe: 0.5"),
    # pretraining
    "pretrain_epochs": Key(30, "backbone pretraining epochs"),
    "pretrain_lr": Key(0.05, "backbone pretraining learning rate"),
    "pretrain_batch_size": Key(32, "backbone pretraining batch size"),
    # loss
    "loss": Key("agcl", "classification loss", choices=("agcl", "gcl", "ce")),
    "gcl_alpha": Key(1.0, "logit adjustment scale alpha"),
    "lambda_plus": Key(0.0, "focusing parameter of the true class", "reference recipe: 0"),
    "lambda_minus": Key(4.0, "focusing parameter of negative classes", "reference recipe: 4"),
    "gcl_noise": Key(True, "draw |eps| per score in training"),
    "agcl_variant": Key("asl_corrected", "negative-class log term", choices=("asl_corrected", "paper_literal")),
    # moe
    "moe_hidden": Key(128, "scorer hidden width", "reference recipe: 2048; desk-scale choice"),
    "moe_epochs": Key(50, "scorer epochs", "reference recipe: 50"),
    "moe_lr": Key(0.01, "scorer learning rate", "reference recipe: 0.01"),
    "moe_momentum": Key(0.9, "scorer SGD momentum", "reference recipe: 0.9"),
    "moe_batch_size": Key(32, "scorer batch size"),
    "moe_epsilon": Key(0.001, "base-weight search threshold", "reference recipe: 1e-3"),
    "moe_seed": Key(0, "scorer seed"),
    # experts
    "expert": Key(1, "which expert the stage commands train (1 or 2)"),
    "expert2_seed": Key(1, "backbone and training seed of expert 2"),
    "expert2_dim": Key(48, "embedding width of expert 2"),
    "expert2_source_seed": Key(1, "source-domain rendering seed of expert 2"),
    # analysis
    "knn_k": Key(20, "neighbours of the K-NN probe"),
    "cluster_metric": Key("euclidean", "distance for cluster statistics", choices=("euclidean", "cosine")),
    # io
    "data_dir": Key("data", "dataset directory read by the training stages"),
    "eval_batch_size": Key(64, "batch size for scoring"),
}


def _key_line(text: str, key: str) -> int | None:
    pattern = re.compile(rf"^\s*{re.escape(key)}\s*=")
    for number, line in enumerate(text.splitlines(), start=1):
        if pattern.match(line):
            return number
    return None


def _check_value(name: str, value: Any, key: Key, line: int | None) -> Any:
    if key.auto and value == AUTO:
        return value
    expected = type(key.default) if not key.auto else (float if name == "lr" else int)
    if expected is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if isinstance(value, bool) != (expected is bool) or not isinstance(value, expected):
        raise ConfigError(f"{name} must be {expected.__name__}, got {value!r}", line=line)
    if key.choices is not None and value not in key.choices:
        raise ConfigError(f"{name} must be one of {', '.join(key.choices)}, got {value!r}", line=line)
    return value


class RunConfig:
    """Every registered key, defaults filled in."""

    def __init__(self, values: dict[str, Any] | None = None) -> None:
        self.values: dict[str, Any] = {name: key.default for name, key in KEYS.items()}
        for name, value in (values or {}).items():
            if name not in KEYS:
                raise ConfigError(f"unknown key {name!r}")
            self.values[name] = _check_value(name, value, KEYS[name], None)

    def __getattr__(self, name: str) -> Any:
        values = self.__dict__.get("values", {})
        if name in values:
            return values[name]
        raise AttributeError(name)

    @classmethod
    def load(cls, path: Path | None) -> "RunConfig":
        """Parse ``path``; ``None`` gives the defaults.

        Raises:
            ConfigError: Syntax errors, tables, unknown keys or bad values, with the line

        """
        if path is None:
            return cls()
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        try:
            document = tomllib.loads(text)
        except tomllib.TOMLDecodeError as e:
            found = re.search(r"line (\d+)", str(e))
            raise ConfigError(f"invalid TOML: {e}", line=int(found.group(1)) if found else None) from e

        values: dict[str, Any] = {}
        for name, value in document.items():
            line = _key_line(text, name)
            if isinstance(value, dict):
                raise ConfigError(f"tables are not supported ([{name}])", line=line)
            if name not in KEYS:
                raise ConfigError(f"unknown key {name!r}", line=line)
            values[name] = _check_value(name, value, KEYS[name], line)
        return cls(values)

    def with_values(self, **overrides: Any) -> "RunConfig":
        return RunConfig({**self.values, **overrides})

    @property
    def active_seed(self) -> int:
        return int(self.expert2_seed if self.expert == 2 else self.seed)

    def dataset_spec(self) -> DatasetSpec:
        return DatasetSpec(
            classes=self.classes,
            n_max=self.n_max,
            imbalance=self.imbalance,
            val_per_class=self.val_per_class,
            source_per_class=self.source_per_class,
            image=self.image,
            patch=self.patch,
            channels=self.channels,
            noise=self.noise,
            domain_shift=self.domain_shift,
            class_drift=self.class_drift,
            seed=self.data_seed,
        )

    def vit_config(self) -> ViTConfig:
        if self.expert not in (1, 2):
            raise ConfigError(f"expert must be 1 or 2, got {self.expert}")
        return ViTConfig(
            layers=self.layers,
            dim=self.expert2_dim if self.expert == 2 else self.dim,
            heads=self.heads,
            patch=self.patch,
            image=self.image,
            channels=self.channels,
            mlp_ratio=self.mlp_ratio,
            prompt_length=self.prompt_length,
            shared_layers=None if self.shared_layers == AUTO else self.shared_layers,
            adapter_dim=self.adapter_dim,
            adapter_scale=self.adapter_scale,
            adapter_activation=self.adapter_activation,
            logit_scale=self.logit_scale,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            batch_size=self.batch_size,
            lr=None if self.lr == AUTO else self.lr,
            warmup_epochs=self.warmup_epochs,
            weight_decay=self.weight_decay,
            momentum=self.momentum,
            epochs=self.epochs,
            seed=self.active_seed,
            eta=self.eta,
            dual_sampling=self.dual_sampling,
            phase1_mode=self.phase1_mode,
            use_adapters=self.use_adapters,
            pool_size=self.pool_size,
            top_k=self.top_k,
        )

    def pretrain_config(self) -> PretrainConfig:
        return PretrainConfig(
            epochs=self.pretrain_epochs,
            lr=self.pretrain_lr,
            batch_size=self.pretrain_batch_size,
            momentum=self.momentum,
            seed=self.active_seed,
        )

    def gcl_config(self) -> GclConfig:
        return GclConfig(
            alpha=self.gcl_alpha,
            lambda_plus=self.lambda_plus,
            lambda_minus=self.lambda_minus,
            noise_enabled=self.gcl_noise,
            formula_variant=self.agcl_variant,
            kind=self.loss,
        )

    def moe_config(self) -> MoEConfig:
        return MoEConfig(
            hidden=self.moe_hidden,
            epochs=self.moe_epochs,
            lr=self.moe_lr,
            momentum=self.moe_momentum,
            batch_size=self.moe_batch_size,
            epsilon=self.moe_epsilon,
            seed=self.moe_seed,
        )


def _toml_value(value: Any) -> str:
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, str):
        return f'"{value}"'
    if isinstance(value, float):
        return repr(value)
    return str(value)


def render_config(config: RunConfig | None = None) -> str:
    """Commented TOML document holding every key."""
    config = config or RunConfig()
    lines = ["# ltpeft run configuration", ""]
    for name, key in KEYS.items():
        lines.append(f"# {key.help} ({key.source})")
        lines.append(f"{name} = {_toml_value(config.values[name])}")
    return "\n".join(lines) + "\n"


def keys_help() -> str:
    """One line per key: name, default and source, for ``--help``."""
    return "\n\n".join(f"{name} = {_toml_value(key.default)}  ({key.source})" for name, key in KEYS.items())


def eval_threads() -> int:
    """Worker count for scoring from ``LTPEFT_THREADS`` (default 1).

    Raises:
        ConfigError: When the variable is not a positive integer

    """
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        threads = int(raw)
    except ValueError as e:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from e
    if threads < 1:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return threads
