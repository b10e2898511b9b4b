"""Shared fixtures: a tiny transformer and a tiny long-tailed benchmark."""

import pytest

from ltpeft.backbone import BackboneParams, ViTConfig, init_backbone
from ltpeft.data import Benchmark, DatasetSpec, generate_dataset


@pytest.fixture
def tiny_vit() -> ViTConfig:
    """Two blocks, width 8, 4 patches per image."""
    return ViTConfig(
        layers=2,
        dim=8,
        heads=2,
        patch=4,
        image=8,
        channels=3,
        mlp_ratio=2,
        prompt_length=2,
        adapter_dim=4,
    )


@pytest.fixture
def tiny_spec() -> DatasetSpec:
    return DatasetSpec(
        classes=4,
        n_max=12,
        imbalance=6.0,
        val_per_class=3,
        source_per_class=6,
        image=8,
        patch=4,
        channels=3,
        seed=3,
    )


@pytest.fixture
def tiny_benchmark(tiny_spec: DatasetSpec) -> Benchmark:
    return generate_dataset(tiny_spec)


@pytest.fixture
def frozen_backbone(tiny_vit: ViTConfig) -> BackboneParams:
    return init_backbone(tiny_vit, seed=7).freeze()
