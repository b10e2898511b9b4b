"""Tests for prompts module."""

import numpy as np
import pytest

from ltpeft.autodiff import Tensor, backward
from ltpeft.backbone import ViTConfig
from ltpeft.errors import ConfigError, ContractError, DegenerateError
from ltpeft.prompts import (
    GroupPromptPool,
    PromptState,
    ensemble_prompts,
    init_prompts,
    key_similarity,
    match_group_prompts,
    matched_keys,
    truncated_normal,
)


def make_pool(keys: list[list[float]], top_k: int = 1) -> GroupPromptPool:
    m = len(keys)
    prompts = np.arange(m * 1 * 1 * 2, dtype=np.float64).reshape(m, 1, 1, 2)
    return GroupPromptPool(Tensor(keys), Tensor(prompts, requires_grad=True), top_k=top_k)


class TestInit:
    """Test prompt initialisation."""

    def test_shapes(self, tiny_vit: ViTConfig) -> None:
        shared, pool = init_prompts(tiny_vit, 0, pool_size=5, top_k=2)
        assert shared.tokens.shape == (2, 2, 8)
        assert pool.prompts.shape == (5, 1, 2, 8)
        assert pool.keys.shape == (5, 8)
        assert pool.size == 5
        np.testing.assert_allclose(np.linalg.norm(pool.keys.data, axis=1), 1.0)

    def test_deterministic(self, tiny_vit: ViTConfig) -> None:
        a, _ = init_prompts(tiny_vit, 4)
        b, _ = init_prompts(tiny_vit, 4)
        np.testing.assert_array_equal(a.tokens.data, b.tokens.data)

    def test_truncation(self) -> None:
        draws = truncated_normal(np.random.default_rng(0), (2000,), std=0.02, bound=2.0)
        assert np.abs(draws).max() <= 0.04

    def test_top_k_range(self) -> None:
        with pytest.raises(ConfigError):
            make_pool([[1.0, 0.0]], top_k=2)

    def test_pool_size(self, tiny_vit: ViTConfig) -> None:
        with pytest.raises(ConfigError):
            init_prompts(tiny_vit, 0, pool_size=0)

    def test_state_tensors(self, tiny_vit: ViTConfig) -> None:
        shared, pool = init_prompts(tiny_vit, 0, pool_size=3)
        assert set(PromptState(shared).tensors()) == {"prompt.shared"}
        assert set(PromptState(shared, pool).tensors()) == {"prompt.shared", "pool.keys", "pool.prompts"}


class TestMatching:
    """Test key similarity and top-k matching."""

    def test_similarity_is_cosine(self) -> None:
        sims = key_similarity([2.0, 0.0], np.array([[1.0, 0.0], [1.0, 1.0]]))
        np.testing.assert_allclose(sims, [1.0, 1.0 / np.sqrt(2.0)])

    def test_best_first(self) -> None:
        pool = make_pool([[0.0, 1.0], [1.0, 0.0], [1.0, 1.0]])
        np.testing.assert_array_equal(match_group_prompts([1.0, 0.1], pool, 2), [1, 2])

    def test_ties_go_to_lower_index(self) -> None:
        pool = make_pool([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]])
        np.testing.assert_array_equal(match_group_prompts([1.0, 0.0], pool, 2), [0, 2])

    def test_batched_query(self) -> None:
        pool = make_pool([[1.0, 0.0], [0.0, 1.0]])
        matched = match_group_prompts(np.array([[1.0, 0.0], [0.0, 3.0]]), pool, 1)
        np.testing.assert_array_equal(matched, [[0], [1]])

    def test_zero_query(self) -> None:
        with pytest.raises(DegenerateError):
            match_group_prompts([0.0, 0.0], make_pool([[1.0, 0.0]]), 1)

    def test_zero_key(self) -> None:
        with pytest.raises(DegenerateError):
            key_similarity([1.0, 0.0], np.array([[0.0, 0.0]]))

    def test_k_out_of_range(self) -> None:
        with pytest.raises(ContractError):
            match_group_prompts([1.0, 0.0], make_pool([[1.0, 0.0]]), 2)


class TestEnsemble:
    """Test prompt averaging."""

    def test_mean_of_selected(self) -> None:
        pool = make_pool([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
        out = ensemble_prompts(pool, [0, 2])
        np.testing.assert_allclose(out.data, [[[2.0, 3.0]]])

    def test_gradient_reaches_selected_only(self) -> None:
        pool = make_pool([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
        backward(ensemble_prompts(pool, [[0, 2], [2, 2]]).sum())
        np.testing.assert_allclose(pool.prompts.grad[:, 0, 0, 0], [0.5, 0.0, 1.5])

    def test_empty_indices(self) -> None:
        with pytest.raises(ContractError):
            ensemble_prompts(make_pool([[1.0, 0.0]]), [])

    def test_out_of_range(self) -> None:
        with pytest.raises(ContractError):
            ensemble_prompts(make_pool([[1.0, 0.0]]), [1])

    def test_matched_keys(self) -> None:
        pool = make_pool([[1.0, 0.0], [0.0, 1.0]])
        np.testing.assert_array_equal(matched_keys(pool, [[1], [0]]).data, [[[0.0, 1.0]], [[1.0, 0.0]]])
