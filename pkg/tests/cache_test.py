"""Tests for cache module (phase-1 feature cache)."""

import numpy as np
import pytest

from ltpeft.backbone import BackboneParams, ViTConfig, init_adapters, phase1_digest, phase1_features
from ltpeft.cache import FeatureCache, prime_cache
from ltpeft.errors import CacheMissError
from ltpeft.prompts import PromptState, init_prompts


@pytest.fixture
def cache() -> FeatureCache:
    return FeatureCache()


@pytest.fixture
def prompt_state(tiny_vit: ViTConfig) -> PromptState:
    shared, pool = init_prompts(tiny_vit, 1, pool_size=4)
    return PromptState(shared, pool)


def _rows(n: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    c_k = np.arange(n * 2, dtype=np.float64).reshape(n, 2)
    z_k = np.arange(n * 6, dtype=np.float64).reshape(n, 3, 2)
    query = -c_k
    return c_k, z_k, query


class TestFeatureCache:
    """Test FeatureCache put/get."""

    def test_round_order_follows_request(self, cache: FeatureCache) -> None:
        cache.put("d", [10, 11, 12], *_rows(3))
        c_k, z_k, query = cache.get([12, 10], "d")
        np.testing.assert_array_equal(c_k, [[4.0, 5.0], [0.0, 1.0]])
        assert z_k.shape == (2, 3, 2)
        np.testing.assert_array_equal(query, -c_k)

    def test_len_and_contains(self, cache: FeatureCache) -> None:
        cache.put("d", [1, 2], *_rows(2))
        assert len(cache) == 2
        assert ("d", 1) in cache
        assert ("other", 1) not in cache

    def test_miss(self, cache: FeatureCache) -> None:
        cache.put("d", [1], *_rows(1))
        with pytest.raises(CacheMissError, match="sample"):
            cache.get([1, 2], "d")

    def test_other_digest_is_invisible(self, cache: FeatureCache) -> None:
        cache.put("d1", [1], *_rows(1))
        with pytest.raises(CacheMissError):
            cache.get([1], "d2")

    def test_miss_is_key_error(self, cache: FeatureCache) -> None:
        with pytest.raises(KeyError):
            cache.get([0], "d")

    def test_clear(self, cache: FeatureCache) -> None:
        cache.put("d", [1, 2], *_rows(2))
        cache.clear()
        assert len(cache) == 0


class TestPrimeCache:
    """Test priming from the phase-1 pass."""

    def test_matches_direct_pass(
        self,
        cache: FeatureCache,
        tiny_vit: ViTConfig,
        frozen_backbone: BackboneParams,
        prompt_state: PromptState,
    ) -> None:
        images = np.random.default_rng(0).normal(size=(5, 8, 8, 3))
        ids = np.arange(100, 105, dtype=np.int64)
        adapters = init_adapters(tiny_vit, 2)
        stored = prime_cache(cache, images, ids, frozen_backbone, tiny_vit, prompt_state, adapters, batch_size=2)

        assert stored == phase1_digest(frozen_backbone, prompt_state, adapters)
        assert len(cache) == 5
        direct = phase1_features(images, frozen_backbone, tiny_vit, prompt_state, adapters)
        for cached, expected in zip(cache.get(ids, stored), direct, strict=True):
            np.testing.assert_allclose(cached, expected, rtol=1e-12, atol=1e-12)

    def test_digest_tracks_shared_prompt(
        self,
        cache: FeatureCache,
        tiny_vit: ViTConfig,
        frozen_backbone: BackboneParams,
        prompt_state: PromptState,
    ) -> None:
        images = np.zeros((1, 8, 8, 3))
        stored = prime_cache(cache, images, np.array([0]), frozen_backbone, tiny_vit, prompt_state, None)
        prompt_state.shared.tokens.data += 0.5
        assert phase1_digest(frozen_backbone, prompt_state, None) != stored
