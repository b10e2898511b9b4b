"""Phase-1 feature cache: one entry per sample, keyed by the phase-1 digest."""

from __future__ import annotations

import logging
from collections.abc import Sequence
from typing import TYPE_CHECKING

import numpy as np
from numpy.typing import NDArray

from .autodiff import Array
from .errors import CacheMissError

if TYPE_CHECKING:
    from .backbone import AdapterParams, BackboneParams, ViTConfig
    from .prompts import PromptState

logger = logging.getLogger(__name__)

# (c_K, z_K, query) of a single sample
Entry = tuple[Array, Array, Array]


class FeatureCache:
    """Tokens after block K and the phase-1 query for every primed sample.

    Entries built under one phase-1 digest are invisible under another, so
    a cache primed before phase-1 parameters changed can never be read back.
    """

    def __init__(self) -> None:
        self._entries: dict[tuple[str, int], Entry] = {}

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, key: tuple[str, int]) -> bool:
        return key in self._entries

    def put(
        self,
        digest: str,
        sample_ids: Sequence[int] | NDArray[np.int64],
        c_k: Array,
        z_k: Array,
        query: Array,
    ) -> None:
        for row, sample_id in enumerate(np.asarray(sample_ids, dtype=np.int64)):
            self._entries[(digest, int(sample_id))] = (c_k[row], z_k[row], query[row])

    def get(self, sample_ids: Sequence[int] | NDArray[np.int64], digest: str) -> tuple[Array, Array, Array]:
        """Stacked (c_K, z_K, query) rows for ``sample_ids``.

        Raises:
            CacheMissError: When any sample was not primed under ``digest``

        """
        ids = [int(i) for i in np.asarray(sample_ids, dtype=np.int64)]
        missing = [i for i in ids if (digest, i) not in self._entries]
        if missing:
            shown = ", ".join(str(i) for i in missing[:5])
            raise CacheMissError(f"no phase-1 feature cached for sample(s) {shown}")
        rows = [self._entries[(digest, i)] for i in ids]
        return (
            np.stack([r[0] for r in rows]),
            np.stack([r[1] for r in rows]),
            np.stack([r[2] for r in rows]),
        )

    def clear(self) -> None:
        self._entries.clear()


def prime_cache(
    cache: FeatureCache,
    images: Array,
    sample_ids: NDArray[np.int64],
    backbone: BackboneParams,
    cfg: ViTConfig,
    prompts: PromptState,
    adapters: AdapterParams | None,
    batch_size: int = 64,
) -> str:
    """Run the phase-1 pass over ``images`` once and store every sample.

    Returns:
        The phase-1 digest the entries were stored under

    """
    from .backbone import phase1_digest, phase1_features

    digest = phase1_digest(backbone, prompts, adapters)
    for start in range(0, len(sample_ids), batch_size):
        stop = start + batch_size
        c_k, z_k, query = phase1_features(images[start:stop], backbone, cfg, prompts, adapters)
        cache.put(digest, sample_ids[start:stop], c_k, z_k, query)
    logger.debug("Primed phase-1 cache", extra={"count": len(sample_ids)})
    return digest
