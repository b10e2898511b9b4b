"""Versioned binary checkpoints.

Layout: ``LTCK`` magic, u32 format version, u32 header length, canonical
JSON header, little-endian float64 payload (tensors in sorted name order)
and a SHA-256 trailer over everything before it.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .autodiff import Array
from .errors import CheckpointError
from .version import __version__, is_compatible

logger = logging.getLogger(__name__)

MAGIC = b"LTCK"
FORMAT_VERSION = 1
TRAILER = 32
STAGES = ("backbone", "phase1", "phase2", "joint", "moe")


def checkpoint_name(stage: str) -> str:
    return f"{stage}.ltck"


@dataclass
class Checkpoint:
    """Named float64 tensors plus a JSON-serialisable ``meta`` dict."""

    stage: str
    tensors: dict[str, Array] = field(default_factory=dict)
    meta: dict[str, Any] = field(default_factory=dict)
    producer: str = __version__

    @property
    def backbone_digest(self) -> str | None:
        value = self.meta.get("backbone_digest")
        return str(value) if value is not None else None

    def header(self) -> dict[str, Any]:
        return {
            "stage": self.stage,
            "producer": self.producer,
            "meta": self.meta,
            "tensors": [[name, list(np.shape(self.tensors[name]))] for name in sorted(self.tensors)],
        }

    def to_bytes(self) -> bytes:
        try:
            header = json.dumps(self.header(), sort_keys=True, separators=(",", ":"), allow_nan=False)
        except (TypeError, ValueError) as e:
            raise CheckpointError(f"checkpoint metadata is not serialisable: {e}") from e
        encoded = header.encode("utf-8")
        parts = [
            MAGIC,
            np.array([FORMAT_VERSION, len(encoded)], dtype="<u4").tobytes(),
            encoded,
        ]
        parts.extend(np.ascontiguousarray(self.tensors[name], dtype="<f8").tobytes() for name in sorted(self.tensors))
        body = b"".join(parts)
        return body + hashlib.sha256(body).digest()

    @classmethod
    def from_bytes(cls, raw: bytes, source: str = "checkpoint") -> Checkpoint:
        if len(raw) < 12 + TRAILER or raw[:4] != MAGIC:
            raise CheckpointError(f"{source}: not a checkpoint file")
        body, trailer = raw[:-TRAILER], raw[-TRAILER:]
        if hashlib.sha256(body).digest() != trailer:
            raise CheckpointError(f"{source}: checksum mismatch, file is corrupt")
        version, length = (int(v) for v in np.frombuffer(raw, dtype="<u4", count=2, offset=4))
        if version != FORMAT_VERSION:
            raise CheckpointError(f"{source}: unsupported checkpoint version {version}")
        try:
            header = json.loads(body[12 : 12 + length].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointError(f"{source}: unreadable header: {e}") from e

        tensors: dict[str, Array] = {}
        offset = 12 + length
        for name, shape in header["tensors"]:
            count = int(np.prod(shape, dtype=np.int64))
            if offset + 8 * count > len(body):
                raise CheckpointError(f"{source}: payload shorter than header claims")
            tensors[name] = np.frombuffer(body, dtype="<f8", count=count, offset=offset).reshape(shape).astype(np.float64)
            offset += 8 * count
        if offset != len(body):
            raise CheckpointError(f"{source}: payload longer than header claims")
        return cls(header["stage"], tensors, header["meta"], header["producer"])


def save_checkpoint(ckpt: Checkpoint, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(ckpt.to_bytes())
    logger.info(f"Saved {ckpt.stage} checkpoint to {path}", extra={"operation": "save", "count": len(ckpt.tensors)})
    return path


def load_checkpoint(path: Path, backbone_digest: str | None = None, stage: str | None = None) -> Checkpoint:
    """Read and verify a checkpoint.

    Args:
        path: Checkpoint file
        backbone_digest: Digest the checkpoint must have been trained against
        stage: Expected stage tag

    Raises:
        CheckpointError: Corrupt file, wrong stage or backbone mismatch

    """
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read {path}: {e}") from e
    ckpt = Checkpoint.from_bytes(raw, source=str(path))

    if stage is not None and ckpt.stage != stage:
        raise CheckpointError(f"{path} holds a {ckpt.stage} checkpoint, expected {stage}")
    if backbone_digest is not None and ckpt.backbone_digest != backbone_digest:
        raise CheckpointError(f"{path} was trained against a different backbone")
    if not is_compatible(ckpt.producer):
        logger.warning(f"{path} was written by ltpeft {ckpt.producer}, running {__version__}")
    return ckpt
