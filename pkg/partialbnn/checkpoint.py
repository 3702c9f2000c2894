"""PBNN checkpoint files.

Layout, integers little-endian:
  magic "PBNN" | u16 version | u32 metadata length | UTF-8 JSON metadata
  | u32 tensor count | per tensor: u32 name length, name, u8 dtype tag,
  u32 rank, u32 dims..., float32 payload
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .bayes_layer import PriorKind, PriorSpec
from .const import (
    CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
    DEFAULT_SEED,
    DTYPE_TAG_FLOAT32,
    RHO_INIT,
)
from .exceptions import (
    CheckpointShapeMismatch,
    CheckpointTruncated,
    CheckpointVersionMismatch,
    CheckpointWrongFormat,
)
from .model import ArchSpec, PartialBayesNet, PlacementConfig, build
from .nn_ops import Tensor

_LOGGER = logging.getLogger(__name__)

U8 = 1
U16 = 2
U32 = 4
FLOAT32_LE = np.dtype("<f4")


@dataclass
class CheckpointData:
    """Decoded checkpoint before it is bound to a model."""

    metadata: dict[str, Any]
    tensors: dict[str, Tensor] = field(default_factory=dict)

    @property
    def arch(self) -> ArchSpec:
        """Architecture."""
        return ArchSpec.from_dict(self.metadata["arch"])

    @property
    def placement(self) -> PlacementConfig:
        """Placement."""
        return PlacementConfig.of(*self.metadata["placement"])

    @property
    def prior(self) -> PriorSpec:
        """Prior."""
        prior = self.metadata.get("prior", {})
        return PriorSpec(
            kind=PriorKind(prior.get("kind", PriorKind.UNIT_GAUSSIAN)),
            sigma_p=float(prior.get("sigma_p", 1.0)),
        )


def encode_checkpoint(
    model: PartialBayesNet,
    seed: int = DEFAULT_SEED,
    step: int = 0,
    prior: PriorSpec | None = None,
) -> bytes:
    """Serialize model tensors and metadata."""
    prior = prior or PriorSpec()
    metadata = {
        "arch": model.arch.to_dict(),
        "placement": sorted(model.placement.bayesian_groups),
        "seed": seed,
        "step": step,
        "rho_init": model.rho_init,
        "prior": {"kind": str(prior.kind), "sigma_p": prior.sigma_p},
    }
    meta = json.dumps(metadata, sort_keys=True).encode("utf-8")
    tensors = model.named_tensors()
    out = bytearray(CHECKPOINT_MAGIC)
    out += CHECKPOINT_VERSION.to_bytes(U16, "little")
    out += len(meta).to_bytes(U32, "little")
    out += meta
    out += len(tensors).to_bytes(U32, "little")
    for name, tensor in tensors.items():
        raw_name = name.encode("utf-8")
        out += len(raw_name).to_bytes(U32, "little")
        out += raw_name
        out += DTYPE_TAG_FLOAT32.to_bytes(U8, "little")
        out += tensor.ndim.to_bytes(U32, "little")
        for dim in tensor.shape:
            out += int(dim).to_bytes(U32, "little")
        out += np.ascontiguousarray(tensor, dtype=FLOAT32_LE).tobytes()
    return bytes(out)


class _Reader:
    """Cursor over checkpoint bytes."""

    def __init__(self, data: bytes) -> None:
        """Initialize reader."""
        self._data = data
        self._pos = 0

    @property
    def remaining(self) -> int:
        """Unread byte count."""
        return len(self._data) - self._pos

    def take(self, size: int, what: str) -> bytes:
        """Consume size bytes."""
        if size < 0:
            raise CheckpointWrongFormat(f"{what}: negative size {size}")
        if size > self.remaining:
            raise CheckpointTruncated(
                f"{what}: need {size} bytes at offset {self._pos}, "
                f"{self.remaining} left",
            )
        chunk = self._data[self._pos : self._pos + size]
        self._pos += size
        return chunk

    def uint(self, size: int, what: str) -> int:
        """Consume an unsigned little-endian integer."""
        return int.from_bytes(self.take(size, what), "little")


def decode_checkpoint(data: bytes) -> CheckpointData:
    """Parse checkpoint bytes."""
    reader = _Reader(data)
    magic = reader.take(len(CHECKPOINT_MAGIC), "magic")
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointWrongFormat(f"bad magic {magic!r}")
    version = reader.uint(U16, "version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionMismatch(
            f"format version {version}, supported {CHECKPOINT_VERSION}",
        )
    meta_length = reader.uint(U32, "metadata length")
    try:
        metadata = json.loads(reader.take(meta_length, "metadata").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointWrongFormat(f"unreadable metadata: {e}") from e
    if not isinstance(metadata, dict):
        raise CheckpointWrongFormat("metadata is not an object")
    result = CheckpointData(metadata=metadata)
    for _ in range(reader.uint(U32, "tensor count")):
        name_length = reader.uint(U32, "name length")
        name = reader.take(name_length, "name").decode("utf-8", errors="replace")
        tag = reader.uint(U8, f"{name} dtype")
        if tag != DTYPE_TAG_FLOAT32:
            raise CheckpointWrongFormat(f"{name}: unknown dtype tag {tag}")
        rank = reader.uint(U32, f"{name} rank")
        shape = tuple(reader.uint(U32, f"{name} dims") for _ in range(rank))
        payload = reader.take(
            math.prod(shape) * FLOAT32_LE.itemsize,
            f"{name} payload",
        )
        result.tensors[name] = (
            np.frombuffer(payload, dtype=FLOAT32_LE).astype(np.float32).reshape(shape)
        )
    if reader.remaining:
        raise CheckpointWrongFormat(f"{reader.remaining} trailing bytes")
    return result


def bind_checkpoint(data: CheckpointData) -> PartialBayesNet:
    """Build the recorded architecture and copy every tensor into it."""
    try:
        model = build(
            data.arch,
            data.placement,
            np.random.default_rng(0),
            rho_init=float(data.metadata.get("rho_init", RHO_INIT)),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointWrongFormat(f"incomplete metadata: {e}") from e
    targets = model.named_tensors()
    if set(targets) != set(data.tensors):
        missing = sorted(set(targets) - set(data.tensors))
        extra = sorted(set(data.tensors) - set(targets))
        raise CheckpointShapeMismatch(f"missing tensors {missing}, unexpected {extra}")
    for name, target in targets.items():
        tensor = data.tensors[name]
        if tensor.shape != target.shape:
            raise CheckpointShapeMismatch(
                f"{name}: expected {target.shape}, got {tensor.shape}",
            )
        target[...] = tensor
    return model


def save_checkpoint(
    model: PartialBayesNet,
    path: Path | str,
    seed: int = DEFAULT_SEED,
    step: int = 0,
    prior: PriorSpec | None = None,
) -> None:
    """Write model to path."""
    Path(path).write_bytes(encode_checkpoint(model, seed=seed, step=step, prior=prior))
    _LOGGER.debug("[%s] Saved checkpoint at step %s", path, step)


def read_checkpoint(path: Path | str) -> CheckpointData:
    """Read and decode a checkpoint without building a model."""
    return decode_checkpoint(Path(path).read_bytes())


def load_checkpoint(path: Path | str) -> PartialBayesNet:
    """Rebuild the model stored at path."""
    return bind_checkpoint(read_checkpoint(path))
