"""Self-describing checkpoint container.

Layout (all integers little-endian)::

    8 bytes   magic  b"HYDRODIF"
    uint32    format version
    uint64    header length N
    N bytes   UTF-8 JSON header (kind, run config, normalization stats,
              parameter, optimizer and last-epoch tensor names/shapes,
              step, epoch, selected epoch, best validation loss)
    ...       every parameter, then every optimizer tensor, then the
              last-epoch weights if any, as '<f8' in header order

The header holds no timestamps, so identical training runs produce
identical files.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch
from pydantic import BaseModel, Field, ValidationError
from torch import nn

from hydrodiffusion.config import torch_dtype
from hydrodiffusion.data import NormStats, atomic_write_bytes
from hydrodiffusion.errors import CheckpointError
from hydrodiffusion.models import ModelKind, RunConfig
from hydrodiffusion.registry import build_model

logger = logging.getLogger(__name__)

MAGIC = b"HYDRODIF"
FORMAT_VERSION = 1
_PREAMBLE = struct.Struct("<8sIQ")
_ITEM = np.dtype("<f8")


class TensorEntry(BaseModel):
    name: str
    shape: list[int]

    @property
    def size(self) -> int:
        return math.prod(self.shape)


class CheckpointHeader(BaseModel):
    kind: ModelKind
    config: dict[str, Any] = Field(description="RunConfig the model was trained with.")
    norm_stats: dict[str, Any]
    parameters: list[TensorEntry]
    optimizer: list[TensorEntry] = Field(default_factory=list)
    step: int = 0
    epoch: int = 0
    selected_epoch: int = 0
    best_val: float | None = Field(default=None, description="Best validation loss so far; None when unset.")
    last_parameters: list[TensorEntry] = Field(
        default_factory=list, description="Last-epoch weights when they differ from the stored ones."
    )


@dataclass
class LoadedCheckpoint:
    kind: ModelKind
    config: RunConfig
    model: nn.Module
    norm_stats: NormStats
    step: int
    epoch: int
    optimizer_state: dict[str, torch.Tensor] = field(default_factory=dict)
    last_state: dict[str, torch.Tensor] = field(default_factory=dict)
    best_val: float = math.inf
    selected_epoch: int = 0


def _to_bytes(tensor: torch.Tensor) -> bytes:
    return np.ascontiguousarray(tensor.detach().cpu().numpy(), dtype=_ITEM).tobytes()


def save_checkpoint(
    path: str | Path,
    model: nn.Module,
    kind: ModelKind,
    config: RunConfig,
    norm_stats: NormStats,
    step: int = 0,
    epoch: int = 0,
    optimizer_state: dict[str, torch.Tensor] | None = None,
    last_state: dict[str, torch.Tensor] | None = None,
    best_val: float = math.inf,
    selected_epoch: int = 0,
) -> None:
    """Serialize parameters to ``path`` atomically.

    ``optimizer_state``, ``last_state`` (last-epoch weights of a run that
    keeps an earlier epoch), ``best_val`` and ``selected_epoch`` are only
    needed to resume training.
    """
    params = list(model.state_dict().items())
    optimizer_state = optimizer_state or {}
    last_state = last_state or {}
    header = CheckpointHeader(
        kind=kind,
        config=config.model_dump(mode="json"),
        norm_stats=norm_stats.to_dict(),
        parameters=[TensorEntry(name=n, shape=list(t.shape)) for n, t in params],
        optimizer=[TensorEntry(name=n, shape=list(t.shape)) for n, t in optimizer_state.items()],
        step=step,
        epoch=epoch,
        selected_epoch=selected_epoch,
        best_val=best_val if math.isfinite(best_val) else None,
        last_parameters=[TensorEntry(name=n, shape=list(t.shape)) for n, t in last_state.items()],
    )
    header_bytes = json.dumps(header.model_dump(mode="json"), sort_keys=True).encode("utf-8")
    chunks = [_PREAMBLE.pack(MAGIC, FORMAT_VERSION, len(header_bytes)), header_bytes]
    chunks.extend(_to_bytes(t) for _, t in params)
    chunks.extend(_to_bytes(t) for t in optimizer_state.values())
    chunks.extend(_to_bytes(t) for t in last_state.values())
    atomic_write_bytes(Path(path), b"".join(chunks))
    logger.info("[checkpoint] wrote %s (%s, step %d, epoch %d)", path, ModelKind(kind).value, step, epoch)


def read_header(payload: bytes, source: str = "checkpoint") -> tuple[CheckpointHeader, int]:
    """Parse the preamble and JSON header; returns the header and data offset."""
    if len(payload) < _PREAMBLE.size:
        raise CheckpointError(f"{source}: truncated before header")
    magic, version, header_len = _PREAMBLE.unpack_from(payload)
    if magic != MAGIC:
        raise CheckpointError(f"{source}: not a checkpoint (bad magic {magic!r})")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{source}: unsupported format version {version}")
    start = _PREAMBLE.size
    if len(payload) < start + header_len:
        raise CheckpointError(f"{source}: truncated inside header")
    try:
        header = CheckpointHeader.model_validate_json(payload[start : start + header_len])
    except ValidationError as exc:
        raise CheckpointError(f"{source}: corrupt header: {exc}") from exc
    return header, start + header_len


def _read_tensors(
    payload: bytes, entries: list[TensorEntry], offset: int, source: str
) -> tuple[dict[str, torch.Tensor], int]:
    tensors = {}
    for entry in entries:
        end = offset + entry.size * _ITEM.itemsize
        if end > len(payload):
            raise CheckpointError(f"{source}: truncated in tensor {entry.name}")
        values = np.frombuffer(payload, dtype=_ITEM, count=entry.size, offset=offset)
        tensors[entry.name] = torch.from_numpy(values.copy().reshape(entry.shape))
        offset = end
    return tensors, offset


def load_checkpoint(path: str | Path, expected_kind: ModelKind | None = None) -> LoadedCheckpoint:
    """Rebuild the model stored in ``path``.

    Raises:
        CheckpointError: bad magic or version, truncation, trailing bytes,
            parameter mismatch, or a kind other than ``expected_kind``.
    """
    path = Path(path)
    payload = path.read_bytes()
    header, offset = read_header(payload, str(path))
    if expected_kind is not None and header.kind != ModelKind(expected_kind):
        raise CheckpointError(
            f"{path}: holds a {header.kind.value} model, expected {ModelKind(expected_kind).value}"
        )
    params, offset = _read_tensors(payload, header.parameters, offset, str(path))
    optimizer_state, offset = _read_tensors(payload, header.optimizer, offset, str(path))
    last_state, offset = _read_tensors(payload, header.last_parameters, offset, str(path))
    if offset != len(payload):
        raise CheckpointError(f"{path}: {len(payload) - offset} unexpected trailing bytes")

    try:
        config = RunConfig.model_validate(header.config)
    except ValidationError as exc:
        raise CheckpointError(f"{path}: stored config is invalid: {exc}") from exc
    model = build_model(
        header.kind, config.model, config.seed, dropout=config.train.dropout, dtype=torch_dtype(config)
    )
    state = model.state_dict()
    if set(state) != set(params):
        raise CheckpointError(f"{path}: parameter names do not match a {header.kind.value} model")
    for name, tensor in params.items():
        if tuple(state[name].shape) != tuple(tensor.shape):
            raise CheckpointError(f"{path}: shape mismatch for {name}")
        params[name] = tensor.to(state[name].dtype)
    model.load_state_dict(params)
    model.eval()
    if last_state and set(last_state) != set(state):
        raise CheckpointError(f"{path}: last-epoch parameter names do not match the model")
    last_state = {name: tensor.to(state[name].dtype) for name, tensor in last_state.items()}
    return LoadedCheckpoint(
        kind=header.kind,
        config=config,
        model=model,
        norm_stats=NormStats.from_dict(header.norm_stats),
        step=header.step,
        epoch=header.epoch,
        optimizer_state=optimizer_state,
        last_state=last_state,
        best_val=math.inf if header.best_val is None else header.best_val,
        selected_epoch=header.selected_epoch,
    )
