"""
Versioned little-endian checkpoint files.

Layout::

    magic   b"DWVT"
    u32     version
    u32     header length, then the header as UTF-8 JSON
            {"model": <ModelConfig>, "normalization": {"mean": [...], "std": [...]} | null}
    u32     tensor count
    per tensor:
        u16 name length, name (UTF-8)
        u8  rank, u32 x rank dims
        raw float32 values, row-major

Parameters and BatchNorm running statistics are stored in the model's walk
order.
"""

import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import numpy as np
from pydantic import ValidationError

from dwvit.config import ModelConfig
from dwvit.errors import CheckpointError
from dwvit.model import Model, build_model

logger = logging.getLogger(__name__)

MAGIC = b"DWVT"
VERSION = 1

Normalization = Tuple[Tuple[float, ...], Tuple[float, ...]]


@dataclass
class Checkpoint:
    model: Model
    normalization: Optional[Normalization] = None


def save_checkpoint(
    model: Model,
    path: Union[str, Path],
    normalization: Optional[Normalization] = None,
) -> Path:
    path = Path(path)
    header = {
        "model": model.config.model_dump(mode="json"),
        "normalization": (
            {"mean": list(normalization[0]), "std": list(normalization[1])}
            if normalization is not None
            else None
        ),
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    state = model.state_dict()

    chunks = [MAGIC, struct.pack("<II", VERSION, len(header_bytes)), header_bytes]
    chunks.append(struct.pack("<I", len(state)))
    for name, array in state.items():
        name_bytes = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(name_bytes)))
        chunks.append(name_bytes)
        chunks.append(struct.pack(f"<B{array.ndim}I", array.ndim, *array.shape))
        chunks.append(np.ascontiguousarray(array, dtype="<f4").tobytes())

    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)
    logger.debug(f"saved {len(state)} tensors to {path}")
    return path


class _Reader:
    def __init__(self, buffer: bytes, path: Path):
        self.buffer = buffer
        self.offset = 0
        self.path = path

    def take(self, count: int) -> bytes:
        end = self.offset + count
        if end > len(self.buffer):
            raise CheckpointError(f"{self.path}: truncated at byte {self.offset}")
        chunk = self.buffer[self.offset : end]
        self.offset = end
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _read(path: Path) -> Tuple[dict, Dict[str, np.ndarray]]:
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    reader = _Reader(path.read_bytes(), path)
    if reader.take(4) != MAGIC:
        raise CheckpointError(f"{path}: not a dwvit checkpoint")
    version, header_length = reader.unpack("<II")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(reader.take(header_length).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: unreadable header: {e}")
    if not isinstance(header, dict):
        raise CheckpointError(f"{path}: header is not a JSON object")

    (count,) = reader.unpack("<I")
    state = {}
    for _ in range(count):
        (name_length,) = reader.unpack("<H")
        try:
            name = reader.take(name_length).decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError(
                f"{path}: tensor name at byte {reader.offset - name_length} is not UTF-8"
            )
        (rank,) = reader.unpack("<B")
        shape = reader.unpack(f"<{rank}I")
        size = int(np.prod(shape, dtype=np.int64))
        values = np.frombuffer(reader.take(4 * size), dtype="<f4")
        state[name] = values.reshape(shape).astype(np.float32)
    if reader.offset != len(reader.buffer):
        raise CheckpointError(f"{path}: {len(reader.buffer) - reader.offset} trailing bytes")
    return header, state


def _mismatched_fields(saved: ModelConfig, expected: ModelConfig) -> Dict[str, tuple]:
    saved_fields = saved.model_dump()
    expected_fields = expected.model_dump()
    return {
        key: (saved_fields[key], expected_fields[key])
        for key in expected_fields
        if saved_fields.get(key) != expected_fields[key]
    }


def read_checkpoint(
    path: Union[str, Path], expected: Optional[ModelConfig] = None
) -> Checkpoint:
    """
    Rebuild the saved model. Nothing is constructed until the whole file has
    been parsed, so a damaged file never yields a partial model.
    """
    path = Path(path)
    header, state = _read(path)
    try:
        config = ModelConfig.model_validate(header["model"])
    except (KeyError, ValidationError) as e:
        raise CheckpointError(f"{path}: invalid model config: {e}")
    if expected is not None:
        mismatched = _mismatched_fields(config, expected)
        if mismatched:
            details = ", ".join(
                f"{key} (checkpoint {saved!r}, expected {wanted!r})"
                for key, (saved, wanted) in mismatched.items()
            )
            raise CheckpointError(f"{path}: config mismatch in {details}")

    normalization = header.get("normalization")
    if normalization is not None:
        try:
            normalization = (tuple(normalization["mean"]), tuple(normalization["std"]))
        except (KeyError, TypeError) as e:
            raise CheckpointError(f"{path}: invalid normalization: {e!r}")

    model = build_model(config)
    model.load_state_dict(state)
    logger.debug(f"loaded {len(state)} tensors from {path}")
    return Checkpoint(model, normalization)


def load_checkpoint(path: Union[str, Path], expected: Optional[ModelConfig] = None) -> Model:
    return read_checkpoint(path, expected).model
