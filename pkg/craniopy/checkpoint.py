"""Checkpoint files.

Layout::

    b"CKPT1\\n"
    one line of JSON: {"config": {...}, "tensors": [{"name", "shape"}, ...], "version": 1}
    float32 little-endian blobs, concatenated in header order
"""
import json
import logging
from pathlib import Path
from typing import Union

import numpy as np

from .errors import CheckpointError
from .models import ModelCheckpoint

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"CKPT1\n"
CHECKPOINT_VERSION = 1


def encode_checkpoint(checkpoint: ModelCheckpoint) -> bytes:
    entries = []
    blobs = []
    for name, tensor in checkpoint.tensors.items():
        array = np.asarray(tensor)
        if not np.all(np.isfinite(array)):
            raise CheckpointError(f"tensor {name!r} holds non-finite values")
        entries.append({"name": name, "shape": list(array.shape)})
        blobs.append(np.ascontiguousarray(array, dtype="<f4").tobytes())

    header = {"config": checkpoint.config, "tensors": entries, "version": checkpoint.version}
    line = json.dumps(header, sort_keys=True).encode("utf-8")
    return CHECKPOINT_MAGIC + line + b"\n" + b"".join(blobs)


def decode_checkpoint(blob: bytes) -> ModelCheckpoint:
    if not blob.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"bad magic {blob[:len(CHECKPOINT_MAGIC)]!r}, expected {CHECKPOINT_MAGIC!r}")
    end = blob.find(b"\n", len(CHECKPOINT_MAGIC))
    if end < 0:
        raise CheckpointError("truncated header")
    try:
        header = json.loads(blob[len(CHECKPOINT_MAGIC):end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"unreadable header: {e}") from e

    version = header.get("version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"version mismatch: file has {version!r}, expected {CHECKPOINT_VERSION}")

    tensors = {}
    offset = end + 1
    for entry in header.get("tensors", []):
        name, shape = entry["name"], tuple(int(s) for s in entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        if len(blob) - offset < count * 4:
            raise CheckpointError(
                f"truncated blob for {name!r}: header declares {count} values, "
                f"{(len(blob) - offset) // 4} remain"
            )
        values = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
        tensors[name] = values.reshape(shape).copy()
        offset += count * 4

    if offset != len(blob):
        raise CheckpointError(f"shape mismatch vs header: {len(blob) - offset} bytes beyond the declared tensors")
    return ModelCheckpoint(tensors=tensors, config=header.get("config", {}), version=version)


def save_checkpoint(checkpoint: ModelCheckpoint, path: Union[str, Path]) -> None:
    Path(path).write_bytes(encode_checkpoint(checkpoint))
    logger.info(f"Saved checkpoint with {len(checkpoint.tensors)} tensors to {path}")


def load_checkpoint(path: Union[str, Path]) -> ModelCheckpoint:
    try:
        blob = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    return decode_checkpoint(blob)
