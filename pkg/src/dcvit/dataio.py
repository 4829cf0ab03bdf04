"""Bit-exact binary formats for datasets and model checkpoints.

Both formats are little-endian IEEE-754 with fixed layouts:

EEGDS dataset (magic "EEGD", version 1)
    u32 version, u64 n_samples, u32 n_channels, u32 n_timesteps,
    n_samples label records (x f32, y f32, orig_x f32, orig_y f32,
    participant u32, cluster u32 with 0xFFFFFFFF = unset), then the
    n*C*T f32 sample blob, row-major.

Checkpoint (magic "DCVT", version 1)
    u32 version, u32 config length + UTF-8 JSON config, then per tensor:
    u32 name length, name bytes, u32 rank, u32 dims[rank], f32 values;
    a CRC32 of everything before it closes the file.

Tensors are stored float32 on disk regardless of compute precision.
Writes go through a temp file + rename so readers never see partial files.
"""

from __future__ import annotations

import dataclasses
import json
import os
import struct
import zlib
from typing import Optional

import numpy as np

from .dataset import CLUSTER_UNSET, Dataset
from .model import Model, ModelConfig, parameter_spec
from .tensor import Tensor

__all__ = [
    "write_dataset", "read_dataset", "write_checkpoint", "read_checkpoint",
    "DataFormatError", "TruncatedFileError", "BadMagicError",
    "SizeMismatchError", "ChecksumError", "UnsupportedVersionError",
    "ShapeConflictError", "read_magic",
]

DATASET_MAGIC = b"EEGD"
CHECKPOINT_MAGIC = b"DCVT"
FORMAT_VERSION = 1
CLUSTER_UNSET_WIRE = 0xFFFFFFFF

_LABEL_DTYPE = np.dtype([
    ("x", "<f4"), ("y", "<f4"), ("orig_x", "<f4"), ("orig_y", "<f4"),
    ("participant", "<u4"), ("cluster", "<u4"),
])


class DataFormatError(Exception):
    """Malformed file content; ``offset`` is the failing byte position."""

    def __init__(self, message: str, offset: int = 0):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class TruncatedFileError(DataFormatError):
    pass


class BadMagicError(DataFormatError):
    pass


class SizeMismatchError(DataFormatError):
    pass


class ChecksumError(DataFormatError):
    pass


class UnsupportedVersionError(DataFormatError):
    pass


class ShapeConflictError(Exception):
    """Checkpoint tensors do not fit the expected model configuration."""


class _Cursor:
    """Bounds-checked little-endian reader over an in-memory buffer."""

    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedFileError(
                f"needed {n} more bytes, only {len(self.buf) - self.pos} left",
                self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def remaining(self) -> int:
        return len(self.buf) - self.pos


def _atomic_write(path: str, payload: bytes) -> None:
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def read_magic(path: str) -> bytes:
    """First four bytes of a file (for format sniffing)."""
    with open(path, "rb") as fh:
        return fh.read(4)


# ---------------------------------------------------------------- datasets

def write_dataset(path: str, dataset: Dataset) -> None:
    n = len(dataset)
    labels = np.empty(n, dtype=_LABEL_DTYPE)
    labels["x"] = dataset.x_px
    labels["y"] = dataset.y_px
    labels["orig_x"] = dataset.orig_x_px
    labels["orig_y"] = dataset.orig_y_px
    pid = dataset.participant_id
    if n and (pid.min() < 0 or pid.max() >= 2 ** 32):
        raise ValueError("participant ids must fit in u32")
    labels["participant"] = pid.astype(np.uint32)
    cid = dataset.cluster_id.copy()
    if n and cid[cid != CLUSTER_UNSET].size and (
            cid[cid != CLUSTER_UNSET].min() < 0
            or cid[cid != CLUSTER_UNSET].max() >= CLUSTER_UNSET_WIRE):
        raise ValueError("cluster ids must fit in u32 below the unset mark")
    wire_cid = np.where(cid == CLUSTER_UNSET, CLUSTER_UNSET_WIRE, cid)
    labels["cluster"] = wire_cid.astype(np.uint32)

    header = DATASET_MAGIC + struct.pack(
        "<IQII", FORMAT_VERSION, n, dataset.n_channels, dataset.n_timesteps)
    blob = np.ascontiguousarray(dataset.eeg, dtype="<f4").tobytes()
    _atomic_write(path, header + labels.tobytes() + blob)


def read_dataset(path: str) -> Dataset:
    with open(path, "rb") as fh:
        buf = fh.read()
    cur = _Cursor(buf)
    magic = cur.take(4)
    if magic != DATASET_MAGIC:
        raise BadMagicError(f"expected magic {DATASET_MAGIC!r}, got {magic!r}", 0)
    version = cur.u32()
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"unsupported dataset version {version}", 4)
    n = cur.u64()
    c = cur.u32()
    t = cur.u32()
    expected = 24 + n * _LABEL_DTYPE.itemsize + n * c * t * 4
    if len(buf) != expected:
        raise SizeMismatchError(
            f"expected {expected} bytes for {n} samples of {c}x{t}, "
            f"file has {len(buf)}", len(buf))
    labels = np.frombuffer(cur.take(n * _LABEL_DTYPE.itemsize), dtype=_LABEL_DTYPE)
    eeg = np.frombuffer(cur.take(n * c * t * 4), dtype="<f4").reshape(n, c, t)
    cid = labels["cluster"].astype(np.int64)
    cid[cid == CLUSTER_UNSET_WIRE] = CLUSTER_UNSET
    return Dataset(
        eeg=eeg.copy(),
        x_px=labels["x"].copy(),
        y_px=labels["y"].copy(),
        orig_x_px=labels["orig_x"].copy(),
        orig_y_px=labels["orig_y"].copy(),
        participant_id=labels["participant"].astype(np.int64),
        cluster_id=cid,
    )


# ---------------------------------------------------------------- checkpoints

def write_checkpoint(path: str, model: Model) -> None:
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", FORMAT_VERSION)]
    config_json = json.dumps(
        dataclasses.asdict(model.config), sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<I", len(config_json)))
    parts.append(config_json)
    for name, tensor in model.named_tensors():
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        shape = tensor.shape
        parts.append(struct.pack("<I", len(shape)))
        parts.append(struct.pack(f"<{len(shape)}I", *shape))
        parts.append(np.ascontiguousarray(tensor.data, dtype="<f4").tobytes())
    payload = b"".join(parts)
    _atomic_write(path, payload + struct.pack("<I", zlib.crc32(payload)))


def _is_buffer(name: str) -> bool:
    return name.endswith((".running_mean", ".running_var"))


def read_checkpoint(path: str,
                    expected_config: Optional[ModelConfig] = None) -> Model:
    """Load a checkpoint, verifying the CRC before touching any payload.

    With ``expected_config`` set, the stored tensors must match that
    config's parameter layout name-for-name and shape-for-shape.
    """
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 12:
        raise TruncatedFileError(
            f"file of {len(buf)} bytes is too short for a checkpoint", 0)
    payload, stored_crc = buf[:-4], struct.unpack("<I", buf[-4:])[0]
    actual_crc = zlib.crc32(payload)
    if actual_crc != stored_crc:
        raise ChecksumError(
            f"CRC mismatch: stored {stored_crc:#010x}, computed {actual_crc:#010x}",
            len(payload))
    cur = _Cursor(payload)
    magic = cur.take(4)
    if magic != CHECKPOINT_MAGIC:
        raise BadMagicError(
            f"expected magic {CHECKPOINT_MAGIC!r}, got {magic!r}", 0)
    version = cur.u32()
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"unsupported checkpoint version {version}", 4)
    config_len = cur.u32()
    config_raw = cur.take(config_len)
    try:
        config = ModelConfig(**json.loads(config_raw.decode("utf-8")))
    except (ValueError, TypeError) as exc:
        raise DataFormatError(f"bad embedded config: {exc}", 12) from exc

    model = Model(config=config)
    while cur.remaining():
        at = cur.pos
        name = cur.take(cur.u32()).decode("utf-8")
        rank = cur.u32()
        dims = struct.unpack(f"<{rank}I", cur.take(4 * rank))
        count = int(np.prod(dims)) if rank else 1
        values = np.frombuffer(cur.take(4 * count), dtype="<f4").reshape(dims)
        if name in model.params or name in model.buffers:
            raise DataFormatError(f"duplicate tensor name {name!r}", at)
        tensor = Tensor(values.copy(), requires_grad=not _is_buffer(name))
        (model.buffers if _is_buffer(name) else model.params)[name] = tensor

    if expected_config is not None:
        expected = parameter_spec(expected_config)
        stored = {name: t.shape for name, t in model.named_tensors()}
        for name, (shape, _, _) in expected.items():
            if name not in stored:
                raise ShapeConflictError(f"missing parameter {name!r}")
            if stored[name] != shape:
                raise ShapeConflictError(
                    f"parameter {name!r} has shape {stored[name]}, "
                    f"expected {shape}")
        for name in stored:
            if name not in expected:
                raise ShapeConflictError(f"unexpected parameter {name!r}")
    return model
