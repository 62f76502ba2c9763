"""
ICF1 binary checkpoint codec.

Layout (all integers little-endian):

    b"ICF1"  u32 version  u64 tensor_count
    per tensor: u32 name_len, name (UTF-8), u32 rank, u64 dims[rank], f64 data[prod(dims)]
    u64 optimizer_tensor_count, optimizer tensors in the same per-tensor layout
    u32 name_len, b"meta", u64 meta_len, meta JSON (UTF-8, sorted keys)

The meta block carries the config snapshot, step counter, RNG states, env
states and optimizer scalars. Decoding then encoding yields identical bytes.
"""

import json
import math
import os
import struct
import sys
from dataclasses import dataclass, field
from typing import Any, Dict, Tuple

import numpy as np

# Add parent directory to path to import config.py from project root
parent_dir = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
if parent_dir not in sys.path:
    sys.path.insert(0, parent_dir)

from errors import CheckpointVersionError, CorruptCheckpointError
from storage import atomic_write_bytes

MAGIC = b"ICF1"
FORMAT_VERSION = 1


@dataclass
class CheckpointData:
    tensors: Dict[str, np.ndarray] = field(default_factory=dict)
    optimizer: Dict[str, np.ndarray] = field(default_factory=dict)
    meta: Dict[str, Any] = field(default_factory=dict)


def _encode_tensor(name: str, array: np.ndarray) -> bytes:
    array = np.asarray(array, dtype="<f8")
    raw_name = name.encode("utf-8")
    parts = [struct.pack("<I", len(raw_name)), raw_name, struct.pack("<I", array.ndim)]
    parts.append(struct.pack(f"<{array.ndim}Q", *array.shape))
    parts.append(np.ascontiguousarray(array).tobytes())
    return b"".join(parts)


def _encode_block(tensors: Dict[str, np.ndarray]) -> bytes:
    return struct.pack("<Q", len(tensors)) + b"".join(_encode_tensor(n, a) for n, a in tensors.items())


def encode_checkpoint(data: CheckpointData) -> bytes:
    meta = json.dumps(data.meta, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")
    return b"".join([
        MAGIC,
        struct.pack("<I", FORMAT_VERSION),
        _encode_block(data.tensors),
        _encode_block(data.optimizer),
        struct.pack("<I", 4), b"meta", struct.pack("<Q", len(meta)), meta,
    ])


class _Reader:
    def __init__(self, payload: bytes):
        self.payload = payload
        self.offset = 0

    def take(self, n: int, what: str) -> bytes:
        if n < 0 or self.offset + n > len(self.payload):
            raise CorruptCheckpointError(
                f"checkpoint truncated while reading {what} at byte {self.offset} "
                f"(need {n}, have {len(self.payload) - self.offset})"
            )
        chunk = self.payload[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt: str, what: str) -> Tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def tensor(self) -> Tuple[str, np.ndarray]:
        (name_len,) = self.unpack("<I", "tensor name length")
        try:
            name = self.take(name_len, "tensor name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CorruptCheckpointError(f"tensor name is not UTF-8 at byte {self.offset}") from exc
        (rank,) = self.unpack("<I", f"rank of '{name}'")
        dims = self.unpack(f"<{rank}Q", f"dims of '{name}'")
        count = math.prod(dims)
        raw = self.take(8 * count, f"data of '{name}'")
        return name, np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(dims)

    def block(self, what: str) -> Dict[str, np.ndarray]:
        (count,) = self.unpack("<Q", f"{what} count")
        out: Dict[str, np.ndarray] = {}
        for _ in range(count):
            name, array = self.tensor()
            out[name] = array
        return out


def decode_checkpoint(payload: bytes) -> CheckpointData:
    reader = _Reader(payload)
    if reader.take(4, "magic") != MAGIC:
        raise CorruptCheckpointError("not an ICF1 checkpoint (bad magic)")
    (version,) = reader.unpack("<I", "version")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"checkpoint format version {version} is not supported (expected {FORMAT_VERSION})")
    tensors = reader.block("tensor")
    optimizer = reader.block("optimizer tensor")
    (name_len,) = reader.unpack("<I", "meta block name length")
    if reader.take(name_len, "meta block name") != b"meta":
        raise CorruptCheckpointError("missing meta block")
    (meta_len,) = reader.unpack("<Q", "meta length")
    try:
        meta = json.loads(reader.take(meta_len, "meta JSON").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(f"meta block is not valid JSON: {exc}") from exc
    if reader.offset != len(payload):
        raise CorruptCheckpointError(f"{len(payload) - reader.offset} trailing bytes after meta block")
    return CheckpointData(tensors=tensors, optimizer=optimizer, meta=meta)


def save_checkpoint(path: str, data: CheckpointData) -> str:
    atomic_write_bytes(path, encode_checkpoint(data))
    return path


def load_checkpoint(path: str) -> CheckpointData:
    if not os.path.exists(path):
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with open(path, "rb") as f:
        return decode_checkpoint(f.read())
