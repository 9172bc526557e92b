"""
Checkpoint: MAUD flat binary container for named arrays.

Layout (all integers little-endian):
    b"MAUD" | u32 version | u64 record count
    per record: u32 name length | name (UTF-8) | u8 dtype tag | u32 rank |
                u64 dims[rank] | raw values (little-endian)

Contract: nn-core v1.0.0
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping, Union

import numpy as np

from .errors import FormatError
from .store import atomic_write_bytes

MAGIC = b"MAUD"
VERSION = 1

DTYPE_TAGS: dict[int, np.dtype] = {
    0: np.dtype("<f4"),
    1: np.dtype("<f8"),
    2: np.dtype("<i8"),
    3: np.dtype("u1"),
    4: np.dtype("<u8"),
    5: np.dtype("<i4"),
}
_TAG_BY_KIND = {(dt.kind, dt.itemsize): tag for tag, dt in DTYPE_TAGS.items()}


def _tag_for(arr: np.ndarray) -> int:
    key = (arr.dtype.kind, arr.dtype.itemsize)
    if arr.dtype.kind == "b":
        key = ("u", 1)
    if key not in _TAG_BY_KIND:
        raise FormatError(f"unsupported dtype for checkpoint: {arr.dtype}")
    return _TAG_BY_KIND[key]


def dumps(arrays: Mapping[str, np.ndarray]) -> bytes:
    """Serialise arrays in mapping order."""
    parts = [MAGIC, struct.pack("<IQ", VERSION, len(arrays))]
    for name, value in arrays.items():
        arr = np.asarray(value)
        tag = _tag_for(arr)
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<BI", tag, arr.ndim))
        if arr.ndim:
            parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=DTYPE_TAGS[tag]).tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated checkpoint at byte {self.pos} (need {n} more)")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def loads(data: bytes) -> dict[str, np.ndarray]:
    reader = _Reader(data)
    if reader.take(4) != MAGIC:
        raise FormatError("bad magic: not a MAUD checkpoint")
    version, count = reader.unpack("<IQ")
    if version != VERSION:
        raise FormatError(f"unsupported MAUD version {version}")

    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<I")
        try:
            name = reader.take(name_len).decode("utf-8")
        except UnicodeDecodeError as e:
            raise FormatError(f"invalid record name: {e}") from e
        tag, rank = reader.unpack("<BI")
        if tag not in DTYPE_TAGS:
            raise FormatError(f"{name}: unknown dtype tag {tag}")
        shape = reader.unpack(f"<{rank}Q") if rank else ()
        dtype = DTYPE_TAGS[tag]
        size = int(np.prod(shape, dtype=np.int64)) if rank else 1
        raw = reader.take(size * dtype.itemsize)
        arrays[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
    if reader.pos != len(data):
        raise FormatError(f"{len(data) - reader.pos} trailing bytes after last record")
    return arrays


def save_checkpoint(path: Union[str, Path], arrays: Mapping[str, np.ndarray]) -> Path:
    path = Path(path)
    atomic_write_bytes(path, dumps(arrays))
    return path


def load_checkpoint(path: Union[str, Path]) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise FormatError(f"checkpoint not found: {path}")
    return loads(path.read_bytes())
