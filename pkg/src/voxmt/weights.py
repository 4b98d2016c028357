"""Named float32 tensor container and its WTS1 on-disk format.

Layout (all little-endian)::

    b"VOXMTWT1"
    u32 entry count
    per entry:
        u16 name length, UTF-8 name
        u8 rank, rank x u32 dims
        row-major f32 payload
"""

from __future__ import annotations

import struct
from collections.abc import MutableMapping
from pathlib import Path
from typing import Dict, Iterator, Union

import numpy as np

from voxmt.errors import ConfigError, InputError

MAGIC = b"VOXMTWT1"


class WeightStore(MutableMapping):
    """Ordered name -> float32 array mapping. Insertion order is the file order."""

    def __init__(self, tensors: Union[Dict[str, np.ndarray], None] = None):
        self._data: Dict[str, np.ndarray] = {}
        for name, value in (tensors or {}).items():
            self[name] = value

    def __getitem__(self, name: str) -> np.ndarray:
        return self._data[name]

    def __setitem__(self, name: str, value) -> None:
        if not isinstance(name, str) or not name:
            raise ConfigError(f"weight names must be non-empty strings, got {name!r}")
        arr = np.ascontiguousarray(np.asarray(value, dtype=np.float32))
        if arr.ndim > 255:
            raise ConfigError(f"tensor {name!r} has rank {arr.ndim} > 255")
        self._data[name] = arr

    def __delitem__(self, name: str) -> None:
        del self._data[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._data)

    def __len__(self) -> int:
        return len(self._data)

    def get64(self, name: str, shape=None) -> np.ndarray:
        """Tensor as float64, optionally checking its shape."""
        if name not in self._data:
            raise ConfigError(f"missing weight tensor {name!r}")
        arr = self._data[name]
        if shape is not None and arr.shape != tuple(shape):
            raise ConfigError(f"weight {name!r} has shape {arr.shape}, expected {tuple(shape)}")
        return arr.astype(np.float64)

    def to_bytes(self) -> bytes:
        out = bytearray(MAGIC)
        out += struct.pack("<I", len(self._data))
        for name, arr in self._data.items():
            raw = name.encode("utf-8")
            if len(raw) > 0xFFFF:
                raise ConfigError(f"weight name too long: {name[:40]}...")
            out += struct.pack("<H", len(raw)) + raw
            out += struct.pack("<B", arr.ndim)
            out += struct.pack(f"<{arr.ndim}I", *arr.shape)
            out += arr.astype("<f4").tobytes(order="C")
        return bytes(out)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "WeightStore":
        if blob[:8] != MAGIC:
            raise InputError("not a WTS1 weight file (bad magic)")
        try:
            (count,) = struct.unpack_from("<I", blob, 8)
            pos = 12
            store = cls()
            for _ in range(count):
                (nlen,) = struct.unpack_from("<H", blob, pos)
                pos += 2
                name = blob[pos : pos + nlen].decode("utf-8")
                pos += nlen
                (rank,) = struct.unpack_from("<B", blob, pos)
                pos += 1
                dims = struct.unpack_from(f"<{rank}I", blob, pos)
                pos += 4 * rank
                n = int(np.prod(dims, dtype=np.int64))
                if pos + 4 * n > len(blob):
                    raise InputError(f"truncated payload for tensor {name!r}")
                arr = np.frombuffer(blob, dtype="<f4", count=n, offset=pos).reshape(dims)
                pos += 4 * n
                store[name] = arr
        except (struct.error, UnicodeDecodeError) as exc:
            raise InputError(f"corrupt WTS1 file: {exc}") from None
        if pos != len(blob):
            raise InputError(f"{len(blob) - pos} trailing bytes after last tensor")
        return store

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "WeightStore":
        return cls.from_bytes(Path(path).read_bytes())
