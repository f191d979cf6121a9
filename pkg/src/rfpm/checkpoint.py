"""Flat binary parameter container plus a key/value text sidecar.

Each record is ``u32 name_len, name (utf-8), u32 rank, u32 dims[rank]`` followed
by the tensor as little-endian float64 in row-major order. Records repeat until
end of file.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import FormatError, ShapeError
from .flowio import atomic_write


def encode_params(params: Mapping[str, np.ndarray]) -> bytes:
    chunks = []
    for name, value in params.items():
        value = np.asarray(value, dtype=np.float64)
        key = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(key)) + key)
        chunks.append(struct.pack(f"<I{value.ndim}I", value.ndim, *value.shape))
        chunks.append(value.astype("<f8").tobytes())
    return b"".join(chunks)


def decode_params(raw: bytes) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(raw):
            raise FormatError("truncated checkpoint")
        chunk = raw[pos : pos + n]
        pos += n
        return chunk

    while pos < len(raw):
        (n,) = struct.unpack("<I", take(4))
        name = take(n).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(dims)) if rank else 1
        out[name] = np.frombuffer(take(8 * count), "<f8").reshape(dims).astype(np.float64)
    return out


def sidecar_path(path: str | os.PathLike) -> Path:
    return Path(str(path) + ".cfg")


def save_checkpoint(
    path: str | os.PathLike, params: Mapping[str, np.ndarray], config_text: str | None = None
) -> None:
    atomic_write(path, encode_params(params))
    if config_text is not None:
        atomic_write(sidecar_path(path), config_text.encode("utf-8"))


def load_checkpoint(
    path: str | os.PathLike, expected: Mapping[str, tuple[int, ...]] | None = None
) -> dict[str, np.ndarray]:
    """Read parameters; with ``expected`` every stored tensor must exist there with the same shape."""
    params = decode_params(Path(path).read_bytes())
    if expected is not None:
        for name, value in params.items():
            if name not in expected:
                raise ShapeError(f"checkpoint tensor {name!r} is not part of the model")
            if tuple(expected[name]) != value.shape:
                raise ShapeError(f"{name}: checkpoint shape {value.shape} != model shape {tuple(expected[name])}")
    return params


def read_sidecar(path: str | os.PathLike) -> str | None:
    side = sidecar_path(path)
    return side.read_text("utf-8") if side.exists() else None
