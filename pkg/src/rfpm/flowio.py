"""Middlebury ``.flo`` files, binary PPM images and flow colour coding."""

from __future__ import annotations

import os
import tempfile
from pathlib import Path

import numpy as np

from .errors import FormatError, NumericError, ShapeError

FLO_MAGIC = 202021.25
FLO_TAG = b"PIEH"


def atomic_write(path: str | os.PathLike, payload: bytes) -> None:
    """Write ``payload`` to a temp file next to ``path`` and rename it into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _squeeze_flow(flow: np.ndarray) -> np.ndarray:
    flow = np.asarray(flow)
    if flow.ndim == 4:
        if flow.shape[0] != 1:
            raise ShapeError("write_flo takes a single flow field")
        flow = flow[0]
    if flow.ndim != 3 or flow.shape[0] != 2:
        raise ShapeError(f"flow must be (2, H, W), got {flow.shape}")
    return flow


def encode_flo(flow: np.ndarray) -> bytes:
    flow = _squeeze_flow(flow)
    if not np.isfinite(flow).all():
        raise NumericError("flow contains non-finite values")
    _, h, w = flow.shape
    header = np.array([FLO_MAGIC], "<f4").tobytes() + np.array([w, h], "<i4").tobytes()
    return header + flow.transpose(1, 2, 0).astype("<f4").tobytes()


def decode_flo(raw: bytes) -> np.ndarray:
    if len(raw) < 12:
        raise FormatError("file shorter than the 12-byte .flo header")
    if raw[:4] != FLO_TAG:
        raise FormatError("bad .flo magic")
    w, h = (int(v) for v in np.frombuffer(raw[4:12], "<i4"))
    if w <= 0 or h <= 0:
        raise FormatError(f"bad .flo dimensions {w}x{h}")
    need = 12 + 8 * w * h
    if len(raw) != need:
        raise FormatError(f".flo payload has {len(raw)} bytes, expected {need}")
    data = np.frombuffer(raw[12:], "<f4").reshape(h, w, 2)
    return data.transpose(2, 0, 1).astype(np.float64)


def write_flo(flow: np.ndarray, path: str | os.PathLike) -> None:
    atomic_write(path, encode_flo(flow))


def read_flo(path: str | os.PathLike) -> np.ndarray:
    """Read a ``.flo`` file into a float64 (2, H, W) array."""
    return decode_flo(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# PPM


def encode_ppm(image: np.ndarray) -> bytes:
    """P6 with maxval 255. Accepts uint8 (H, W, 3) or float (3, H, W) in [0, 1]."""
    img = np.asarray(image)
    if img.dtype != np.uint8:
        if img.ndim != 3 or img.shape[0] != 3:
            raise ShapeError(f"float images must be (3, H, W), got {img.shape}")
        img = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeError(f"uint8 images must be (H, W, 3), got {img.shape}")
    h, w, _ = img.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(img).tobytes()


def write_ppm(image: np.ndarray, path: str | os.PathLike) -> None:
    atomic_write(path, encode_ppm(image))


def read_ppm(path: str | os.PathLike) -> np.ndarray:
    """Read a binary P6 file (maxval 255) as uint8 (H, W, 3)."""
    raw = Path(path).read_bytes()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PPM header")
        fields.append(raw[start:pos])
    if fields[0] != b"P6" or fields[3] != b"255":
        raise FormatError("only binary P6 with maxval 255 is supported")
    w, h = int(fields[1]), int(fields[2])
    body = raw[pos + 1 :]
    if len(body) != w * h * 3:
        raise FormatError("PPM payload size mismatch")
    return np.frombuffer(body, np.uint8).reshape(h, w, 3).copy()


# ---------------------------------------------------------------------------
# colour coding


def make_colorwheel() -> np.ndarray:
    """The 55-entry Middlebury colour wheel, RGB in 0..255."""
    segments = [(15, (255, 0, 0), (255, 255, 0)), (6, (255, 255, 0), (0, 255, 0)), (4, (0, 255, 0), (0, 255, 255)),
                (11, (0, 255, 255), (0, 0, 255)), (13, (0, 0, 255), (255, 0, 255)), (6, (255, 0, 255), (255, 0, 0))]
    rows = []
    for n, start, end in segments:
        step = np.floor(255 * np.arange(n) / n)
        direction = (np.array(end) - np.array(start)) // 255
        rows.append(np.array(start)[None] + step[:, None] * direction[None])
    return np.concatenate(rows).astype(np.float64)


def flow_to_color(flow: np.ndarray, max_magnitude: float | None = None) -> np.ndarray:
    """uint8 (H, W, 3) image; hue encodes direction, saturation the clamped magnitude."""
    flow = _squeeze_flow(flow)
    u, v = flow[0], flow[1]
    rad = np.sqrt(u * u + v * v)
    if max_magnitude is None:
        max_magnitude = float(rad.max())
    if max_magnitude <= 0:
        max_magnitude = 1.0
    wheel = make_colorwheel() / 255.0
    n = wheel.shape[0]
    a = np.arctan2(-v, -u) / np.pi
    fk = (a + 1) / 2 * (n - 1)
    k0 = np.floor(fk).astype(int)
    k1 = (k0 + 1) % n
    f = fk - k0
    sat = np.minimum(rad / max_magnitude, 1.0)
    img = np.empty(u.shape + (3,))
    for ch in range(3):
        col = (1 - f) * wheel[k0, ch] + f * wheel[k1, ch]
        img[..., ch] = 1 - sat * (1 - col)
    return np.round(img * 255).astype(np.uint8)
