"""Backward warping and local correlation (the cost volume)."""

from __future__ import annotations

import numpy as np

from .errors import ShapeError
from .tensor import Node, add, bilinear_sample, constant


def pixel_grid(batch: int, height: int, width: int) -> np.ndarray:
    """(B, 2, H, W) array holding each pixel's own (x, y) coordinate."""
    ys, xs = np.meshgrid(np.arange(height, dtype=np.float64), np.arange(width, dtype=np.float64), indexing="ij")
    return np.broadcast_to(np.stack([xs, ys])[None], (batch, 2, height, width)).copy()


def warp(feature: Node, flow: Node) -> Node:
    """Sample ``feature`` at ``p + flow(p)``; samples outside the map read zero."""
    B, _, H, W = feature.shape
    if flow.shape != (B, 2, H, W):
        raise ShapeError(f"flow shape {flow.shape} does not match feature {feature.shape}")
    return bilinear_sample(feature, add(constant(pixel_grid(B, H, W)), flow))


def displacement_index(dx: int, dy: int, d: int) -> int:
    """Channel of displacement (dx, dy); ordering is row-major from (-d, -d)."""
    return (dy + d) * (2 * d + 1) + (dx + d)


def correlate(f1: Node, f2: Node, d: int, normalize: bool = True) -> Node:
    """Cost volume ``V[(dy, dx)](y, x) = sum_c f1[c, y, x] * f2[c, y + dy, x + dx]``.

    Divided by the channel count when ``normalize`` is set; shifted reads that
    leave the map contribute zero.
    """
    if f1.shape != f2.shape:
        raise ShapeError(f"correlate needs equal shapes, got {f1.shape} and {f2.shape}")
    if d < 0:
        raise ValueError("radius must be non-negative")
    B, C, H, W = f1.shape
    k = 2 * d + 1
    norm = 1.0 / C if normalize else 1.0
    a = f1.value
    bp = np.pad(f2.value, ((0, 0), (0, 0), (d, d), (d, d)))
    out = np.empty((B, k * k, H, W))
    for dy in range(-d, d + 1):
        for dx in range(-d, d + 1):
            shifted = bp[:, :, d + dy : d + dy + H, d + dx : d + dx + W]
            out[:, displacement_index(dx, dy, d)] = np.einsum("bchw,bchw->bhw", a, shifted) * norm

    def _backward(g):
        g = g * norm
        ga = np.zeros_like(a) if f1.requires_grad else None
        gbp = np.zeros_like(bp) if f2.requires_grad else None
        tmp = np.empty_like(a)
        for dy in range(-d, d + 1):
            for dx in range(-d, d + 1):
                gk = g[:, displacement_index(dx, dy, d)][:, None]
                window = (slice(None), slice(None), slice(d + dy, d + dy + H), slice(d + dx, d + dx + W))
                if ga is not None:
                    np.multiply(gk, bp[window], out=tmp)
                    ga += tmp
                if gbp is not None:
                    np.multiply(gk, a, out=tmp)
                    gbp[window] += tmp
        gb = gbp[:, :, d : d + H, d : d + W] if gbp is not None else None
        return ga, gb

    return Node(out, (f1, f2), _backward, "correlate")


def cost_volume(f_t: Node, f_t1: Node, flow: Node, d: int, normalize: bool = True) -> Node:
    """Correlate frame-t features with frame-t+1 features warped by ``flow``."""
    return correlate(f_t, warp(f_t1, flow), d, normalize)
