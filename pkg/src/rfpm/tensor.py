"""Dense float64 tensors with a small reverse-mode autodiff graph.

Values are plain ``numpy.ndarray`` objects (float64, row-major). A :class:`Node`
wraps a value together with the closure that maps the output gradient back to
its parents. Image-like data is laid out as (batch, channels, height, width).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NumericError, ShapeError

Tensor = np.ndarray

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


def tensor_new(shape: Sequence[int], data: Sequence[float]) -> Tensor:
    """Build a float64 tensor that owns a copy of ``data``."""
    shape = tuple(int(s) for s in shape)
    if any(s <= 0 for s in shape):
        raise ShapeError(f"shape entries must be positive, got {shape}")
    flat = np.array(data, dtype=np.float64).ravel()
    if flat.size != int(np.prod(shape)):
        raise ShapeError(f"data length {flat.size} does not match shape {shape}")
    return flat.reshape(shape)


class Node:
    """A value in the computation graph."""

    __slots__ = ("value", "grad", "parents", "requires_grad", "op", "_backward")

    def __init__(
        self,
        value: np.ndarray,
        parents: Sequence["Node"] = (),
        backward_fn: BackwardFn | None = None,
        op: str = "leaf",
        requires_grad: bool = False,
    ):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.parents = tuple(parents)
        self.requires_grad = requires_grad or any(p.requires_grad for p in self.parents)
        self.op = op
        self._backward = backward_fn

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Node(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other: "Node") -> "Node":
        return add(self, other)

    def __sub__(self, other: "Node") -> "Node":
        return sub(self, other)

    def __mul__(self, other: "Node | float") -> "Node":
        if isinstance(other, Node):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__


def constant(value) -> Node:
    return Node(np.asarray(value, dtype=np.float64))


def parameter(value) -> Node:
    return Node(np.array(value, dtype=np.float64), requires_grad=True)


def _toposort(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Node) -> None:
    """Accumulate d(loss)/d(node) into ``.grad`` of every reachable node.

    Gradients of a single pass are gathered in a local table first, so calling
    this twice on the same graph adds exactly twice the gradient everywhere.
    """
    if loss.value.size != 1:
        raise ShapeError(f"backward needs a single-element loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    for node in reversed(_toposort(loss)):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = pg


# ---------------------------------------------------------------------------
# convolution


@dataclass
class Conv2dParams:
    weights: Node  # (out, in, kh, kw)
    bias: Node  # (out,)
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.weights.value.ndim != 4:
            raise ShapeError("conv weights must be 4-D (out, in, kh, kw)")
        kh, kw = self.weights.shape[2:]
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError(f"kernel dims must be odd, got {kh}x{kw}")
        if self.bias.shape != (self.weights.shape[0],):
            raise ShapeError("bias length must equal out-channels")
        if self.stride < 1 or self.padding < 0:
            raise ShapeError("stride must be >= 1 and padding >= 0")


def conv2d(x: Node, p: Conv2dParams) -> Node:
    """Cross-correlation with bias and symmetric zero padding."""
    w, b = p.weights.value, p.bias.value
    if x.value.ndim != 4:
        raise ShapeError(f"conv2d input must be BCHW, got {x.shape}")
    B, C, H, W = x.shape
    O, Ci, kh, kw = w.shape
    if C != Ci:
        raise ShapeError(f"conv2d channel mismatch: input {C}, weights {Ci}")
    s, pad = p.stride, p.padding
    Ho = (H + 2 * pad - kh) // s + 1
    Wo = (W + 2 * pad - kw) // s + 1
    if Ho < 1 or Wo < 1:
        raise ShapeError("conv2d output would be empty")

    xp = np.pad(x.value, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.value
    N = Ho * Wo
    if kh == 1 and kw == 1:
        cols = xp[:, :, : s * Ho : s, : s * Wo : s].reshape(B, C, N)
    else:
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, : s * Ho : s, : s * Wo : s]
        cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(B, C * kh * kw, N)
    wm = w.reshape(O, -1)
    out = np.matmul(wm, cols)
    out += b[:, None]
    out = out.reshape(B, O, Ho, Wo)

    def _backward(g):
        gm = g.reshape(B, O, N)
        gw = np.matmul(gm, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape) if p.weights.requires_grad else None
        gb = gm.sum(axis=(0, 2)) if p.bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = np.matmul(wm.T, gm).reshape(B, C, kh, kw, Ho, Wo)
            if kh == 1 and kw == 1 and s == 1:
                gxp = dcols[:, :, 0, 0]
            else:
                gxp = np.zeros(xp.shape)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i : i + s * Ho : s, j : j + s * Wo : s] += dcols[:, :, i, j]
            gx = gxp[:, :, pad : pad + H, pad : pad + W] if pad else gxp
        return gx, gw, gb

    return Node(out, (x, p.weights, p.bias), _backward, "conv2d")


# ---------------------------------------------------------------------------
# pooling and resampling


def max_pool2x2(x: Node) -> Node:
    """2x2 max pool; ties route the gradient to the first element in row-major order."""
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ShapeError(f"max_pool2x2 needs even spatial dims, got {H}x{W}")
    win = x.value.reshape(B, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H // 2, W // 2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def _backward(g):
        onehot = np.zeros(win.shape)
        np.put_along_axis(onehot, idx[..., None], g[..., None], axis=-1)
        gx = onehot.reshape(B, C, H // 2, W // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H, W)
        return (gx,)

    return Node(out, (x,), _backward, "max_pool2x2")


def avg_pool2x2(x: Node) -> Node:
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ShapeError(f"avg_pool2x2 needs even spatial dims, got {H}x{W}")
    out = x.value.reshape(B, C, H // 2, 2, W // 2, 2).mean(axis=(3, 5))

    def _backward(g):
        return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25,)

    return Node(out, (x,), _backward, "avg_pool2x2")


def bilinear_sample(x: Node, coords: Node) -> Node:
    """Sample ``x`` at absolute (x, y) positions given by ``coords`` (B, 2, Ho, Wo).

    Corner pixels outside the image contribute zero.
    """
    B, C, H, W = x.shape
    if coords.value.ndim != 4 or coords.shape[0] != B or coords.shape[1] != 2:
        raise ShapeError(f"coords must be (B, 2, H, W) with B={B}, got {coords.shape}")
    Ho, Wo = coords.shape[2:]
    N = Ho * Wo
    px = coords.value[:, 0].reshape(B, N)
    py = coords.value[:, 1].reshape(B, N)
    x0f = np.floor(px)
    y0f = np.floor(py)
    wx = px - x0f
    wy = py - y0f
    x0 = x0f.astype(np.int64)
    y0 = y0f.astype(np.int64)
    src = x.value.reshape(B, C, H * W)

    corners = []
    for dy, dx, wgt in (
        (0, 0, (1 - wx) * (1 - wy)),
        (0, 1, wx * (1 - wy)),
        (1, 0, (1 - wx) * wy),
        (1, 1, wx * wy),
    ):
        cx = x0 + dx
        cy = y0 + dy
        ok = (cx >= 0) & (cx < W) & (cy >= 0) & (cy < H)
        flat = np.where(ok, cy * W + cx, 0)
        vals = np.take_along_axis(src, np.broadcast_to(flat[:, None, :], (B, C, N)), axis=2)
        vals = vals * ok[:, None, :]
        corners.append((flat, ok, wgt, vals))

    out = np.zeros((B, C, N))
    for _, _, wgt, vals in corners:
        out += wgt[:, None, :] * vals
    out = out.reshape(B, C, Ho, Wo)

    def _backward(g):
        gf = g.reshape(B, C, N)
        gx = gc = None
        if x.requires_grad:
            base = (np.arange(B * C) * (H * W)).reshape(B, C, 1)
            acc = np.zeros(B * C * H * W)
            for flat, ok, wgt, _ in corners:
                contrib = gf * (wgt * ok)[:, None, :]
                acc += np.bincount((base + flat[:, None, :]).ravel(), contrib.ravel(), minlength=acc.size)
            gx = acc.reshape(B, C, H, W)
        if coords.requires_grad:
            v00, v01, v10, v11 = (c[3] for c in corners)
            dvx = (v01 - v00) * (1 - wy)[:, None, :] + (v11 - v10) * wy[:, None, :]
            dvy = (v10 - v00) * (1 - wx)[:, None, :] + (v11 - v01) * wx[:, None, :]
            gc = np.stack([(gf * dvx).sum(axis=1), (gf * dvy).sum(axis=1)], axis=1).reshape(B, 2, Ho, Wo)
        return gx, gc

    return Node(out, (x, coords), _backward, "bilinear_sample")


def _up1d(a: np.ndarray, axis: int) -> np.ndarray:
    a = np.moveaxis(a, axis, -1)
    prev = np.concatenate([a[..., :1], a[..., :-1]], axis=-1)
    nxt = np.concatenate([a[..., 1:], a[..., -1:]], axis=-1)
    out = np.empty(a.shape[:-1] + (2 * a.shape[-1],))
    out[..., 0::2] = 0.75 * a + 0.25 * prev
    out[..., 1::2] = 0.75 * a + 0.25 * nxt
    return np.moveaxis(out, -1, axis)


def _up1d_adjoint(g: np.ndarray, axis: int) -> np.ndarray:
    g = np.moveaxis(g, axis, -1)
    ge, go = g[..., 0::2], g[..., 1::2]
    out = 0.75 * (ge + go)
    out[..., :-1] += 0.25 * ge[..., 1:]
    out[..., 0] += 0.25 * ge[..., 0]
    out[..., 1:] += 0.25 * go[..., :-1]
    out[..., -1] += 0.25 * go[..., -1]
    return np.moveaxis(out, -1, axis)


def upsample2x_bilinear(x: Node) -> Node:
    """Bilinear 2x upsampling, half-pixel centres (align_corners=False), edge clamped."""
    out = _up1d(_up1d(x.value, 2), 3)

    def _backward(g):
        return (_up1d_adjoint(_up1d_adjoint(g, 3), 2),)

    return Node(out, (x,), _backward, "upsample2x")


# ---------------------------------------------------------------------------
# elementwise


def _check_broadcast(a: Node, b: Node, name: str) -> None:
    if a.shape == b.shape:
        return
    sa, sb = a.shape, b.shape
    if len(sa) == len(sb) == 4 and sa[0] == sb[0] and sa[2:] == sb[2:] and (sb[1] == 1 or sa[1] == 1):
        return
    raise ShapeError(f"{name}: incompatible shapes {sa} and {sb}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return g.sum(axis=1, keepdims=True)


def add(a: Node, b: Node) -> Node:
    _check_broadcast(a, b, "add")

    def _backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Node(a.value + b.value, (a, b), _backward, "add")


def sub(a: Node, b: Node) -> Node:
    _check_broadcast(a, b, "sub")

    def _backward(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return Node(a.value - b.value, (a, b), _backward, "sub")


def mul(a: Node, b: Node) -> Node:
    _check_broadcast(a, b, "mul")

    def _backward(g):
        ga = _unbroadcast(g * b.value, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.value, b.shape) if b.requires_grad else None
        return ga, gb

    return Node(a.value * b.value, (a, b), _backward, "mul")


def elementwise(a: Node, b: Node, op: str) -> Node:
    if op == "add":
        return add(a, b)
    if op == "sub":
        return sub(a, b)
    if op == "mul":
        return mul(a, b)
    raise ValueError(f"unknown elementwise op {op!r}")


def scale(x: Node, s: float) -> Node:
    return Node(x.value * s, (x,), lambda g: (g * s,), "scale")


def add_scalar(x: Node, s: float) -> Node:
    return Node(x.value + s, (x,), lambda g: (g,), "add_scalar")


def square(x: Node) -> Node:
    return Node(x.value * x.value, (x,), lambda g: (2.0 * g * x.value,), "square")


def power(x: Node, q: float) -> Node:
    """``x ** q`` for strictly positive ``x``."""
    out = x.value**q
    return Node(out, (x,), lambda g: (g * q * out / x.value,), "power")


def leaky_relu(x: Node, slope: float = 0.1) -> Node:
    if not 0.0 <= slope < 1.0:
        raise ValueError("slope must lie in [0, 1)")
    pos = x.value >= 0
    out = np.where(pos, x.value, slope * x.value)
    return Node(out, (x,), lambda g: (np.where(pos, g, slope * g),), "leaky_relu")


def sigmoid(x: Node) -> Node:
    out = 0.5 * (1.0 + np.tanh(0.5 * x.value))
    return Node(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


# ---------------------------------------------------------------------------
# shape ops and reductions


def concat_channels(nodes: Sequence[Node]) -> Node:
    if not nodes:
        raise ShapeError("concat_channels needs at least one input")
    if len(nodes) == 1:
        return nodes[0]
    ref = nodes[0].shape
    for n in nodes[1:]:
        if len(n.shape) != len(ref) or n.shape[0] != ref[0] or n.shape[2:] != ref[2:]:
            raise ShapeError(f"concat_channels: {n.shape} does not match {ref} outside axis 1")
    sizes = [n.shape[1] for n in nodes]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([n.value for n in nodes], axis=1)

    def _backward(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(nodes)))

    return Node(out, nodes, _backward, "concat")


def slice_channels(x: Node, start: int, stop: int) -> Node:
    C = x.shape[1]
    if not 0 <= start < stop <= C:
        raise ShapeError(f"bad channel slice [{start}:{stop}] of {C}")

    def _backward(g):
        gx = np.zeros(x.shape)
        gx[:, start:stop] = g
        return (gx,)

    return Node(x.value[:, start:stop].copy(), (x,), _backward, "slice")


def sum_channels(x: Node) -> Node:
    return Node(x.value.sum(axis=1, keepdims=True), (x,), lambda g: (np.broadcast_to(g, x.shape),), "sum_channels")


def sum_all(x: Node) -> Node:
    return Node(np.array(x.value.sum()), (x,), lambda g: (np.full(x.shape, float(g)),), "sum")


def mean_all(x: Node) -> Node:
    n = x.value.size
    return Node(np.array(x.value.mean()), (x,), lambda g: (np.full(x.shape, float(g) / n),), "mean")


# ---------------------------------------------------------------------------
# verification


def grad_check(
    f: Callable[[list[Node]], Node],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    samples: int = 20,
    seed: int = 0,
) -> float:
    """Largest |analytic - central difference| / max(1, |central difference|).

    ``f`` maps a list of parameter nodes to a scalar node. Up to ``samples``
    entries of every parameter tensor are probed.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    rng = np.random.default_rng(seed)
    base = [np.array(p, dtype=np.float64) for p in params]
    nodes = [parameter(p) for p in base]
    loss = f(nodes)
    if not np.isfinite(loss.value).all():
        raise NumericError("non-finite loss in grad_check")
    backward(loss)
    worst = 0.0
    for k, p in enumerate(base):
        analytic = nodes[k].grad if nodes[k].grad is not None else np.zeros_like(p)
        if p.size <= samples:
            picks = np.arange(p.size)
        else:
            picks = rng.choice(p.size, size=samples, replace=False)
        for flat in picks:
            idx = np.unravel_index(flat, p.shape)
            vals = []
            for sign in (1.0, -1.0):
                probe = [q.copy() for q in base]
                probe[k][idx] += sign * eps
                vals.append(float(f([constant(q) for q in probe]).value))
            numeric = (vals[0] - vals[1]) / (2 * eps)
            a = float(analytic[idx])
            if not (np.isfinite(numeric) and np.isfinite(a)):
                raise NumericError(f"non-finite gradient at param {k}, index {idx}")
            worst = max(worst, abs(a - numeric) / max(1.0, abs(numeric)))
    return worst
