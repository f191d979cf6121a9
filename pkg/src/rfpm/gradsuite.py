"""Central finite-difference checks for every differentiable operation.

Each check builds seeded random 16x16 float64 inputs, contracts the op's
output with a fixed random probe to a scalar, and returns the largest relative
error between the analytic and numeric gradients.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import ConfigError
from .flownet import EstimatorConfig, estimate, init_params
from .matching import correlate, warp
from .pyramid import RFPMConfig, RepairMaskParams, apply_repair, make_repair_masks, rfd_down
from .tensor import (
    Conv2dParams,
    Node,
    bilinear_sample,
    concat_channels,
    constant,
    conv2d,
    elementwise,
    grad_check,
    leaky_relu,
    max_pool2x2,
    mul,
    sum_all,
    upsample2x_bilinear,
)

SIZE = 16
EPS = 1e-5
OP_TOL = 1e-4
END_TO_END_TOL = 1e-3


def _probe(out: Node, rng: np.random.Generator) -> Node:
    return sum_all(mul(out, constant(rng.normal(size=out.shape))))


def _spread(rng: np.random.Generator, shape) -> np.ndarray:
    """Distinct values bounded away from zero: no max-pool ties, no relu kinks."""
    n = int(np.prod(shape))
    return ((rng.permutation(n) + 0.5) / n * 2.0 - 1.0).reshape(shape)


def _off_grid(rng: np.random.Generator, shape, lo: float, hi: float) -> np.ndarray:
    """Coordinates whose fractional part stays in [0.1, 0.9]."""
    return np.floor(rng.uniform(lo, hi, size=shape)) + rng.uniform(0.1, 0.9, size=shape)


def check_conv2d(rng):
    x, w, b = rng.normal(size=(2, 3, SIZE, SIZE)), rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4)
    return max(
        grad_check(lambda p, s=s: _probe(conv2d(p[0], Conv2dParams(p[1], p[2], s, 1)), np.random.default_rng(7)), [x, w, b], EPS)
        for s in (1, 2)
    )


def check_max_pool2x2(rng):
    x = _spread(rng, (1, 3, SIZE, SIZE))
    return grad_check(lambda p: _probe(max_pool2x2(p[0]), np.random.default_rng(7)), [x], EPS)


def check_bilinear_sample(rng):
    x = rng.normal(size=(2, 3, SIZE, SIZE))
    coords = _off_grid(rng, (2, 2, SIZE, SIZE), -2, SIZE + 1)
    return grad_check(lambda p: _probe(bilinear_sample(p[0], p[1]), np.random.default_rng(7)), [x, coords], EPS)


def check_elementwise(rng):
    a, m = rng.normal(size=(2, 4, SIZE, SIZE)), rng.normal(size=(2, 1, SIZE, SIZE))
    return max(
        grad_check(lambda p, op=op: _probe(elementwise(p[0], p[1], op), np.random.default_rng(7)), [a, m], EPS)
        for op in ("add", "sub", "mul")
    )


def check_concat(rng):
    parts = [rng.normal(size=(1, c, SIZE, SIZE)) for c in (2, 3, 1)]
    return grad_check(lambda p: _probe(concat_channels(p), np.random.default_rng(7)), parts, EPS)


def check_leaky_relu(rng):
    x = _spread(rng, (1, 2, SIZE, SIZE))
    return grad_check(lambda p: _probe(leaky_relu(p[0], 0.1), np.random.default_rng(7)), [x], EPS)


def check_upsample(rng):
    x = rng.normal(size=(2, 3, SIZE, SIZE))
    return grad_check(lambda p: _probe(upsample2x_bilinear(p[0]), np.random.default_rng(7)), [x], EPS)


def check_warp(rng):
    feat = rng.normal(size=(2, 3, SIZE, SIZE))
    flow = _off_grid(rng, (2, 2, SIZE, SIZE), -3, 3)
    return grad_check(lambda p: _probe(warp(p[0], p[1]), np.random.default_rng(7)), [feat, flow], EPS)


def check_correlate(rng):
    f1, f2 = rng.normal(size=(1, 4, SIZE, SIZE)), rng.normal(size=(1, 4, SIZE, SIZE))
    return max(
        grad_check(lambda p, n=n: _probe(correlate(p[0], p[1], 3, n), np.random.default_rng(7)), [f1, f2], EPS)
        for n in (True, False)
    )


def check_repair_mask(rng):
    raw = rng.normal(size=(1, 4, SIZE, SIZE))
    src = rng.normal(size=(1, 3, SIZE, SIZE))
    shapes = [(1, 3, 1, 1), (1,), (4, 3, 1, 1), (4,), (4, 4, 3, 3), (4,)]
    weights = [rng.normal(scale=0.5, size=s) for s in shapes]

    def f(p):
        masks = RepairMaskParams(Conv2dParams(p[2], p[3]), Conv2dParams(p[4], p[5]))
        att, bias = make_repair_masks(p[1], masks)
        return _probe(apply_repair(p[0], att, bias, Conv2dParams(p[6], p[7], 1, 1)), np.random.default_rng(7))

    return grad_check(f, [raw, src, *weights], EPS)


def check_rfd(rng):
    x = _spread(rng, (1, 3, SIZE, SIZE))
    k1w, k1b = rng.normal(size=(4, 3, 1, 1)), rng.normal(size=4)
    k3w, k3b = rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4)

    def f(p):
        return _probe(
            rfd_down(p[0], Conv2dParams(p[1], p[2]), Conv2dParams(p[3], p[4], 2, 1), activate=False),
            np.random.default_rng(7),
        )

    return grad_check(f, [x, k1w, k1b, k3w, k3b], EPS)


def small_estimator(seed: int = 0) -> EstimatorConfig:
    return EstimatorConfig(RFPMConfig.from_kinds("W/R/W", (4, 6, 8), (1, 2), seed))


def check_estimator_loss(rng):
    from .train import multiscale_loss

    config = small_estimator()
    params = init_params(config, int(rng.integers(1 << 31)))
    names = sorted(params)
    im1, im2 = rng.uniform(size=(1, 3, SIZE, SIZE)), rng.uniform(size=(1, 3, SIZE, SIZE))
    gt = rng.normal(scale=2.0, size=(1, 2, SIZE, SIZE))

    def f(p):
        flows = estimate(constant(im1), constant(im2), dict(zip(names, p)), config)
        return multiscale_loss(flows, gt, (1.0, 1.0, 1.0), config.pred_levels)

    return grad_check(f, [params[n] for n in names], EPS, samples=3)


CHECKS: dict[str, tuple[Callable[[np.random.Generator], float], float]] = {
    "conv2d": (check_conv2d, OP_TOL),
    "max_pool2x2": (check_max_pool2x2, OP_TOL),
    "bilinear_sample": (check_bilinear_sample, OP_TOL),
    "elementwise": (check_elementwise, OP_TOL),
    "concat": (check_concat, OP_TOL),
    "leaky_relu": (check_leaky_relu, OP_TOL),
    "upsample": (check_upsample, OP_TOL),
    "warp": (check_warp, OP_TOL),
    "correlate": (check_correlate, OP_TOL),
    "repair_mask": (check_repair_mask, OP_TOL),
    "rfd": (check_rfd, OP_TOL),
    "estimator_loss": (check_estimator_loss, END_TO_END_TOL),
}


def run_checks(ops: list[str] | None = None, seed: int = 42) -> list[tuple[str, float, float]]:
    """(name, max relative error, tolerance) per op; ``None`` runs all of them."""
    names = list(CHECKS) if ops is None else ops
    unknown = [n for n in names if n not in CHECKS]
    if unknown:
        raise ConfigError(f"unknown ops: {', '.join(unknown)}")
    rows = []
    order = list(CHECKS)
    for name in names:
        fn, tol = CHECKS[name]
        rows.append((name, fn(np.random.default_rng([seed, order.index(name)])), tol))
    return rows
