"""Coarse-to-fine flow estimator on top of the residual feature pyramid.

One small decoder (three 3x3 convs) is shared by every level and iteration.
Because level widths differ, each column's level features first pass through a
per-level 1x1 adapter to a fixed width before entering the decoder.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, ShapeError
from .matching import cost_volume
from .pyramid import RFPMConfig, _uniform, build_rfpm, fuse_level
from .pyramid import init_params as init_rfpm_params
from .pyramid import param_shapes as rfpm_shapes
from .tensor import (
    Conv2dParams,
    Node,
    add,
    add_scalar,
    concat_channels,
    constant,
    conv2d,
    leaky_relu,
    scale,
    upsample2x_bilinear,
)

HIDDEN = 32
ADAPT = 8
SLOPE = 0.1
# images arrive in [0, 1]; centring and scaling them keeps first-layer
# activations (and hence the correlation scores) far from zero at init
IMAGE_CENTER = 0.5
IMAGE_GAIN = 4.0


@dataclass(frozen=True)
class EstimatorConfig:
    rfpm: RFPMConfig = field(default_factory=lambda: RFPMConfig.from_kinds("W/R/W"))
    radius: int = 3
    pred_levels: tuple[int, ...] = (3, 2, 1)
    iterations: int = 1
    normalize_corr: bool = True

    def __post_init__(self):
        L = self.rfpm.levels
        if not self.pred_levels:
            raise ConfigError("need at least one prediction level")
        if any(not 1 <= l < L for l in self.pred_levels):
            raise ConfigError(f"prediction levels must lie in 1..{L - 1}")
        if list(self.pred_levels) != sorted(self.pred_levels, reverse=True) or len(set(self.pred_levels)) != len(
            self.pred_levels
        ):
            raise ConfigError("prediction levels must run strictly from coarse to fine")
        if any(b != a - 1 for a, b in zip(self.pred_levels, self.pred_levels[1:])):
            raise ConfigError("prediction levels must be consecutive")
        if self.iterations < 1:
            raise ConfigError("iterations must be positive")
        if self.radius < 0:
            raise ConfigError("radius must be non-negative")

    @property
    def cost_channels(self) -> int:
        return (2 * self.radius + 1) ** 2


def decoder_shapes(config: EstimatorConfig) -> dict[str, tuple[int, ...]]:
    rf = config.rfpm
    shapes: dict[str, tuple[int, ...]] = {}
    for c in range(len(rf.columns)):
        for l in config.pred_levels:
            shapes[f"decoder.adapt.c{c}.l{l}.w"] = (ADAPT, rf.channels(c, l), 1, 1)
            shapes[f"decoder.adapt.c{c}.l{l}.b"] = (ADAPT,)
    shapes["decoder.conv1.cost.w"] = (HIDDEN, config.cost_channels, 3, 3)
    for c in range(len(rf.columns)):
        shapes[f"decoder.conv1.feat{c}.w"] = (HIDDEN, ADAPT, 3, 3)
    shapes["decoder.conv1.flow.w"] = (HIDDEN, 2, 3, 3)
    shapes["decoder.conv1.b"] = (HIDDEN,)
    shapes["decoder.conv2.w"] = (HIDDEN, HIDDEN, 3, 3)
    shapes["decoder.conv2.b"] = (HIDDEN,)
    shapes["decoder.conv3.w"] = (2, HIDDEN, 3, 3)
    shapes["decoder.conv3.b"] = (2,)
    return shapes


def param_shapes(config: EstimatorConfig) -> dict[str, tuple[int, ...]]:
    return {**rfpm_shapes(config.rfpm), **decoder_shapes(config)}


def init_params(config: EstimatorConfig, seed: int | None = None) -> dict[str, np.ndarray]:
    """Seeded init of pyramid and decoder parameters.

    Every tensor is drawn from a stream keyed by its own name, so parameters
    shared between a one-column and a three-column model start identical.
    """
    seed = config.rfpm.seed if seed is None else seed
    params = init_rfpm_params(config.rfpm, seed)
    shapes = decoder_shapes(config)
    conv1_fan = 9 * (config.cost_channels + ADAPT * len(config.rfpm.columns) + 2)
    for name, shape in shapes.items():
        rng = np.random.default_rng([seed, 1000, *name.encode()])
        if name.startswith("decoder.conv1."):
            fan = conv1_fan
        elif name.endswith(".b"):
            fan = int(np.prod(shapes[name[:-2] + ".w"][1:]))
        else:
            fan = int(np.prod(shape[1:]))
        params[name] = _uniform(rng, shape, fan)
    return params


def as_nodes(params: Mapping[str, np.ndarray], trainable: bool = True) -> dict[str, Node]:
    return {k: Node(v, requires_grad=trainable) for k, v in params.items()}


def _conv(params: Mapping[str, Node], name: str) -> Conv2dParams:
    w = params[name + ".w"]
    return Conv2dParams(w, params[name + ".b"], 1, w.shape[2] // 2)


def decode(
    cost: Node, features: Sequence[Node], flow: Node, level: int, params: Mapping[str, Node]
) -> Node:
    """Predict a flow increment from the cost volume, per-column features and current flow."""
    adapted = [
        leaky_relu(conv2d(f, _conv(params, f"decoder.adapt.c{c}.l{level}")), SLOPE) for c, f in enumerate(features)
    ]
    w1 = concat_channels(
        [params["decoder.conv1.cost.w"]]
        + [params[f"decoder.conv1.feat{c}.w"] for c in range(len(features))]
        + [params["decoder.conv1.flow.w"]]
    )
    x = concat_channels([cost, *adapted, flow])
    h = leaky_relu(conv2d(x, Conv2dParams(w1, params["decoder.conv1.b"], 1, 1)), SLOPE)
    h = leaky_relu(conv2d(h, _conv(params, "decoder.conv2")), SLOPE)
    return conv2d(h, _conv(params, "decoder.conv3"))


def upscale_flow(flow: Node) -> Node:
    """Bilinear 2x upsampling with vectors doubled to stay in pixel units."""
    return scale(upsample2x_bilinear(flow), 2.0)


def to_full_resolution(flow: Node, level: int) -> Node:
    for _ in range(level):
        flow = upscale_flow(flow)
    return flow


def standardize(image: Node | Sequence[Node]) -> Node | list[Node]:
    """Map [0, 1] intensities to roughly [-2, 2]; lists are handled per column."""
    if isinstance(image, (list, tuple)):
        return [standardize(im) for im in image]
    return scale(add_scalar(image, -IMAGE_CENTER), IMAGE_GAIN)


def estimate(
    image_t: Node | Sequence[Node],
    image_t1: Node | Sequence[Node],
    params: Mapping[str, Node],
    config: EstimatorConfig,
) -> list[Node]:
    """Flow predictions for every prediction level, coarsest first.

    Each image argument is a single (B, 3, H, W) node or one node per pyramid
    column. Flow at level ``l`` is expressed in level-``l`` pixels.
    """
    pyr_t = build_rfpm(standardize(image_t), config.rfpm, params)
    pyr_t1 = build_rfpm(standardize(image_t1), config.rfpm, params)
    B = pyr_t[0][0].shape[0]
    if pyr_t[0][0].shape != pyr_t1[0][0].shape:
        raise ShapeError("both frames must share one shape")

    flows: list[Node] = []
    flow: Node | None = None
    for level in config.pred_levels:
        f_t, f_t1 = fuse_level(pyr_t, level), fuse_level(pyr_t1, level)
        H, W = f_t.shape[2:]
        flow = constant(np.zeros((B, 2, H, W))) if flow is None else upscale_flow(flow)
        feats = [p[level] for p in pyr_t]
        for _ in range(config.iterations):
            cv = cost_volume(f_t, f_t1, flow, config.radius, config.normalize_corr)
            flow = add(flow, decode(cv, feats, flow, level, params))
        flows.append(flow)
    return flows
