"""Residual feature pyramid: WFD/MP/RFD downsampling, repair masks, three columns.

Level 0 of every column is the input image; level ``l`` is at ``1 / 2**l``
resolution. Column 0 is the base pyramid and never receives masks; at each
mask level the base column repairs the middle column, which in turn repairs
the right column.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import (
    Conv2dParams,
    Node,
    add,
    concat_channels,
    conv2d,
    leaky_relu,
    max_pool2x2,
    mul,
    sigmoid,
)

SLOPE = 0.1


class DownsamplerKind(str, enum.Enum):
    WFD = "W"
    MP = "M"
    RFD = "R"


@dataclass(frozen=True)
class PyramidColumnSpec:
    """Output channels and downsampler kind for levels 1..L-1 of one column."""

    channels: tuple[int, ...]
    kinds: tuple[DownsamplerKind, ...]

    def __post_init__(self):
        if len(self.channels) != len(self.kinds):
            raise ConfigError("channels and kinds must have the same length")
        if len(self.channels) < 1:
            raise ConfigError("a column needs at least one downsampling level")
        if any(c <= 0 for c in self.channels):
            raise ConfigError("channel counts must be positive")

    @property
    def levels(self) -> int:
        return len(self.channels) + 1

    @property
    def label(self) -> str:
        kinds = {k.value for k in self.kinds}
        return kinds.pop() if len(kinds) == 1 else "".join(k.value for k in self.kinds)


@dataclass(frozen=True)
class RFPMConfig:
    columns: tuple[PyramidColumnSpec, ...]
    mask_levels: frozenset[int] = frozenset({1, 2})
    seed: int = 0
    image_channels: int = 3

    def __post_init__(self):
        if not 1 <= len(self.columns) <= 3:
            raise ConfigError("RFPM takes 1 to 3 columns")
        L = self.columns[0].levels
        if any(c.levels != L for c in self.columns):
            raise ConfigError("all columns must share the same level count")
        object.__setattr__(self, "mask_levels", frozenset(int(m) for m in self.mask_levels))
        bad = [m for m in self.mask_levels if not 1 <= m <= L - 1]
        if bad:
            raise ConfigError(f"mask levels {sorted(bad)} outside 1..{L - 1}")

    @property
    def levels(self) -> int:
        return self.columns[0].levels

    @property
    def active_mask_levels(self) -> frozenset[int]:
        """Mask levels that actually carry a repair (none for a single column)."""
        return self.mask_levels if len(self.columns) > 1 else frozenset()

    @property
    def kinds(self) -> str:
        return "/".join(c.label for c in self.columns)

    def channels(self, column: int, level: int) -> int:
        return self.image_channels if level == 0 else self.columns[column].channels[level - 1]

    @classmethod
    def from_kinds(
        cls,
        kinds: str = "W/R/W",
        channels: Sequence[int] | Sequence[Sequence[int]] = (16, 24, 32),
        mask_levels: Sequence[int] = (1, 2),
        seed: int = 0,
    ) -> "RFPMConfig":
        """Build a config from a kinds string such as ``"W/R/W"``.

        Each slash-separated token is one column: a single letter applies to
        every level, otherwise one letter per level. ``channels`` is either one
        list shared by every column or one list per column.
        """
        tokens = [t.strip().upper() for t in kinds.split("/") if t.strip()]
        if not tokens:
            raise ConfigError(f"empty kinds string {kinds!r}")
        per_column = channels and isinstance(channels[0], (list, tuple))
        cols = []
        for i, tok in enumerate(tokens):
            ch = tuple(channels[i] if per_column else channels)
            if len(tok) == 1:
                tok = tok * len(ch)
            try:
                ks = tuple(DownsamplerKind(letter) for letter in tok)
            except ValueError:
                raise ConfigError(f"unknown downsampler in {tok!r}; use W, M or R") from None
            cols.append(PyramidColumnSpec(ch, ks))
        return cls(tuple(cols), frozenset(mask_levels), seed)


def preset(name: str) -> RFPMConfig:
    """Named configurations: ``toy`` (default), ``irr-pwc`` and ``raft`` channel schedules."""
    if name == "toy":
        return RFPMConfig.from_kinds("W/R/W", (16, 24, 32), (1, 2))
    if name == "irr-pwc":
        base = (16, 32, 64, 96, 128, 196)
        other = (16, 32, 64, 88, 112, 136)
        return RFPMConfig.from_kinds("W/R/W", (base, other, other), (1, 2, 3))
    if name == "raft":
        return RFPMConfig.from_kinds("W/R/W", (64, 96, 128), (1, 2))
    raise ConfigError(f"unknown preset {name!r}")


@dataclass
class RepairMaskParams:
    attention: Conv2dParams  # source channels -> 1, 1x1
    bias: Conv2dParams  # source channels -> target channels, 1x1

    def __post_init__(self):
        if self.attention.weights.shape[0] != 1:
            raise ShapeError("attention conv must output exactly one channel")


@dataclass
class FeaturePyramid:
    levels: list[Node] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.levels)

    def __getitem__(self, level: int) -> Node:
        return self.levels[level]


# ---------------------------------------------------------------------------
# downsampling blocks


def _finish(pre: Node, activate: bool) -> Node:
    return leaky_relu(pre, SLOPE) if activate else pre


def wfd_down(x: Node, k3: Conv2dParams, activate: bool = True) -> Node:
    """Weighted feature downsampling: strided 3x3 conv."""
    if k3.stride != 2 or k3.weights.shape[2:] != (3, 3):
        raise ShapeError("WFD expects a 3x3 kernel with stride 2")
    return _finish(conv2d(x, k3), activate)


def mp_down(x: Node, k1: Conv2dParams, activate: bool = True) -> Node:
    """2x2 max pool followed by a 1x1 channel map."""
    return _finish(conv2d(max_pool2x2(x), k1), activate)


def rfd_down(x: Node, k1: Conv2dParams, k3: Conv2dParams, activate: bool = True) -> Node:
    """Residual feature downsampling: max-pool branch plus strided-conv branch."""
    mp = conv2d(max_pool2x2(x), k1)
    wfd = conv2d(x, k3)
    if mp.shape != wfd.shape:
        raise ShapeError(f"RFD branches disagree: {mp.shape} vs {wfd.shape}")
    return _finish(add(mp, wfd), activate)


def make_repair_masks(source: Node, p: RepairMaskParams) -> tuple[Node, Node]:
    """Attention mask in (0, 1) of shape (B, 1, H, W) and an additive bias mask."""
    return sigmoid(conv2d(source, p.attention)), conv2d(source, p.bias)


def apply_repair(raw: Node, attention: Node, bias: Node, fuse: Conv2dParams) -> Node:
    """``lrelu(conv3x3(raw * attention + bias))`` with a 1-channel attention broadcast."""
    if attention.shape[2:] != raw.shape[2:] or bias.shape[2:] != raw.shape[2:]:
        raise ShapeError(f"mask dims {attention.shape[2:]}/{bias.shape[2:]} differ from {raw.shape[2:]}")
    return leaky_relu(conv2d(add(mul(raw, attention), bias), fuse), SLOPE)


# ---------------------------------------------------------------------------
# parameters


def _uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def column_prefix(column: int) -> str:
    return f"rfpm.c{column}."


def param_shapes(config: RFPMConfig) -> dict[str, tuple[int, ...]]:
    """Every learnable tensor the config needs, keyed by name."""
    shapes: dict[str, tuple[int, ...]] = {}
    masks = config.active_mask_levels
    for c, col in enumerate(config.columns):
        for l in range(1, config.levels):
            pre = f"{column_prefix(c)}l{l}."
            cin, cout = config.channels(c, l - 1), config.channels(c, l)
            kind = col.kinds[l - 1]
            if kind in (DownsamplerKind.WFD, DownsamplerKind.RFD):
                shapes[pre + "k3.w"] = (cout, cin, 3, 3)
                shapes[pre + "k3.b"] = (cout,)
            if kind in (DownsamplerKind.MP, DownsamplerKind.RFD):
                shapes[pre + "k1.w"] = (cout, cin, 1, 1)
                shapes[pre + "k1.b"] = (cout,)
            if c > 0 and l in masks:
                src = config.channels(c - 1, l)
                shapes[pre + "att.w"] = (1, src, 1, 1)
                shapes[pre + "att.b"] = (1,)
                shapes[pre + "bias.w"] = (cout, src, 1, 1)
                shapes[pre + "bias.b"] = (cout,)
                shapes[pre + "fuse.w"] = (cout, cout, 3, 3)
                shapes[pre + "fuse.b"] = (cout,)
    return shapes


def init_params(config: RFPMConfig, seed: int | None = None) -> dict[str, np.ndarray]:
    """Seeded uniform init. Each column draws from its own stream, so a column's
    parameters do not depend on which other columns exist."""
    seed = config.seed if seed is None else seed
    out: dict[str, np.ndarray] = {}
    shapes = param_shapes(config)
    for c in range(len(config.columns)):
        rng = np.random.default_rng([seed, c])
        for name, shape in shapes.items():
            if not name.startswith(column_prefix(c)) or not name.endswith(".w"):
                continue
            fan_in = int(np.prod(shape[1:]))
            out[name] = _uniform(rng, shape, fan_in)
            b = name[:-2] + ".b"
            out[b] = _uniform(rng, shapes[b], fan_in)
    return {k: out[k] for k in shapes}


def _conv(params: Mapping[str, Node], name: str, stride: int = 1) -> Conv2dParams:
    w = params[name + ".w"]
    return Conv2dParams(w, params[name + ".b"], stride=stride, padding=w.shape[2] // 2)


def repair_params(params: Mapping[str, Node], column: int, level: int) -> RepairMaskParams:
    pre = f"{column_prefix(column)}l{level}."
    return RepairMaskParams(_conv(params, pre + "att"), _conv(params, pre + "bias"))


def downsample(
    x: Node, kind: DownsamplerKind, params: Mapping[str, Node], prefix: str, activate: bool = True
) -> Node:
    if kind is DownsamplerKind.WFD:
        return wfd_down(x, _conv(params, prefix + "k3", 2), activate)
    if kind is DownsamplerKind.MP:
        return mp_down(x, _conv(params, prefix + "k1"), activate)
    return rfd_down(x, _conv(params, prefix + "k1"), _conv(params, prefix + "k3", 2), activate)


def build_rfpm(
    image: Node | Sequence[Node], config: RFPMConfig, params: Mapping[str, Node]
) -> list[FeaturePyramid]:
    """Run every column over ``image`` and return one pyramid per column.

    ``image`` may be a list with one image per column (asymmetric chromatic
    augmentation); a single node is shared by all columns. At a mask level the
    target column's downsampler output is left un-activated; the repair step's
    leaky-relu takes its place.
    """
    ncol = len(config.columns)
    images = list(image) if isinstance(image, (list, tuple)) else [image] * ncol
    if len(images) != ncol:
        raise ConfigError(f"got {len(images)} images for {ncol} columns")
    L = config.levels
    for img in images:
        H, W = img.shape[2:]
        if H % 2 ** (L - 1) or W % 2 ** (L - 1):
            raise ShapeError(f"image {H}x{W} is not a multiple of {2 ** (L - 1)}")
        if img.shape[1] != config.image_channels:
            raise ShapeError(f"expected {config.image_channels} image channels, got {img.shape[1]}")
    missing = set(param_shapes(config)) - set(params)
    if missing:
        raise ConfigError(f"missing parameters: {sorted(missing)[:5]}")

    masks = config.active_mask_levels
    pyramids = [FeaturePyramid([images[c]]) for c in range(ncol)]
    for l in range(1, L):
        for c, col in enumerate(config.columns):
            prefix = f"{column_prefix(c)}l{l}."
            repaired = c > 0 and l in masks
            z = downsample(pyramids[c][l - 1], col.kinds[l - 1], params, prefix, activate=not repaired)
            if repaired:
                att, bias = make_repair_masks(pyramids[c - 1][l], repair_params(params, c, l))
                z = apply_repair(z, att, bias, _conv(params, prefix + "fuse"))
            pyramids[c].levels.append(z)
    return pyramids


def fuse_level(pyramids: Sequence[FeaturePyramid], level: int) -> Node:
    """Channel-concatenate one level of every column, left to right."""
    return concat_channels([p[level] for p in pyramids])
