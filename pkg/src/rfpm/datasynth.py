"""Moving-sprite scenes with exact ground-truth flow, and training augmentation.

Scenes are rendered without antialiasing: every pixel belongs to exactly one
surface (background or a sprite), so the ground-truth flow at a frame-t pixel
is simply the velocity of the topmost surface covering it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, GenerationError

SHAPES = ("rect", "disk", "bar")


@dataclass(frozen=True)
class Sprite:
    shape: str
    size: tuple[float, float]  # (width, height); a disk uses width as its diameter
    position: tuple[float, float]  # top-left corner (rect/bar) or centre (disk), frame t
    color: tuple[float, float, float]
    velocity: tuple[float, float]
    texture_seed: int = 0

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise GenerationError(f"unknown sprite shape {self.shape!r}")
        if min(self.size) <= 0:
            raise GenerationError("sprite size must be positive")

    def covers(self, xs: np.ndarray, ys: np.ndarray, t: float) -> np.ndarray:
        px = self.position[0] + t * self.velocity[0]
        py = self.position[1] + t * self.velocity[1]
        if self.shape == "disk":
            r = 0.5 * self.size[0]
            return (xs - px) ** 2 + (ys - py) ** 2 <= r * r
        return (xs >= px) & (xs < px + self.size[0]) & (ys >= py) & (ys < py + self.size[1])


@dataclass(frozen=True)
class SyntheticScene:
    height: int
    width: int
    bg_velocity: tuple[float, float] = (0.0, 0.0)
    bg_seed: int = 0
    sprites: tuple[Sprite, ...] = ()
    texture_amplitude: float = 0.35
    max_speed: float = 24.0

    def validate(self) -> None:
        speeds = [self.bg_velocity] + [s.velocity for s in self.sprites]
        if any(max(abs(u), abs(v)) > self.max_speed for u, v in speeds):
            raise GenerationError(f"a velocity exceeds the bound {self.max_speed}")
        ys, xs = _pixel_centres(self.height, self.width)
        for i, s in enumerate(self.sprites):
            if not s.covers(xs, ys, 0.0).any():
                raise GenerationError(f"sprite {i} lies fully outside the frame")


@dataclass
class Sample:
    image1: np.ndarray  # (3, H, W) in [0, 1]
    image2: np.ndarray
    flow: np.ndarray  # (2, H, W), pixels
    valid: np.ndarray  # (H, W), 1.0 where ground truth is defined
    thin: bool = False
    seed: int = 0
    scene: SyntheticScene | None = None


def _pixel_centres(height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    ys, xs = np.meshgrid(np.arange(height, dtype=np.float64), np.arange(width, dtype=np.float64), indexing="ij")
    return ys, xs


# ---------------------------------------------------------------------------
# textures


def value_noise(seed: int, xs: np.ndarray, ys: np.ndarray, cells: Sequence[float] = (2.0, 4.0, 8.0)) -> np.ndarray:
    """Colour value noise defined on the continuous plane; returns (3, *xs.shape) in [0, 1].

    Each octave hashes integer lattice points to random values and blends them
    bilinearly, so the texture can be evaluated at any real position.
    """
    out = np.zeros((3,) + xs.shape)
    total = 0.0
    for o, cell in enumerate(cells):
        gx, gy = xs / cell, ys / cell
        x0, y0 = np.floor(gx), np.floor(gy)
        fx, fy = gx - x0, gy - y0
        weight = 1.0 / (o + 1)
        for ch in range(3):
            def lattice(ix, iy, ch=ch, o=o):
                h = (ix.astype(np.int64) * 73856093) ^ (iy.astype(np.int64) * 19349663) ^ ((seed * 8 + o) * 83492791 + ch)
                h = (h * 2654435761) & 0xFFFFFFFF
                h ^= h >> 15
                h = (h * 2246822519) & 0xFFFFFFFF
                h ^= h >> 13
                return (h & 0xFFFF) / 65535.0

            v = (
                lattice(x0, y0) * (1 - fx) * (1 - fy)
                + lattice(x0 + 1, y0) * fx * (1 - fy)
                + lattice(x0, y0 + 1) * (1 - fx) * fy
                + lattice(x0 + 1, y0 + 1) * fx * fy
            )
            out[ch] += weight * v
        total += weight
    return out / total


# ---------------------------------------------------------------------------
# rendering


def label_map(scene: SyntheticScene, t: float) -> np.ndarray:
    """Index of the topmost surface per pixel: 0 background, k for sprite k-1."""
    ys, xs = _pixel_centres(scene.height, scene.width)
    labels = np.zeros((scene.height, scene.width), dtype=np.int64)
    for k, s in enumerate(scene.sprites, start=1):
        labels[s.covers(xs, ys, t)] = k
    return labels


def render_frame(scene: SyntheticScene, t: float) -> np.ndarray:
    ys, xs = _pixel_centres(scene.height, scene.width)
    u, v = scene.bg_velocity
    img = value_noise(scene.bg_seed, xs - t * u, ys - t * v)
    labels = label_map(scene, t)
    amp = scene.texture_amplitude
    for k, s in enumerate(scene.sprites, start=1):
        m = labels == k
        if not m.any():
            continue
        sx = xs[m] - t * s.velocity[0]
        sy = ys[m] - t * s.velocity[1]
        tex = value_noise(s.texture_seed, sx, sy)
        img[:, m] = np.clip(np.asarray(s.color)[:, None] + amp * (tex - 0.5), 0.0, 1.0)
    return img


def render_pair(scene: SyntheticScene) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Frames t and t+1, ground-truth flow (2, H, W) and the all-ones valid mask."""
    scene.validate()
    labels = label_map(scene, 0.0)
    velocities = np.array([scene.bg_velocity] + [s.velocity for s in scene.sprites], dtype=np.float64)
    flow = velocities[labels].transpose(2, 0, 1).copy()
    valid = np.ones((scene.height, scene.width))
    return render_frame(scene, 0.0), render_frame(scene, 1.0), flow, valid


# ---------------------------------------------------------------------------
# scene sampling


@dataclass(frozen=True)
class SceneStats:
    """Distribution of random scenes. Velocities are integer pixels per frame."""

    bg_speed: int = 6
    sprite_speed: int = 8
    sprites: tuple[int, int] = (1, 4)
    sprite_size: tuple[int, int] = (6, 20)
    bars: tuple[int, int] = (1, 3)
    bar_width: tuple[int, int] = (1, 2)
    bar_length: tuple[int, int] = (16, 40)
    opposing_pair_prob: float = 0.3


def _int(rng: np.random.Generator, lo: int, hi: int) -> int:
    return int(rng.integers(lo, hi + 1))


def _color(rng) -> tuple[float, float, float]:
    return tuple(float(c) for c in rng.uniform(0.1, 0.9, size=3))


def random_scene(rng: np.random.Generator, size: int, stats: SceneStats, thin: bool) -> SyntheticScene:
    bg = (_int(rng, -stats.bg_speed, stats.bg_speed), _int(rng, -stats.bg_speed, stats.bg_speed))
    sprites: list[Sprite] = []

    def sprite_seed():
        return int(rng.integers(1, 2**31))

    def velocity(speed):
        return (float(_int(rng, -speed, speed)), float(_int(rng, -speed, speed)))

    if not thin:
        for _ in range(_int(rng, *stats.sprites)):
            shape = "rect" if rng.random() < 0.5 else "disk"
            w = _int(rng, *stats.sprite_size)
            h = w if shape == "disk" else _int(rng, *stats.sprite_size)
            if shape == "disk":
                pos = (float(rng.uniform(0, size)), float(rng.uniform(0, size)))
            else:
                pos = (float(_int(rng, -w // 2, size - w // 2 - 1)), float(_int(rng, -h // 2, size - h // 2 - 1)))
            sprites.append(Sprite(shape, (float(w), float(h)), pos, _color(rng), velocity(stats.sprite_speed), sprite_seed()))
    else:
        for _ in range(_int(rng, *stats.bars)):
            vertical = rng.random() < 0.5
            width = _int(rng, *stats.bar_width)
            length = min(_int(rng, *stats.bar_length), size)
            size_wh = (float(width), float(length)) if vertical else (float(length), float(width))
            pos = (float(_int(rng, 0, size - int(size_wh[0]))), float(_int(rng, 0, size - int(size_wh[1]))))
            # move against the background, plus jitter
            vel = (
                float(np.clip(-bg[0] + _int(rng, -2, 2), -stats.sprite_speed, stats.sprite_speed)),
                float(np.clip(-bg[1] + _int(rng, -2, 2), -stats.sprite_speed, stats.sprite_speed)),
            )
            if vel == tuple(float(b) for b in bg):
                vel = (vel[0] + 2.0, vel[1])
            sprites.append(Sprite("bar", size_wh, pos, _color(rng), vel, sprite_seed()))
            if rng.random() < stats.opposing_pair_prob:
                # neighbour bar with the opposite velocity, touching the first one
                offset = (size_wh[0], 0.0) if vertical else (0.0, size_wh[1])
                npos = (pos[0] + offset[0], pos[1] + offset[1])
                if npos[0] < size and npos[1] < size:
                    sprites.append(Sprite("bar", size_wh, npos, _color(rng), (-vel[0], -vel[1]), sprite_seed()))
    return SyntheticScene(size, size, (float(bg[0]), float(bg[1])), sprite_seed(), tuple(sprites))


def is_thin_index(i: int, fraction: float) -> bool:
    """Deterministic split: exactly round(count * fraction) thin scenes, spread evenly."""
    return math.floor((i + 1) * fraction + 1e-9) > math.floor(i * fraction + 1e-9)


@dataclass(frozen=True)
class DatasetSpec:
    count: int
    size: int = 64
    seed: int = 0
    thin_fraction: float = 0.5
    stats: SceneStats = field(default_factory=SceneStats)


def make_sample(spec: DatasetSpec, index: int) -> Sample:
    thin = is_thin_index(index, spec.thin_fraction)
    rng = np.random.default_rng([spec.seed, index])
    for _ in range(100):
        try:
            scene = random_scene(rng, spec.size, spec.stats, thin)
            scene.validate()
            break
        except GenerationError:
            continue
    else:
        raise GenerationError(f"could not draw a valid scene for index {index}")
    i1, i2, flow, valid = render_pair(scene)
    return Sample(i1, i2, flow, valid, thin, index, scene)


def gen_dataset(spec: DatasetSpec) -> list[Sample]:
    if spec.count <= 0:
        raise ConfigError("count must be positive")
    if not 0.0 <= spec.thin_fraction <= 1.0:
        raise ConfigError("thin_fraction must lie in [0, 1]")
    return [make_sample(spec, i) for i in range(spec.count)]


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentationSpec:
    crop: tuple[int, int] | None = None  # (height, width); None keeps the full frame
    flip_prob: float = 0.5
    brightness: tuple[float, float] = (0.8, 1.2)
    contrast: tuple[float, float] = (0.8, 1.2)
    noise_sigma: float = 0.02
    ada_probability: float = 0.2

    def __post_init__(self):
        if not 0.0 <= self.ada_probability <= 1.0:
            raise ConfigError("ada_probability must lie in [0, 1]")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ConfigError("flip_prob must lie in [0, 1]")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be non-negative")

    @classmethod
    def identity(cls) -> "AugmentationSpec":
        return cls(None, 0.0, (1.0, 1.0), (1.0, 1.0), 0.0, 0.0)


@dataclass
class AugmentedSample:
    images1: list[np.ndarray]  # one (3, H, W) image per pyramid column
    images2: list[np.ndarray]
    flow: np.ndarray
    valid: np.ndarray
    asymmetric: bool = False


def _chromatic(rng: np.random.Generator, spec: AugmentationSpec, images: Sequence[np.ndarray]) -> list[np.ndarray]:
    b = rng.uniform(*spec.brightness)
    c = rng.uniform(*spec.contrast)
    out = []
    for img in images:
        mean = img.mean()
        x = (img * c + mean * (1.0 - c)) * b
        if spec.noise_sigma > 0:
            x = x + rng.normal(0.0, spec.noise_sigma, size=img.shape)
        out.append(np.clip(x, 0.0, 1.0))
    return out


def flip_horizontal(image: np.ndarray, flow: np.ndarray | None = None):
    """Mirror along x. A flow field also has its horizontal component negated."""
    img = image[..., ::-1].copy()
    if flow is None:
        return img
    f = flow[..., ::-1].copy()
    f[0] = -f[0]
    return img, f


def augment(sample: Sample, spec: AugmentationSpec, rng: np.random.Generator, columns: int = 3) -> AugmentedSample:
    """One geometric transform for everything; chromatic variants per column with
    probability ``ada_probability``, otherwise one shared variant."""
    i1, i2, flow, valid = sample.image1, sample.image2, sample.flow, sample.valid
    H, W = flow.shape[1:]
    if spec.crop is not None:
        ch, cw = spec.crop
        if ch > H or cw > W:
            raise ConfigError(f"crop {spec.crop} larger than image {(H, W)}")
        y0 = int(rng.integers(0, H - ch + 1))
        x0 = int(rng.integers(0, W - cw + 1))
        win = (slice(y0, y0 + ch), slice(x0, x0 + cw))
        i1, i2, flow, valid = i1[(slice(None), *win)], i2[(slice(None), *win)], flow[(slice(None), *win)], valid[win]
    if spec.flip_prob > 0 and rng.random() < spec.flip_prob:
        i1 = flip_horizontal(i1)
        i2, flow = flip_horizontal(i2, flow)
        valid = valid[:, ::-1]
    asym = spec.ada_probability > 0 and rng.random() < spec.ada_probability
    if asym:
        pairs = [_chromatic(rng, spec, (i1, i2)) for _ in range(columns)]
    else:
        pairs = [_chromatic(rng, spec, (i1, i2))] * columns
    return AugmentedSample(
        [p[0] for p in pairs], [p[1] for p in pairs], np.ascontiguousarray(flow), np.ascontiguousarray(valid), asym
    )
