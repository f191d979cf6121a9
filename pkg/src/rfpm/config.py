"""Plain-text ``key = value`` run configuration.

The same text is written next to every checkpoint, so a checkpoint can be
reloaded into the model that produced it. Blank lines and ``#`` comments are
ignored; list values are comma separated.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from typing import Any, Mapping

from .datasynth import AugmentationSpec
from .errors import ConfigError
from .flownet import EstimatorConfig
from .pyramid import RFPMConfig
from .train import TrainConfig


@dataclass(frozen=True)
class RunConfig:
    # model
    columns: str = "W"
    channels: tuple[int, ...] = (16, 24, 32)
    mask_levels: tuple[int, ...] = ()
    radius: int = 3
    pred_levels: tuple[int, ...] = (3, 2, 1)
    refine_iters: int = 1
    normalize_corr: bool = True
    # training
    seed: int = 42
    iters: int = 2000
    batch: int = 4
    lr: float = 1e-3
    lr_milestones: tuple[int, ...] = (1200, 1600)
    lr_gamma: float = 0.5
    level_weights: tuple[float, ...] = (1.0, 1.0, 1.0)
    optimizer: str = "adam"
    eval_every: int = 100
    ada: float = 0.0
    flip_prob: float = 0.5
    freeze: tuple[str, ...] = ()
    freeze_iters: int = 0
    # data
    train_count: int = 1000
    heldout_count: int = 100
    size: int = 64
    data_seed: int = 1000
    heldout_seed: int = 2000
    thin_fraction: float = 0.5
    repeats: int = 3  # ablation seeds are seed, seed + 1, ...

    def model(self) -> EstimatorConfig:
        rfpm = RFPMConfig.from_kinds(self.columns, self.channels, self.mask_levels, self.seed)
        return EstimatorConfig(rfpm, self.radius, self.pred_levels, self.refine_iters, self.normalize_corr)

    def training(self) -> TrainConfig:
        aug = AugmentationSpec(flip_prob=self.flip_prob, ada_probability=self.ada)
        return TrainConfig(
            iterations=self.iters,
            batch_size=self.batch,
            lr=self.lr,
            lr_milestones=self.lr_milestones,
            lr_gamma=self.lr_gamma,
            level_weights=self.level_weights,
            optimizer=self.optimizer,
            seed=self.seed,
            augmentation=aug,
            eval_every=self.eval_every,
            freeze=self.freeze,
            freeze_iters=self.freeze_iters,
        )


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _convert(name: str, raw: str) -> Any:
    default = getattr(RunConfig(), name)
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, tuple):
            items = [x.strip() for x in raw.split(",") if x.strip()]
            kind = {"channels": int, "mask_levels": int, "pred_levels": int, "lr_milestones": int,
                    "level_weights": float, "freeze": str}[name]
            return tuple(kind(x) for x in items)
        return type(default)(raw)
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    """Apply the ``key = value`` lines of ``text`` on top of ``base``."""
    updates: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        updates[key] = _convert(key, value)
    return with_overrides(base or RunConfig(), updates)


def with_overrides(run: RunConfig, overrides: Mapping[str, Any]) -> RunConfig:
    """Replace fields, skipping ``None`` values, and check the result builds."""
    run = replace(run, **{k: v for k, v in overrides.items() if v is not None})
    try:
        run.model()
        run.training()
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None
    return run


def format_config(run: RunConfig) -> str:
    lines = []
    for name in _FIELDS:
        value = getattr(run, name)
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        elif isinstance(value, bool):
            value = str(value).lower()
        lines.append(f"{name} = {value}")
    return "\n".join(lines) + "\n"
