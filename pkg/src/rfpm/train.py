"""Losses, optimisers, training, transfer onto extra columns, and ablations."""

from __future__ import annotations

import csv
import io
import logging
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .datasynth import AugmentationSpec, Sample, augment
from .errors import ConfigError, NumericError, ShapeError
from .flownet import EstimatorConfig, as_nodes, estimate, init_params, param_shapes, to_full_resolution
from .metrics import EvalResult, evaluate
from .tensor import Node, add, add_scalar, backward, constant, mean_all, power, scale, square, sub, sum_channels

log = logging.getLogger(__name__)

LOSS_Q = 0.4
LOSS_EPS = 0.01


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 2000
    batch_size: int = 4
    lr: float = 1e-3
    lr_milestones: tuple[int, ...] = (1200, 1600)
    lr_gamma: float = 0.5
    level_weights: tuple[float, ...] = (1.0, 1.0, 1.0)  # coarse to fine
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 42
    augmentation: AugmentationSpec = field(default_factory=lambda: AugmentationSpec(ada_probability=0.0))
    eval_every: int = 100
    loss_q: float = LOSS_Q
    loss_eps: float = LOSS_EPS
    freeze: tuple[str, ...] = ()  # parameter-name prefixes
    freeze_iters: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError("learning rate must be positive")
        if self.iterations < 0 or self.batch_size < 1:
            raise ConfigError("iterations must be >= 0 and batch size >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be positive")

    def lr_at(self, iteration: int) -> float:
        drops = sum(1 for m in self.lr_milestones if iteration >= m)
        return self.lr * self.lr_gamma**drops


# ---------------------------------------------------------------------------
# loss


def downsample_flow(gt: np.ndarray, levels: int) -> np.ndarray:
    """2x2 average pooling per octave with vectors halved, so values stay in that level's pixels."""
    for _ in range(levels):
        B, C, H, W = gt.shape
        gt = gt.reshape(B, C, H // 2, 2, W // 2, 2).mean(axis=(3, 5)) * 0.5
    return gt


def robust_epe(pred: Node, gt: np.ndarray, q: float = LOSS_Q, eps: float = LOSS_EPS) -> Node:
    """Mean over pixels of ``(|pred - gt|^2 + eps^2) ** q``."""
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and target {gt.shape} differ")
    d2 = sum_channels(square(sub(pred, constant(gt))))
    return mean_all(power(add_scalar(d2, eps * eps), q))


def multiscale_loss(
    flows: Sequence[Node],
    gt: np.ndarray,
    weights: Sequence[float],
    levels: Sequence[int],
    q: float = LOSS_Q,
    eps: float = LOSS_EPS,
) -> Node:
    """Weighted sum of per-level robust losses against the pooled full-resolution ground truth."""
    if not (len(flows) == len(weights) == len(levels)):
        raise ConfigError("flows, weights and levels must have equal length")
    total: Node | None = None
    for flow, w, level in zip(flows, weights, levels):
        term = scale(robust_epe(flow, downsample_flow(gt, level), q, eps), float(w))
        total = term if total is None else add(total, term)
    return total


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class OptimizerState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    counts: dict[str, int] = field(default_factory=dict)


def optimizer_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: OptimizerState,
    config: TrainConfig,
    lr: float | None = None,
) -> tuple[dict[str, np.ndarray], OptimizerState]:
    """One SGD or Adam update. Parameters missing from ``grads`` are left untouched."""
    lr = config.lr if lr is None else lr
    for name, g in grads.items():
        if not np.isfinite(g).all():
            bad = int((~np.isfinite(g)).sum())
            raise NumericError(f"non-finite gradient for {name} ({bad} entries) at step {state.step}")
    new = dict(params)
    for name, g in grads.items():
        p = params[name]
        if p.shape != g.shape:
            raise ShapeError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        if config.optimizer == "sgd":
            new[name] = p - lr * g
            continue
        t = state.counts.get(name, 0) + 1
        m = config.beta1 * state.m.get(name, 0.0) + (1 - config.beta1) * g
        v = config.beta2 * state.v.get(name, 0.0) + (1 - config.beta2) * g * g
        state.m[name], state.v[name], state.counts[name] = m, v, t
        m_hat = m / (1 - config.beta1**t)
        v_hat = v / (1 - config.beta2**t)
        new[name] = p - lr * m_hat / (np.sqrt(v_hat) + config.adam_eps)
    state.step += 1
    return new, state


# ---------------------------------------------------------------------------
# evaluation and batching


def _stack(samples: Sequence, attr: str) -> np.ndarray:
    return np.stack([getattr(s, attr) for s in samples])


def predict(params: Mapping[str, np.ndarray], config: EstimatorConfig, image1: np.ndarray, image2: np.ndarray) -> np.ndarray:
    """Full-resolution flow (B, 2, H, W) from the finest prediction level."""
    nodes = as_nodes(params, trainable=False)
    flows = estimate(constant(image1), constant(image2), nodes, config)
    return to_full_resolution(flows[-1], config.pred_levels[-1]).value


def evaluate_model(
    params: Mapping[str, np.ndarray],
    config: EstimatorConfig,
    samples: Sequence[Sample],
    batch_size: int = 8,
) -> tuple[EvalResult, np.ndarray]:
    preds = []
    for i in range(0, len(samples), batch_size):
        chunk = samples[i : i + batch_size]
        preds.append(predict(params, config, _stack(chunk, "image1"), _stack(chunk, "image2")))
    pred = np.concatenate(preds)
    return evaluate(pred, _stack(samples, "flow"), _stack(samples, "valid")), pred


def zero_flow_aepe(samples: Sequence[Sample]) -> float:
    gt = _stack(samples, "flow")
    return evaluate(np.zeros_like(gt), gt, _stack(samples, "valid")).aepe


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    history: list[tuple[int, float, float, float]]
    final: EvalResult | None
    matched_at: int | None = None  # first logged iteration reaching the target AEPE


def history_csv(history: Sequence[tuple[int, float, float, float]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["iteration", "loss", "aepe", "f1_all"])
    for it, loss, a, f1 in history:
        w.writerow([it, f"{loss:.10g}", f"{a:.10g}", f"{f1:.10g}"])
    return buf.getvalue()


def _is_frozen(name: str, config: TrainConfig, iteration: int) -> bool:
    return iteration < config.freeze_iters and any(name.startswith(p) for p in config.freeze)


def train(
    config: TrainConfig,
    model: EstimatorConfig,
    dataset: Sequence[Sample],
    heldout: Sequence[Sample] = (),
    init: Mapping[str, np.ndarray] | None = None,
    out_dir: str | os.PathLike | None = None,
    config_text: str | None = None,
    target_aepe: float | None = None,
    progress: Callable[[int, float], None] | None = None,
) -> TrainResult:
    """Train ``model`` on ``dataset``; deterministic given ``config.seed``.

    Held-out AEPE and F1-all are logged every ``eval_every`` iterations and at
    the end. With ``out_dir`` the final checkpoint (``model.bin``) and the
    history (``history.csv``) are written there.
    """
    if not dataset:
        raise ConfigError("training needs a non-empty dataset")
    if len(config.level_weights) != len(model.pred_levels):
        raise ConfigError("one loss weight per prediction level is required")
    params = {k: v.copy() for k, v in (init if init is not None else init_params(model, config.seed)).items()}
    expected = param_shapes(model)
    if set(params) != set(expected):
        raise ConfigError("initial parameters do not match the model")
    rng = np.random.default_rng([config.seed, 7])
    ncol = len(model.rfpm.columns)
    state = OptimizerState()
    history: list[tuple[int, float, float, float]] = []
    last_good = {k: v.copy() for k, v in params.items()}
    window: list[float] = []
    matched_at: int | None = None
    out = Path(out_dir) if out_dir is not None else None

    def log_row(it: int, loss: float) -> None:
        nonlocal matched_at
        if not heldout:
            history.append((it, loss, math.nan, math.nan))
            return
        res, _ = evaluate_model(params, model, heldout)
        history.append((it, loss, res.aepe, res.f1_all))
        if target_aepe is not None and matched_at is None and res.aepe <= target_aepe:
            matched_at = it
        log.info("iter %d loss %.4f heldout aepe %.4f f1 %.2f", it, loss, res.aepe, res.f1_all)

    log_row(0, math.nan)
    order = rng.permutation(len(dataset))
    cursor = 0
    for it in range(1, config.iterations + 1):
        batch = []
        for _ in range(config.batch_size):
            if cursor == len(order):
                order, cursor = rng.permutation(len(dataset)), 0
            batch.append(augment(dataset[order[cursor]], config.augmentation, rng, ncol))
            cursor += 1
        im1 = [constant(np.stack([b.images1[c] for b in batch])) for c in range(ncol)]
        im2 = [constant(np.stack([b.images2[c] for b in batch])) for c in range(ncol)]
        gt = np.stack([b.flow for b in batch])

        frozen = {k for k in params if _is_frozen(k, config, it - 1)}
        nodes = {k: Node(v, requires_grad=k not in frozen) for k, v in params.items()}
        flows = estimate(im1, im2, nodes, model)
        loss = multiscale_loss(flows, gt, config.level_weights, model.pred_levels, config.loss_q, config.loss_eps)
        value = float(loss.value)
        if not math.isfinite(value):
            if out is not None:
                save_checkpoint(out / "model.bin", last_good, config_text)
            raise NumericError(f"loss became non-finite at iteration {it}")
        backward(loss)
        grads = {k: n.grad for k, n in nodes.items() if n.requires_grad and n.grad is not None}
        params, state = optimizer_step(params, grads, state, config, config.lr_at(it - 1))
        window.append(value)
        if progress is not None:
            progress(it, value)
        if it % config.eval_every == 0 or it == config.iterations:
            log_row(it, float(np.mean(window)))
            window = []
            last_good = {k: v.copy() for k, v in params.items()}

    final = None
    if heldout:
        final, _ = evaluate_model(params, model, heldout)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out / "model.bin", params, config_text)
        (out / "history.csv").write_text(history_csv(history))
    return TrainResult(params, history, final, matched_at)


# ---------------------------------------------------------------------------
# transfer onto extra columns


@dataclass(frozen=True)
class TransferPlan:
    base_checkpoint: str
    target: EstimatorConfig
    init_seed: int = 0
    train: TrainConfig = field(default_factory=lambda: TrainConfig(augmentation=AugmentationSpec(ada_probability=0.2)))
    target_aepe: float | None = None


def transfer_init(plan: TransferPlan) -> dict[str, np.ndarray]:
    """Fresh target parameters with every tensor found in the base checkpoint copied over."""
    expected = param_shapes(plan.target)
    base = load_checkpoint(plan.base_checkpoint, expected)
    if not set(base) < set(expected):
        raise ConfigError("base checkpoint must cover a strict subset of the target parameters")
    params = init_params(plan.target, plan.init_seed)
    params.update({k: v.copy() for k, v in base.items()})
    return params


def transfer(
    plan: TransferPlan,
    dataset: Sequence[Sample],
    heldout: Sequence[Sample] = (),
    out_dir: str | os.PathLike | None = None,
    config_text: str | None = None,
) -> TrainResult:
    """Fine-tune a multi-column model whose base column and decoder come from a trained checkpoint."""
    return train(
        plan.train,
        plan.target,
        dataset,
        heldout,
        init=transfer_init(plan),
        out_dir=out_dir,
        config_text=config_text,
        target_aepe=plan.target_aepe,
    )


# ---------------------------------------------------------------------------
# ablation


@dataclass
class AblationRow:
    name: str
    params: int
    aepe: float
    f1_all: float
    aepe_thin: float
    seeds: tuple[int, ...]
    extra: dict[str, str] = field(default_factory=dict)


def count_params(model: EstimatorConfig) -> int:
    return int(sum(np.prod(s) for s in param_shapes(model).values()))


def ablate(
    grid: Sequence[tuple[str, EstimatorConfig]],
    config: TrainConfig,
    dataset: Sequence[Sample],
    heldout: Sequence[Sample],
    seeds: Sequence[int] = (1, 2, 3),
    out_dir: str | os.PathLike | None = None,
) -> list[AblationRow]:
    """Train every named config under each seed on the same data; average the held-out metrics."""
    thin = [s for s in heldout if s.thin]
    rows = []
    for name, model in grid:
        runs = []
        for seed in seeds:
            run_dir = Path(out_dir) / _slug(name) / f"seed{seed}" if out_dir is not None else None
            res = train(replace(config, seed=seed), model, dataset, heldout, out_dir=run_dir)
            thin_res = evaluate_model(res.params, model, thin)[0].aepe if thin else math.nan
            runs.append((res.final.aepe, res.final.f1_all, thin_res))
        a, f, t = (float(np.mean(col)) for col in zip(*runs))
        rows.append(AblationRow(name, count_params(model), a, f, t, tuple(seeds)))
    if out_dir is not None:
        write_table(rows, Path(out_dir))
    return rows


def _slug(name: str) -> str:
    return "".join(ch if ch.isalnum() else "_" for ch in name).strip("_")


def format_table(rows: Sequence[AblationRow]) -> str:
    extra_keys = sorted({k for r in rows for k in r.extra})
    header = ["config", "params", "aepe", "f1_all", "aepe_thin", *extra_keys]
    body = [
        [r.name, str(r.params), f"{r.aepe:.4f}", f"{r.f1_all:.2f}", f"{r.aepe_thin:.4f}", *(r.extra.get(k, "") for k in extra_keys)]
        for r in rows
    ]
    widths = [max(len(x) for x in col) for col in zip(header, *body)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(line, widths)).rstrip() for line in [header, *body]]
    return "\n".join(lines) + "\n"


def table_csv(rows: Sequence[AblationRow]) -> str:
    extra_keys = sorted({k for r in rows for k in r.extra})
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["config", "params", "aepe", "f1_all", "aepe_thin", *extra_keys])
    for r in rows:
        w.writerow([r.name, r.params, f"{r.aepe:.10g}", f"{r.f1_all:.10g}", f"{r.aepe_thin:.10g}", *(r.extra.get(k, "") for k in extra_keys)])
    return buf.getvalue()


def write_table(rows: Sequence[AblationRow], out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "ablation.txt").write_text(format_table(rows))
    (out_dir / "ablation.csv").write_text(table_csv(rows))


def ablation_grid(channels: Sequence[int] = (16, 24, 32), seed: int = 0) -> list[tuple[str, EstimatorConfig]]:
    """The column-count, mask-level and downsampler-kind axes, one config per row."""
    from .pyramid import RFPMConfig

    def model(kinds, masks):
        return EstimatorConfig(RFPMConfig.from_kinds(kinds, channels, masks, seed))

    grid = [
        ("L", model("W", ())),
        ("L/M", model("W/R", ())),
        ("L/M + mask", model("W/R", (1, 2))),
        ("L/M/R", model("W/R/W", ())),
        ("L/M/R + mask", model("W/R/W", (1, 2))),
    ]
    for masks in ((1,), (2,), (3,), (1, 2), (1, 2, 3)):
        grid.append((f"Level {'+'.join(map(str, masks))}", model("W/R/W", masks)))
    for kinds in ("W/M/M", "W/M/R", "W/R/R", "W/R/W"):
        grid.append((f"{kinds} + mask", model(kinds, (1, 2))))
    return grid
