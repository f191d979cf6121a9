"""Implementations behind the ``rfpm`` subcommands."""

from __future__ import annotations

import csv
import logging
from dataclasses import replace
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, read_sidecar
from .config import RunConfig, format_config, parse_config, with_overrides
from .datasynth import DatasetSpec, Sample, gen_dataset
from .errors import ConfigError, FormatError
from .flowio import flow_to_color, read_flo, read_ppm, write_flo, write_ppm
from .flownet import param_shapes
from .gradsuite import run_checks
from .metrics import evaluate
from .train import (
    TransferPlan,
    ablate,
    ablation_grid,
    evaluate_model,
    format_table,
    train,
    transfer,
    zero_flow_aepe,
)

log = logging.getLogger("rfpm")

MANIFEST = "manifest.txt"


# ---------------------------------------------------------------------------
# dataset directories


def save_dataset(samples: list[Sample], out: Path, seed: int = 0) -> None:
    """One ``NNNNN_img1.ppm``, ``NNNNN_img2.ppm``, ``NNNNN_flow.flo`` triplet per sample plus a manifest.

    Manifest rows: index, thin flag, dataset seed, background velocity, sprite count.
    """
    out.mkdir(parents=True, exist_ok=True)
    lines = ["# index thin seed bg_u bg_v sprites"]
    for i, s in enumerate(samples):
        write_ppm(s.image1, out / f"{i:05d}_img1.ppm")
        write_ppm(s.image2, out / f"{i:05d}_img2.ppm")
        write_flo(s.flow, out / f"{i:05d}_flow.flo")
        bg = s.scene.bg_velocity if s.scene is not None else (0.0, 0.0)
        n = len(s.scene.sprites) if s.scene is not None else 0
        lines.append(f"{i:05d} {int(s.thin)} {seed} {bg[0]:g} {bg[1]:g} {n}")
    (out / MANIFEST).write_text("\n".join(lines) + "\n")


def load_dataset(root: str | Path) -> list[Sample]:
    root = Path(root)
    manifest = root / MANIFEST
    if not manifest.exists():
        raise FormatError(f"{manifest} not found")
    samples = []
    for line in manifest.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        stem, thin = line.split()[:2]
        im1 = read_ppm(root / f"{stem}_img1.ppm").transpose(2, 0, 1) / 255.0
        im2 = read_ppm(root / f"{stem}_img2.ppm").transpose(2, 0, 1) / 255.0
        flow = read_flo(root / f"{stem}_flow.flo")
        if flow.shape[1:] != im1.shape[1:] or im2.shape != im1.shape:
            raise FormatError(f"sample {stem}: image and flow sizes differ")
        samples.append(Sample(im1, im2, flow, np.ones(flow.shape[1:]), bool(int(thin)), int(stem)))
    if not samples:
        raise FormatError(f"{manifest} lists no samples")
    return samples


# ---------------------------------------------------------------------------
# configuration


def _flag_overrides(args) -> dict:
    return {
        "seed": getattr(args, "seed", None),
        "columns": getattr(args, "columns", None),
        "mask_levels": getattr(args, "mask_levels", None),
        "ada": getattr(args, "ada", None),
        "iters": getattr(args, "iters", None),
        "batch": getattr(args, "batch", None),
        "lr": getattr(args, "lr", None),
        "train_count": getattr(args, "count", None),
        "size": getattr(args, "size", None),
    }


def resolve_config(args, base: RunConfig | None = None) -> RunConfig:
    """Defaults, then ``--config`` file, then explicit flags."""
    run = base or RunConfig()
    if getattr(args, "config", None):
        run = parse_config(Path(args.config).read_text(), run)
    return with_overrides(run, _flag_overrides(args))


def _datasets(run: RunConfig, data_dir: str | None) -> tuple[list[Sample], list[Sample]]:
    if data_dir:
        train_set = load_dataset(data_dir)
        size = train_set[0].flow.shape[1]
    else:
        train_set = gen_dataset(DatasetSpec(run.train_count, run.size, run.data_seed, run.thin_fraction))
        size = run.size
    heldout = gen_dataset(DatasetSpec(run.heldout_count, size, run.heldout_seed, run.thin_fraction))
    return train_set, heldout


def _load_model(ckpt: str) -> tuple[RunConfig, dict[str, np.ndarray]]:
    text = read_sidecar(ckpt)
    if text is None:
        raise ConfigError(f"{ckpt} has no configuration sidecar")
    run = parse_config(text)
    params = load_checkpoint(ckpt, param_shapes(run.model()))
    missing = set(param_shapes(run.model())) - set(params)
    if missing:
        raise ConfigError(f"checkpoint lacks {len(missing)} model tensors, e.g. {sorted(missing)[0]}")
    return run, params


def _final_aepe(history_file: Path) -> float | None:
    if not history_file.exists():
        return None
    rows = list(csv.DictReader(history_file.read_text().splitlines()))
    if not rows or rows[-1]["aepe"] in ("", "nan"):
        return None
    return float(rows[-1]["aepe"])


# ---------------------------------------------------------------------------
# commands


def cmd_gradcheck(args) -> int:
    ops = None if args.ops == "all" else [o.strip() for o in args.ops.split(",") if o.strip()]
    rows = run_checks(ops, 42 if args.seed is None else args.seed)
    lines = [f"{'op':<16} {'max_rel_err':>12} {'tol':>8}  status"]
    for name, err, tol in rows:
        lines.append(f"{name:<16} {err:12.3e} {tol:8.0e}  {'ok' if err < tol else 'FAIL'}")
    text = "\n".join(lines) + "\n"
    print(text, end="")
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "gradcheck.txt").write_text(text)
    return 0 if all(err < tol for _, err, tol in rows) else 2


def cmd_gen_data(args) -> int:
    seed = 42 if args.seed is None else args.seed
    samples = gen_dataset(DatasetSpec(args.count, args.size, seed))
    save_dataset(samples, Path(args.out), seed)
    print(f"wrote {len(samples)} samples to {args.out}")
    return 0


def cmd_train(args) -> int:
    run = resolve_config(args)
    train_set, heldout = _datasets(run, args.data)
    out = Path(args.out)
    result = train(run.training(), run.model(), train_set, heldout, out_dir=out, config_text=format_config(run))
    print(f"zero-flow AEPE {zero_flow_aepe(heldout):.4f}")
    print(f"final AEPE {result.final.aepe:.4f} F1-all {result.final.f1_all:.2f}")
    return 0


def cmd_eval(args) -> int:
    run, params = _load_model(args.ckpt)
    samples = load_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result, pred = evaluate_model(params, run.model(), samples)
    for s, p in zip(samples, pred):
        write_flo(p, out / f"{s.seed:05d}_pred.flo")
        write_ppm(flow_to_color(p), out / f"{s.seed:05d}_pred.ppm")
    summary = f"AEPE {result.aepe:.4f}\nF1-all {result.f1_all:.2f}\n"
    (out / "metrics.txt").write_text(summary)
    print(summary, end="")
    return 0


def cmd_ablate(args) -> int:
    run = resolve_config(args)
    train_set, heldout = _datasets(run, args.data)
    model = run.model()
    grid = ablation_grid(run.channels, run.seed)
    grid = [(name, replace(model, rfpm=m.rfpm)) for name, m in grid]
    seeds = tuple(run.seed + k for k in range(run.repeats))
    rows = ablate(grid, run.training(), train_set, heldout, seeds, out_dir=Path(args.out))
    print(format_table(rows), end="")
    return 0


def cmd_transfer(args) -> int:
    base_run, _ = _load_model(args.ckpt)
    # sensible multi-column defaults that the config file and flags may still override
    start = with_overrides(base_run, {"columns": "W/R/W", "mask_levels": (1, 2), "ada": 0.2, "iters": 1000,
                                      "lr_milestones": (600, 800)})
    run = resolve_config(args, start)
    if run.model().rfpm.columns[0] != base_run.model().rfpm.columns[0]:
        raise ConfigError("the first column must match the base model's column")
    train_set, heldout = _datasets(run, args.data)
    target = _final_aepe(Path(args.ckpt).parent / "history.csv")
    plan = TransferPlan(args.ckpt, run.model(), run.seed + 1, run.training(), target)
    out = Path(args.out)
    result = transfer(plan, train_set, heldout, out_dir=out, config_text=format_config(run))
    matched = "never" if result.matched_at is None else str(result.matched_at)
    summary = (
        f"target AEPE {'n/a' if target is None else f'{target:.4f}'}\n"
        f"final AEPE {result.final.aepe:.4f}\n"
        f"reached target at iteration {matched} of {run.iters}\n"
    )
    (out / "transfer.txt").write_text(summary)
    print(summary, end="")
    return 0


def cmd_viz(args) -> int:
    samples = load_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    preds = None
    if args.ckpt:
        run, params = _load_model(args.ckpt)
        _, preds = evaluate_model(params, run.model(), samples)
    for i, s in enumerate(samples):
        top = float(np.sqrt((s.flow**2).sum(0)).max()) or 1.0
        write_ppm(flow_to_color(s.flow, top), out / f"{s.seed:05d}_gt.ppm")
        if preds is not None:
            write_ppm(flow_to_color(preds[i], top), out / f"{s.seed:05d}_pred.ppm")
            res = evaluate(preds[i][None], s.flow[None])
            log.info("sample %05d AEPE %.4f", s.seed, res.aepe)
    write_ppm(color_legend(), out / "legend.ppm")
    print(f"wrote {len(samples)} flow images to {out}")
    return 0


def color_legend(size: int = 65) -> np.ndarray:
    """Colour key: the flow at each pixel is its offset from the image centre."""
    c = (size - 1) / 2
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    flow = np.stack([xs - c, ys - c])
    inside = np.hypot(flow[0], flow[1]) <= c
    img = flow_to_color(flow, c)
    img[~inside] = 255
    return img
