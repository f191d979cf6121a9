"""End-point error metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInputError, ShapeError

OUTLIER_PX = 3.0
OUTLIER_REL = 0.05


@dataclass(frozen=True)
class EvalResult:
    aepe: float
    f1_all: float
    count: int


def _prepare(pred: np.ndarray, gt: np.ndarray, valid: np.ndarray | None):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.shape[-3] != 2:
        raise ShapeError(f"pred {pred.shape} and gt {gt.shape} must match with 2 flow channels")
    spatial = pred.shape[:-3] + pred.shape[-2:]
    mask = np.ones(spatial, dtype=bool) if valid is None else np.broadcast_to(np.asarray(valid) > 0, spatial)
    if not mask.any():
        raise DegenerateInputError("no valid pixels")
    return pred, gt, mask


def epe_map(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Per-pixel end-point error of flow arrays shaped (..., 2, H, W)."""
    d = np.asarray(pred, dtype=np.float64) - np.asarray(gt, dtype=np.float64)
    return np.sqrt(d[..., 0, :, :] ** 2 + d[..., 1, :, :] ** 2)


def aepe(pred: np.ndarray, gt: np.ndarray, valid: np.ndarray | None = None) -> float:
    pred, gt, mask = _prepare(pred, gt, valid)
    return float(epe_map(pred, gt)[mask].mean())


def outliers(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """KITTI outlier rule: error above 3 px and above 5 % of the true magnitude."""
    epe = epe_map(pred, gt)
    mag = np.sqrt(gt[..., 0, :, :] ** 2 + gt[..., 1, :, :] ** 2)
    return (epe > OUTLIER_PX) & (epe > OUTLIER_REL * mag)


def f1_all(pred: np.ndarray, gt: np.ndarray, valid: np.ndarray | None = None) -> float:
    pred, gt, mask = _prepare(pred, gt, valid)
    return float(100.0 * outliers(pred, gt)[mask].sum() / mask.sum())


def evaluate(pred: np.ndarray, gt: np.ndarray, valid: np.ndarray | None = None) -> EvalResult:
    pred, gt, mask = _prepare(pred, gt, valid)
    return EvalResult(aepe(pred, gt, mask), f1_all(pred, gt, mask), int(mask.sum()))
