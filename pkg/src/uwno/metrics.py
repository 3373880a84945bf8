"""Pixel confusion counts and the Dice score."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def _binary(mask, name: str) -> np.ndarray:
    arr = np.asarray(getattr(mask, "data", mask))
    if not np.isin(arr, (0, 1)).all():
        raise ContractError(f"{name} mask must contain only 0 and 1")
    return arr.astype(bool)


def confusion_counts(pred, gt) -> ConfusionCounts:
    """Count TP/FP/FN/TN pixels between two binary masks (arrays or tensors)."""
    p = _binary(pred, "predicted")
    g = _binary(gt, "ground-truth")
    if p.shape != g.shape:
        raise DimensionError(f"mask shapes {p.shape} and {g.shape} differ")
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return ConfusionCounts(tp, fp, fn, p.size - tp - fp - fn)


def dice_score(c: ConfusionCounts) -> float:
    """``2TP / (2TP + FP + FN)``; two empty masks agree perfectly (1.0)."""
    denom = 2 * c.tp + c.fp + c.fn
    if denom == 0:
        return 1.0
    return 2 * c.tp / denom


def dice(pred, gt) -> float:
    return dice_score(confusion_counts(pred, gt))
