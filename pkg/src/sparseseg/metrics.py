"""Dice similarity and 95th-percentile Hausdorff distance on label volumes."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


def dsc(pred, gt, cls):
    """``2|P&G| / (|P|+|G|)`` for class ``cls``; NaN when the class is absent from both."""
    p = np.asarray(pred) == cls
    g = np.asarray(gt) == cls
    total = p.sum() + g.sum()
    if total == 0:
        return math.nan
    return float(2.0 * np.logical_and(p, g).sum() / total)


def boundary(mask):
    """Foreground voxels with at least one 6-neighbour outside the mask (or the volume)."""
    m = np.asarray(mask, dtype=bool)
    padded = np.pad(m, 1, constant_values=False)
    interior = m.copy()
    for axis in range(m.ndim):
        for shift in (-1, 1):
            interior &= np.roll(padded, shift, axis=axis)[tuple(slice(1, -1) for _ in range(m.ndim))]
    return m & ~interior


def _min_distances(src, dst, chunk=2048):
    out = np.empty(len(src))
    for i in range(0, len(src), chunk):
        block = src[i:i + chunk]
        d2 = ((block[:, None, :] - dst[None, :, :]) ** 2).sum(axis=-1)
        out[i:i + chunk] = np.sqrt(d2.min(axis=1))
    return out


def hd95(pred, gt, cls, spacing=(1.0, 1.0, 1.0)):
    """95th percentile of the symmetric boundary-to-boundary distance set (brute force).

    NaN when the class is absent from both masks; the volume diagonal when it
    is absent from exactly one.
    """
    p = np.asarray(pred) == cls
    g = np.asarray(gt) == cls
    if not p.any() and not g.any():
        return math.nan
    sp = np.asarray(spacing, dtype=np.float64)
    if not p.any() or not g.any():
        return float(np.linalg.norm((np.array(p.shape) - 1) * sp))
    bp = np.argwhere(boundary(p)) * sp
    bg = np.argwhere(boundary(g)) * sp
    dists = np.concatenate([_min_distances(bp, bg), _min_distances(bg, bp)])
    return float(np.percentile(dists, 95))


def _nanmean(values):
    vals = [v for v in values if not math.isnan(v)]
    return float(np.mean(vals)) if vals else math.nan


@dataclass
class MetricsReport:
    dsc: list  # per foreground class, mean over evaluated volumes
    hd95: list
    loss_curve: list = field(default_factory=list)

    @property
    def mean_dsc(self):
        return _nanmean(self.dsc)

    @property
    def mean_hd95(self):
        return _nanmean(self.hd95)

    def to_dict(self):
        def clean(v):
            return None if isinstance(v, float) and math.isnan(v) else v

        return {
            "dsc": [clean(v) for v in self.dsc],
            "mean_dsc": clean(self.mean_dsc),
            "hd95": [clean(v) for v in self.hd95],
            "mean_hd95": clean(self.mean_hd95),
            "loss_curve": list(self.loss_curve),
        }


def evaluate(preds, gts, num_classes, spacing=(1.0, 1.0, 1.0), loss_curve=()):
    """Per-class DSC/HD95 averaged over volumes, skipping undefined entries."""
    per_dsc = [[] for _ in range(1, num_classes)]
    per_hd = [[] for _ in range(1, num_classes)]
    for pred, gt in zip(preds, gts):
        for cls in range(1, num_classes):
            per_dsc[cls - 1].append(dsc(pred, gt, cls))
            per_hd[cls - 1].append(hd95(pred, gt, cls, spacing))
    return MetricsReport([_nanmean(v) for v in per_dsc], [_nanmean(v) for v in per_hd], list(loss_curve))
