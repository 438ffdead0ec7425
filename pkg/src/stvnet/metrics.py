"""Overlap, surface-distance and agreement measures for binary masks.

Masks are arrays of any integer or boolean dtype; nonzero is foreground.
Surface distances are Euclidean, in voxel units (no spacing scaling).
"""

from __future__ import annotations

import csv
import math
from typing import Iterable, NamedTuple, Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import ShapeError, SurfaceDistanceError, UndefinedMetricError

# face neighbours only
_SIX = ndimage.generate_binary_structure(3, 1)

METRICS_COLUMNS = ("subject", "gate", "structure", "arch", "dsc", "hd", "asd", "sn", "sp")


class ConfusionCounts(NamedTuple):
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


class Agreement(NamedTuple):
    mae: float
    rmse: float
    pcc: float


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a) != 0
    b = np.asarray(b) != 0
    if a.shape != b.shape:
        raise ShapeError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return a, b


def confusion(pred, truth) -> ConfusionCounts:
    p, t = _pair(pred, truth)
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    return ConfusionCounts(tp, fp, p.size - tp - fp - fn, fn)


def dsc(a, b) -> float:
    """Dice overlap.  Two empty masks count as perfect agreement (1.0)."""
    a, b = _pair(a, b)
    na, nb = int(np.count_nonzero(a)), int(np.count_nonzero(b))
    if na + nb == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(a & b)) / (na + nb)


def sn_sp(pred, truth) -> tuple[float, float]:
    """Sensitivity and specificity of ``pred`` against ``truth``."""
    c = confusion(pred, truth)
    if c.tp + c.fn == 0:
        raise UndefinedMetricError("sensitivity undefined: truth has no foreground voxels")
    if c.tn + c.fp == 0:
        raise UndefinedMetricError("specificity undefined: truth has no background voxels")
    return c.tp / (c.tp + c.fn), c.tn / (c.tn + c.fp)


def surface(mask) -> np.ndarray:
    """Integer coordinates ``(n, ndim)`` of foreground voxels that touch the
    background through a face.  Voxels on the array border always count."""
    m = np.asarray(mask) != 0
    if m.ndim != 3:
        raise ShapeError(f"surface extraction needs a 3-D mask, got shape {m.shape}")
    interior = ndimage.binary_erosion(m, structure=_SIX, border_value=0)
    return np.argwhere(m & ~interior)


def _points(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.int64)
    if p.size == 0:
        raise SurfaceDistanceError()
    return p.reshape(len(p), -1)


def _nearest(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Distance from each point of ``src`` to its nearest point in ``dst``.

    The tree only picks the neighbour; the distance is recomputed from the
    integer offsets so the result is the correctly rounded square root.
    """
    _, idx = cKDTree(dst).query(src, k=1)
    d2 = ((src - dst[idx]) ** 2).sum(axis=1)
    return np.sqrt(d2.astype(np.float64))


def directed_distances(a, b) -> tuple[np.ndarray, np.ndarray]:
    a, b = _points(a), _points(b)
    return _nearest(a, b), _nearest(b, a)


def hausdorff(a, b) -> float:
    """Symmetric Hausdorff distance between two point sets."""
    dab, dba = directed_distances(a, b)
    return float(max(dab.max(), dba.max()))


def asd(a, b) -> float:
    """Symmetric average surface distance: both directed sums over both sizes."""
    dab, dba = directed_distances(a, b)
    return math.fsum(np.concatenate([dab, dba]).tolist()) / (len(dab) + len(dba))


def mask_surface_distances(pred, truth) -> tuple[float, float]:
    """``(hd, asd)`` between the surfaces of two masks; NaN pair when either is empty."""
    sp, st = surface(pred), surface(truth)
    if len(sp) == 0 or len(st) == 0:
        return math.nan, math.nan
    return hausdorff(sp, st), asd(sp, st)


def agreement(pred: Sequence[float], truth: Sequence[float], literal: bool = False) -> Agreement:
    """MAE, RMSE and Pearson correlation between two series.

    ``literal=True`` evaluates the RMSE as the mean of ``sqrt(d^2)``, which
    is the MAE again; it exists only to compare against that reading.
    """
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(truth, dtype=np.float64)
    if p.shape != t.shape or p.ndim != 1:
        raise ShapeError(f"series must be 1-D and equally long: {p.shape} vs {t.shape}")
    if len(p) < 2:
        raise UndefinedMetricError("agreement needs at least two paired values")
    d = p - t
    mae = float(np.mean(np.abs(d)))
    rmse = float(np.mean(np.sqrt(d * d))) if literal else float(np.sqrt(np.mean(d * d)))
    pc, tc = p - p.mean(), t - t.mean()
    denom = math.sqrt(float(np.dot(pc, pc)) * float(np.dot(tc, tc)))
    if denom == 0:
        raise UndefinedMetricError("correlation undefined: a series has zero variance")
    pcc = float(np.clip(np.dot(pc, tc) / denom, -1.0, 1.0))
    return Agreement(mae, rmse, pcc)


class MetricsRow(NamedTuple):
    subject: str
    gate: int
    structure: str
    arch: str
    dsc: float
    hd: float
    asd: float
    sn: float
    sp: float


def evaluate_masks(pred, truth, subject: str, gate: int, structure: str, arch: str) -> MetricsRow:
    """Every per-gate score at once.  Undefined entries become NaN."""
    hd, sd = mask_surface_distances(pred, truth)
    try:
        sn, sp = sn_sp(pred, truth)
    except UndefinedMetricError:
        sn = sp = math.nan
    return MetricsRow(str(subject), int(gate), structure, arch, dsc(pred, truth), hd, sd, sn, sp)


def write_metrics_csv(rows: Iterable[MetricsRow], path) -> None:
    """NaN is written as an empty field (a missing value, not a number)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRICS_COLUMNS)
        for r in rows:
            w.writerow(["" if isinstance(v, float) and math.isnan(v) else v for v in r])


def summarize(values: Iterable[float]) -> tuple[float, float]:
    """Mean and (population) standard deviation, ignoring NaN."""
    v = np.asarray([x for x in values if not math.isnan(x)], dtype=np.float64)
    if v.size == 0:
        return math.nan, math.nan
    return float(v.mean()), float(v.std())
