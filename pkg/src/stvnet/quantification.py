"""Cavity volumes, EDV/ESV and ejection fraction from per-gate masks."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import NoCavityError, ShapeError


@dataclass(frozen=True)
class QuantResult:
    volumes_ml: tuple[float, ...]
    voxels: tuple[int, ...] | None
    edv: float
    esv: float
    rvef: float
    edv_gate: int     # 1-based
    esv_gate: int

    @property
    def gates(self) -> int:
        return len(self.volumes_ml)


def voxel_ml(spacing_mm: float) -> float:
    """Volume of one isotropic voxel in millilitres (cm^3)."""
    return (spacing_mm / 10.0) ** 3


def cavity_volume(endo_mask, spacing_mm: float) -> tuple[int, float]:
    """``(voxel count, ml)`` of a filled cavity mask."""
    n = int(np.count_nonzero(np.asarray(endo_mask)))
    return n, n * voxel_ml(spacing_mm)


def rvef(per_gate_volumes: Sequence[float], voxels: Sequence[int] | None = None) -> QuantResult:
    """EDV is the largest and ESV the smallest gate volume; the first gate
    wins ties.  The ejection fraction is returned as a fraction."""
    v = np.asarray(per_gate_volumes, dtype=np.float64)
    if v.ndim != 1 or len(v) < 2:
        raise ShapeError(f"need per-gate volumes for at least 2 gates, got shape {v.shape}")
    if np.any(v < 0) or not np.all(np.isfinite(v)):
        raise ValueError("gate volumes must be finite and non-negative")
    if v.max() <= 0:
        raise NoCavityError()
    ed, es = int(np.argmax(v)), int(np.argmin(v))
    edv, esv = float(v[ed]), float(v[es])
    return QuantResult(
        volumes_ml=tuple(float(x) for x in v),
        voxels=None if voxels is None else tuple(int(n) for n in voxels),
        edv=edv,
        esv=esv,
        rvef=(edv - esv) / edv,
        edv_gate=ed + 1,
        esv_gate=es + 1,
    )


def quantify_masks(masks: np.ndarray, spacing_mm: float) -> QuantResult:
    """``masks``: ``(G, X, Y, Z)`` filled regions, one per gate."""
    counts = [cavity_volume(m, spacing_mm) for m in masks]
    return rvef([ml for _, ml in counts], [n for n, _ in counts])


def quantify_study(epi: np.ndarray, endo: np.ndarray, spacing_mm: float, mode: str = "endo") -> QuantResult:
    """Quantify from the endocardial cavity (default) or, with
    ``mode="epi"``, from the whole region inside the epicardial surface."""
    if mode not in ("endo", "epi"):
        raise ValueError(f"mode must be 'endo' or 'epi', got {mode!r}")
    return quantify_masks(endo if mode == "endo" else epi, spacing_mm)


def quant_columns(gates: int) -> list[str]:
    return (["subject", "arch", "edv_ml", "esv_ml", "rvef", "edv_gate", "esv_gate"]
            + [f"vol_{k}_ml" for k in range(1, gates + 1)])


def write_quant_csv(rows: Iterable[tuple[str, str, QuantResult]], path) -> None:
    rows = list(rows)
    gates = max((r.gates for _, _, r in rows), default=0)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(quant_columns(gates))
        for subject, arch, r in rows:
            vols = [repr(x) for x in r.volumes_ml] + [""] * (gates - r.gates)
            w.writerow([subject, arch, repr(r.edv), repr(r.esv), repr(r.rvef), r.edv_gate, r.esv_gate] + vols)
