"""Synthetic gated studies with analytic cavity volumes.

Each subject is a truncated ellipsoid: an ellipsoid cut by a plane
perpendicular to its x body axis, giving a flat septal side and a rounded
free wall.  The endocardial cavity at gate ``g`` is a homothetic copy of the
end-diastolic cavity scaled by ``s(g)``, so its volume is the closed-form

    V = pi * b * c * ((h + a) - (h**3 + a**3) / (3 * a**2))

times ``s(g)**3``, where ``a, b, c`` are semi-axes and ``x <= h`` is the kept
side of the cut.  Volumes follow ``V(g) = EDV * (1 - EF * (1 - cos(2 pi (g - g0) / G)) / 2)``,
which peaks at ``g0`` and bottoms out half a cycle later.  The epicardial
surface adds a wall thickness ``t(g) >= 1`` voxel to every semi-axis and to
the cut offset.  Intensity is the myocardium indicator with a smooth uptake
variation, blurred, plus zero-mean noise whose variance scales with the
local intensity.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
from scipy import ndimage

from .errors import (
    DimensionMismatchError,
    FormatError,
    GateCountMismatchError,
    MalformedHeaderError,
    SpecError,
    TruncatedDataError,
)

_SIX = ndimage.generate_binary_structure(3, 1)


@dataclass
class PhantomConfig:
    shape: tuple[int, int, int] = (32, 32, 12)
    gates: int = 8
    spacing_mm: float = 6.4
    subjects: int = 20
    seed: int = 0
    # epicardial semi-axes at end diastole, as fractions of each half-extent
    epi_axes_frac: tuple[tuple[float, float], ...] = ((0.55, 0.7), (0.45, 0.6), (0.7, 0.8))
    # end-diastolic wall thickness as a fraction of the x semi-axis
    wall_frac: tuple[float, float] = (0.12, 0.18)
    # cut plane position as a fraction of the x semi-axis (1 = no cut)
    cut_frac: tuple[float, float] = (0.25, 0.6)
    ef_range: tuple[float, float] = (0.3, 0.65)
    yaw_deg: tuple[float, float] = (-25.0, 25.0)
    # in-plane centre jitter in voxels
    jitter: float = 1.0
    noise: float = 0.3
    # activity outside the myocardium (blood pool, surrounding tissue)
    background: float = 0.2
    blur_sigma: float = 1.0
    uptake_variation: float = 0.25

    def __post_init__(self):
        self.shape = tuple(int(n) for n in self.shape)
        self.validate()

    def validate(self) -> None:
        if len(self.shape) != 3 or min(self.shape) < 4:
            raise SpecError(f"phantom shape must be three extents >= 4, got {self.shape}")
        if self.gates < 2:
            raise SpecError(f"a gated study needs at least 2 gates, got {self.gates}")
        if not self.spacing_mm > 0:
            raise SpecError(f"spacing_mm must be positive, got {self.spacing_mm}")
        lo, hi = self.ef_range
        if not 0 <= lo <= hi < 1:
            raise SpecError(f"ef_range must satisfy 0 <= lo <= hi < 1, got {self.ef_range}")
        if self.noise < 0 or self.blur_sigma < 0:
            raise SpecError("noise and blur_sigma must be non-negative")
        if not 0 <= self.background < 1:
            raise SpecError(f"background must lie in [0, 1), got {self.background}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Geometry:
    """End-diastolic body-frame description of one subject (voxel units)."""

    center: tuple[float, float, float]
    endo_axes: tuple[float, float, float]
    cut: float
    wall: float
    yaw: float
    ef: float
    phase: int


@dataclass
class GatedStudy:
    id: str
    volumes: np.ndarray          # (G, X, Y, Z) float32
    epi: np.ndarray              # (G, X, Y, Z) uint8, filled region
    endo: np.ndarray             # (G, X, Y, Z) uint8, filled cavity
    spacing_mm: float
    analytic_volumes_ml: np.ndarray | None = None
    geometry: Geometry | None = field(default=None, compare=False)

    @property
    def gates(self) -> int:
        return len(self.epi)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.epi.shape[1:])

    @property
    def analytic_ef(self) -> float:
        v = np.asarray(self.analytic_volumes_ml)
        return float((v.max() - v.min()) / v.max())

    def masks(self, structure: str) -> np.ndarray:
        return {"epi": self.epi, "endo": self.endo}[structure]


def truncated_ellipsoid_volume(a: float, b: float, c: float, h: float) -> float:
    """Volume of ``{(x/a)^2 + (y/b)^2 + (z/c)^2 <= 1, x <= h}``."""
    h = min(max(h, -a), a)
    return math.pi * b * c * ((h + a) - (h ** 3 + a ** 3) / (3 * a * a))


def volume_law(edv: float, ef: float, gates: int, phase: int = 0) -> np.ndarray:
    g = np.arange(gates)
    return edv * (1.0 - ef * (1.0 - np.cos(2 * np.pi * (g - phase) / gates)) / 2.0)


def _region(shape, center, axes, cut, yaw) -> np.ndarray:
    """Voxel-centre sampling of one truncated ellipsoid."""
    grid = np.indices(shape, dtype=np.float64)
    dx, dy, dz = (grid[k] - center[k] for k in range(3))
    cs, sn = math.cos(yaw), math.sin(yaw)
    u = cs * dx + sn * dy
    v = -sn * dx + cs * dy
    a, b, c = axes
    inside = (u / a) ** 2 + (v / b) ** 2 + (dz / c) ** 2 <= 1.0
    return (inside & (u <= cut)).astype(np.uint8)


def sample_geometry(cfg: PhantomConfig, rng: np.random.Generator) -> Geometry:
    half = [n / 2.0 for n in cfg.shape]
    epi = [rng.uniform(*r) * h for r, h in zip(cfg.epi_axes_frac, half)]
    wall = rng.uniform(*cfg.wall_frac) * epi[0]
    endo = tuple(e - wall for e in epi)
    cut = rng.uniform(*cfg.cut_frac) * endo[0]
    jit = [rng.uniform(-cfg.jitter, cfg.jitter) for _ in range(2)] + [0.0]
    center = tuple((n - 1) / 2.0 + j for n, j in zip(cfg.shape, jit))
    yaw = math.radians(rng.uniform(*cfg.yaw_deg))
    ef = rng.uniform(*cfg.ef_range)
    phase = int(rng.integers(cfg.gates))
    return Geometry(center, endo, cut, wall, yaw, ef, phase)


def gate_geometry(geo: Geometry, gates: int):
    """Per gate: ``(scale, wall, analytic cavity volume in voxels)``."""
    a, b, c = geo.endo_axes
    edv = truncated_ellipsoid_volume(a, b, c, geo.cut)
    vols = volume_law(edv, geo.ef, gates, geo.phase)
    scales = np.cbrt(vols / edv)
    walls = geo.wall / scales   # the wall thickens as the cavity shrinks
    return scales, walls, vols


def render_masks(geo: Geometry, shape, gates: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(epi, endo, analytic volumes in voxels)`` for every gate."""
    scales, walls, vols = gate_geometry(geo, gates)
    epi = np.empty((gates,) + tuple(shape), np.uint8)
    endo = np.empty_like(epi)
    for g, (s, t) in enumerate(zip(scales, walls)):
        if t < 1.0:
            raise SpecError(f"infeasible geometry: wall thickness {t:.2f} < 1 voxel at gate {g + 1}")
        axes = tuple(s * x for x in geo.endo_axes)
        endo[g] = _region(shape, geo.center, axes, s * geo.cut, geo.yaw)
        epi[g] = _region(shape, geo.center, tuple(x + t for x in axes), s * geo.cut + t, geo.yaw)
    return epi, endo, vols


def check_masks(epi: np.ndarray, endo: np.ndarray) -> None:
    """Raise unless each cavity sits strictly inside its epicardium and the
    epicardium stays clear of the volume border."""
    for g in range(len(epi)):
        if not endo[g].any():
            raise SpecError(f"infeasible geometry: empty cavity at gate {g + 1}")
        grown = ndimage.binary_dilation(endo[g], structure=_SIX)
        if np.any(grown & ~epi[g].astype(bool)):
            raise SpecError(f"infeasible geometry: wall thinner than one voxel at gate {g + 1}")
        e = epi[g]
        if e[0].any() or e[-1].any() or e[:, 0].any() or e[:, -1].any() or e[:, :, 0].any() or e[:, :, -1].any():
            raise SpecError(f"infeasible geometry: epicardium touches the volume border at gate {g + 1}")


def _uptake_field(shape, rng: np.random.Generator, amount: float) -> np.ndarray:
    if amount == 0:
        return np.ones(shape)
    field = ndimage.gaussian_filter(rng.normal(size=shape), sigma=3.0, mode="wrap")
    field /= field.std() or 1.0
    return np.clip(1.0 + amount * field, 0.2, None)


def generate_subject(cfg: PhantomConfig, subject_seed: int, subject_id: str | None = None) -> GatedStudy:
    rng = np.random.default_rng(subject_seed)
    geo = sample_geometry(cfg, rng)
    epi, endo, vols = render_masks(geo, cfg.shape, cfg.gates)
    check_masks(epi, endo)

    uptake = _uptake_field(cfg.shape, rng, cfg.uptake_variation)
    noise_rng = np.random.default_rng([subject_seed, 1])
    volumes = np.empty(epi.shape, np.float32)
    for g in range(cfg.gates):
        myo = (epi[g] & (1 - endo[g])).astype(np.float64)
        img = myo * uptake if cfg.uptake_variation else myo
        if cfg.background:
            img = cfg.background + (1.0 - cfg.background) * img
        if cfg.blur_sigma > 0:
            img = ndimage.gaussian_filter(img, cfg.blur_sigma, mode="nearest")
        if cfg.noise > 0:
            img = img + cfg.noise * np.sqrt(np.clip(img, 0, None)) * noise_rng.normal(size=img.shape)
        volumes[g] = img
    ml = vols * (cfg.spacing_mm / 10.0) ** 3
    sid = subject_id or f"s{subject_seed:04d}"
    return GatedStudy(sid, volumes, epi, endo, cfg.spacing_mm, ml, geo)


def generate_dataset(cfg: PhantomConfig) -> list[GatedStudy]:
    """``cfg.subjects`` studies with seeds spawned from ``cfg.seed``.

    A draw whose geometry turns out infeasible is redrawn with the next
    child seed, so the same config always yields the same studies.
    """
    seq = np.random.SeedSequence(cfg.seed)
    studies = []
    k = 0
    while len(studies) < cfg.subjects:
        child = int(seq.spawn(1)[0].generate_state(1)[0])
        k += 1
        try:
            studies.append(generate_subject(cfg, child, subject_id=f"s{len(studies) + 1:03d}"))
        except SpecError:
            if k > 20 * cfg.subjects:
                raise
    return studies


# --------------------------------------------------------------------------
# on-disk format
# --------------------------------------------------------------------------

_F32 = np.dtype("<f4")
_KINDS = ("gate", "epi", "endo")
_FILE_RE = re.compile(r"^(gate|epi|endo|prob)_(\d+)\.raw$")


def _to_disk(a: np.ndarray, dtype) -> bytes:
    # x fastest, then y, then z: Fortran order of an (X, Y, Z) array
    return np.asarray(a, dtype=dtype).tobytes(order="F")


def _from_disk(path: Path, shape, dtype) -> np.ndarray:
    blob = path.read_bytes()
    need = int(np.prod(shape)) * np.dtype(dtype).itemsize
    if len(blob) < need:
        raise TruncatedDataError(f"{len(blob)} bytes, header implies {need}", path)
    if len(blob) > need:
        raise DimensionMismatchError(f"{len(blob)} bytes, header implies {need}", path)
    return np.frombuffer(blob, dtype=dtype).reshape(shape, order="F").astype(np.dtype(dtype).newbyteorder("="))


def write_study(study: GatedStudy, root, extra: dict | None = None, write_volumes: bool = True) -> Path:
    d = Path(root) / study.id
    d.mkdir(parents=True, exist_ok=True)
    header = {
        "id": study.id,
        "gates": study.gates,
        "shape": list(study.shape),
        "spacing_mm": float(study.spacing_mm),
        "dtype": "f32le",
        "analytic_volumes_ml": None if study.analytic_volumes_ml is None
        else [float(v) for v in study.analytic_volumes_ml],
    }
    header.update(extra or {})
    (d / "subject.json").write_text(json.dumps(header, indent=1))
    for g in range(study.gates):
        k = g + 1
        if write_volumes:
            (d / f"gate_{k}.raw").write_bytes(_to_disk(study.volumes[g], _F32))
        (d / f"epi_{k}.raw").write_bytes(_to_disk(study.epi[g], np.uint8))
        (d / f"endo_{k}.raw").write_bytes(_to_disk(study.endo[g], np.uint8))
    return d


def write_segmentation(root, header: dict, structure: str, masks: np.ndarray,
                       probabilities: np.ndarray | None = None) -> Path:
    """Predicted masks (and probabilities) of one structure for one subject.

    Writes ``subject.json`` (``header`` as given), ``<structure>_k.raw`` and
    ``prob_<structure>_k.raw``; a second structure can be added to the same
    directory later.
    """
    d = Path(root) / header["id"]
    d.mkdir(parents=True, exist_ok=True)
    (d / "subject.json").write_text(json.dumps(header, indent=1))
    for g in range(len(masks)):
        (d / f"{structure}_{g + 1}.raw").write_bytes(_to_disk(masks[g], np.uint8))
        if probabilities is not None:
            (d / f"prob_{structure}_{g + 1}.raw").write_bytes(_to_disk(probabilities[g], _F32))
    return d


def write_dataset(studies: Iterable[GatedStudy], root) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for s in studies:
        write_study(s, root)
    return root


def read_header(d: Path) -> dict:
    path = d / "subject.json"
    try:
        header = json.loads(path.read_text())
    except FileNotFoundError:
        raise MalformedHeaderError("missing subject.json", path) from None
    except (ValueError, UnicodeDecodeError) as exc:
        raise MalformedHeaderError(f"unreadable JSON ({exc})", path) from None
    try:
        ok = (isinstance(header["id"], str) and int(header["gates"]) >= 1
              and len(header["shape"]) == 3 and all(int(n) > 0 for n in header["shape"])
              and float(header["spacing_mm"]) > 0)
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedHeaderError(f"missing or invalid field ({exc})", path) from None
    if not ok:
        raise MalformedHeaderError("invalid id, gates, shape or spacing", path)
    if header.get("dtype") != "f32le":
        raise MalformedHeaderError(f"unsupported dtype {header.get('dtype')!r}", path)
    vols = header.get("analytic_volumes_ml")
    if vols is not None and len(vols) != int(header["gates"]):
        raise GateCountMismatchError(
            f"{len(vols)} analytic volumes for {header['gates']} gates", path)
    return header


def read_study(d, require_volumes: bool = True) -> GatedStudy:
    """Load one subject directory, validating every file against the header."""
    d = Path(d)
    header = read_header(d)
    gates = int(header["gates"])
    shape = tuple(int(n) for n in header["shape"])
    present: dict[str, set[int]] = {}
    for p in d.iterdir():
        m = _FILE_RE.match(p.name)
        if m:
            present.setdefault(m.group(1), set()).add(int(m.group(2)))
    kinds = _KINDS if require_volumes else ("epi", "endo")
    expected = set(range(1, gates + 1))
    for kind in kinds + tuple(k for k in ("gate", "prob") if k in present and k not in kinds):
        found = present.get(kind, set())
        if found != expected:
            missing = sorted(expected - found)
            extra = sorted(found - expected)
            raise GateCountMismatchError(
                f"header declares {gates} gates but {kind}_k.raw files are "
                f"missing {missing} / unexpected {extra}", d)
    vol = (np.stack([_from_disk(d / f"gate_{k}.raw", shape, _F32) for k in sorted(expected)])
           if "gate" in present else None)
    epi = np.stack([_from_disk(d / f"epi_{k}.raw", shape, np.uint8) for k in sorted(expected)])
    endo = np.stack([_from_disk(d / f"endo_{k}.raw", shape, np.uint8) for k in sorted(expected)])
    for name, arr in (("epi", epi), ("endo", endo)):
        if arr.max(initial=0) > 1:
            raise FormatError(f"{name} masks must hold only 0/1", d)
    vols = header.get("analytic_volumes_ml")
    return GatedStudy(
        id=header["id"],
        volumes=vol,
        epi=epi,
        endo=endo,
        spacing_mm=float(header["spacing_mm"]),
        analytic_volumes_ml=None if vols is None else np.asarray(vols, dtype=np.float64),
    )


def read_mask_series(d, structure: str) -> tuple[dict, np.ndarray]:
    """``(header, masks (G, X, Y, Z))`` for one structure of a subject directory.

    Works on segmentation output, which holds only the predicted structure.
    """
    if structure not in ("epi", "endo"):
        raise ValueError(f"structure must be 'epi' or 'endo', got {structure!r}")
    d = Path(d)
    header = read_header(d)
    gates = int(header["gates"])
    shape = tuple(int(n) for n in header["shape"])
    found = {int(m.group(2)) for m in map(_FILE_RE.match, (p.name for p in d.iterdir()))
             if m and m.group(1) == structure}
    expected = set(range(1, gates + 1))
    if found != expected:
        raise GateCountMismatchError(
            f"header declares {gates} gates but {structure}_k.raw files are "
            f"missing {sorted(expected - found)} / unexpected {sorted(found - expected)}", d)
    masks = np.stack([_from_disk(d / f"{structure}_{k}.raw", shape, np.uint8) for k in range(1, gates + 1)])
    if masks.max(initial=0) > 1:
        raise FormatError(f"{structure} masks must hold only 0/1", d)
    return header, masks


def read_probabilities(d, structure: str | None = None) -> np.ndarray | None:
    """Probability maps written by segmentation (``prob_<structure>_k.raw``
    when ``structure`` is given, else ``prob_k.raw``)."""
    d = Path(d)
    header = read_header(d)
    shape = tuple(int(n) for n in header["shape"])
    stem = f"prob_{structure}" if structure else "prob"
    files = [d / f"{stem}_{k}.raw" for k in range(1, int(header["gates"]) + 1)]
    if not all(f.exists() for f in files):
        return None
    return np.stack([_from_disk(f, shape, _F32) for f in files])


def study_dirs(root) -> list[Path]:
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory {root} does not exist")
    return sorted(p for p in root.iterdir() if p.is_dir() and (p / "subject.json").exists())


def read_dataset(root, require_volumes: bool = True) -> list[GatedStudy]:
    dirs = study_dirs(root)
    if not dirs:
        raise FormatError("no subject directories found", root)
    return [read_study(d, require_volumes) for d in dirs]


def shape_arg(text: str) -> tuple[int, int, int]:
    """Parse ``HxWxD``."""
    parts = text.lower().split("x")
    if len(parts) != 3:
        raise ValueError(f"shape must look like 32x32x12, got {text!r}")
    return tuple(int(p) for p in parts)
