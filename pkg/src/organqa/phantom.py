"""Synthetic multi-organ anatomies and controlled mask degradations.

Two layouts are provided. ``pelvis_like7`` has seven organs arranged like a male
pelvis (bladder, paired femoral heads, penile bulb, prostate, rectum, urethra).
``kidney_like2`` has two mirrored bean-shaped kidneys. Axes: x is left-right,
y anterior-posterior, z inferior-superior. Shape parameters are given in
fractions of the grid's physical extent.
"""

from __future__ import annotations

import csv
import enum
import os
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np
from scipy import ndimage

from .corrupt import NoiseSpec, corrupt_mask, derive_seed
from .metrics import dice
from .voxelgrid import (
    MultiChannelVolume,
    Spacing,
    VoxelMask,
    axis_index,
    center_of_mass,
    tight_bounding_box,
    write_omv,
)


class Layout(str, enum.Enum):
    PELVIS_LIKE7 = "pelvis_like7"
    KIDNEY_LIKE2 = "kidney_like2"


PELVIS_ORGANS = (
    "bladder",
    "femoral_head_left",
    "femoral_head_right",
    "penile_bulb",
    "prostate",
    "rectum",
    "urethra",
)
KIDNEY_ORGANS = ("kidney_left", "kidney_right")

LAYOUT_ORGANS = {Layout.PELVIS_LIKE7: PELVIS_ORGANS, Layout.KIDNEY_LIKE2: KIDNEY_ORGANS}

# Pairs that swap under a left-right flip.
LAYOUT_LR_PAIRS = {
    Layout.PELVIS_LIKE7: (("femoral_head_left", "femoral_head_right"),),
    Layout.KIDNEY_LIKE2: (("kidney_left", "kidney_right"),),
}

# Shapes: ("ellipsoid", center, radii), ("tube", control points, radius),
# ("bean", center, radii, notch_offset, notch_radii).
# Paired organs list only the left member; the right one is its mirror.
PELVIS_SHAPES = {
    "bladder": ("ellipsoid", (0.50, 0.36, 0.68), (0.20, 0.15, 0.14)),
    "femoral_head_left": ("ellipsoid", (0.20, 0.55, 0.45), (0.12, 0.12, 0.12)),
    "penile_bulb": ("ellipsoid", (0.50, 0.40, 0.16), (0.08, 0.07, 0.06)),
    "prostate": ("ellipsoid", (0.50, 0.44, 0.40), (0.11, 0.10, 0.10)),
    "rectum": ("tube", ((0.50, 0.74, 0.14), (0.50, 0.68, 0.45), (0.50, 0.72, 0.80)), 0.09),
    "urethra": ("tube", ((0.50, 0.40, 0.58), (0.50, 0.45, 0.40), (0.50, 0.41, 0.20)), 0.045),
}
KIDNEY_SHAPES = {
    "kidney_left": ("bean", (0.28, 0.55, 0.50), (0.12, 0.10, 0.26), (0.11, 0.0, 0.0), (0.06, 0.05, 0.09)),
}
# Earlier organs claim shared voxels, keeping channels disjoint.
PELVIS_PRIORITY = ("urethra", "femoral_head_left", "femoral_head_right", "rectum", "bladder", "prostate", "penile_bulb")


@dataclass(frozen=True)
class AnatomySpec:
    layout: Layout = Layout.PELVIS_LIKE7
    dims: tuple[int, int, int] = (32, 32, 32)
    spacing: Spacing = Spacing(3.0, 3.0, 3.0)
    # scales all center (fraction of extent) and radius (relative) perturbations
    jitter: float = 1.0
    center_jitter: float = 0.025
    radius_jitter: float = 0.10
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "layout", Layout(self.layout))
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "spacing", Spacing.of(self.spacing))
        if self.jitter < 0:
            raise ValueError("jitter must be non-negative")


class PhantomFitError(ValueError):
    pass


def _centers(dims, spacing) -> list[np.ndarray]:
    return [(np.arange(n) + 0.5) * s for n, s in zip(dims, spacing)]


def _ellipsoid(grid, extent, center, radii) -> np.ndarray:
    x, y, z = grid
    c = np.asarray(center) * extent
    r = np.asarray(radii) * extent
    return ((x - c[0]) / r[0]) ** 2 + ((y - c[1]) / r[1]) ** 2 + ((z - c[2]) / r[2]) ** 2 <= 1.0


def _tube(grid, extent, points, radius, samples=64) -> np.ndarray:
    """Thick quadratic Bezier curve through three control points."""
    p = np.asarray(points) * extent
    t = np.linspace(0.0, 1.0, samples)[:, None]
    curve = (1 - t) ** 2 * p[0] + 2 * (1 - t) * t * p[1] + t**2 * p[2]
    r = radius * float(np.min(extent))
    x, y, z = grid
    out = np.zeros(x.shape, dtype=bool)
    for q in curve:
        out |= (x - q[0]) ** 2 + (y - q[1]) ** 2 + (z - q[2]) ** 2 <= r * r
    return out


def _bean(grid, extent, center, radii, notch_offset, notch_radii) -> np.ndarray:
    body = _ellipsoid(grid, extent, center, radii)
    notch_center = np.asarray(center) + np.asarray(notch_offset)
    return body & ~_ellipsoid(grid, extent, notch_center, notch_radii)


def _jitter_shape(shape, rng, spec: AnatomySpec):
    cj = spec.center_jitter * spec.jitter
    rj = spec.radius_jitter * spec.jitter
    kind = shape[0]
    if kind == "ellipsoid":
        _, c, r = shape
        return (kind, tuple(np.asarray(c) + rng.uniform(-cj, cj, 3)), tuple(np.asarray(r) * (1 + rng.uniform(-rj, rj, 3))))
    if kind == "tube":
        _, pts, rad = shape
        pts = np.asarray(pts) + rng.uniform(-cj, cj, (len(pts), 3))
        return (kind, tuple(map(tuple, pts)), rad * (1 + rng.uniform(-rj, rj)))
    if kind == "bean":
        _, c, r, off, nr = shape
        return (kind, tuple(np.asarray(c) + rng.uniform(-cj, cj, 3)), tuple(np.asarray(r) * (1 + rng.uniform(-rj, rj, 3))), off, nr)
    raise ValueError(kind)


def _render(shape, grid, extent) -> np.ndarray:
    kind = shape[0]
    if kind == "ellipsoid":
        return _ellipsoid(grid, extent, *shape[1:])
    if kind == "tube":
        return _tube(grid, extent, *shape[1:])
    return _bean(grid, extent, *shape[1:])


def generate_anatomy(spec: AnatomySpec) -> MultiChannelVolume:
    """Render one ground-truth anatomy; deterministic per ``spec.seed``.

    Right-sided organs are rendered as left-sided shapes with their own jitter
    and mirrored in x, so with ``jitter=0`` a pair is an exact mirror image.
    """
    rng = np.random.default_rng(spec.seed)
    extent = np.asarray(spec.dims) * np.asarray(spec.spacing)
    grid = np.meshgrid(*_centers(spec.dims, spec.spacing), indexing="ij")
    if spec.layout is Layout.PELVIS_LIKE7:
        shapes, organs, priority = PELVIS_SHAPES, PELVIS_ORGANS, PELVIS_PRIORITY
    else:
        shapes, organs, priority = KIDNEY_SHAPES, KIDNEY_ORGANS, KIDNEY_ORGANS
    raw = {}
    for organ in organs:
        mirrored = organ.endswith("_right")
        base = shapes[organ.replace("_right", "_left")]
        mask = _render(_jitter_shape(base, rng, spec), grid, extent)
        raw[organ] = mask[::-1] if mirrored else mask
    claimed = np.zeros(spec.dims, dtype=bool)
    final = {}
    for organ in priority:
        m = raw[organ] & ~claimed
        claimed |= m
        final[organ] = m
    for organ in organs:
        if not final[organ].any():
            raise PhantomFitError(f"{organ} does not fit on a {spec.dims} grid")
    values = np.stack([final[o] for o in organs]).astype(np.uint8)
    return MultiChannelVolume(organs, values, spec.spacing)


# ---------------------------------------------------------------------------
# degradations

_CROSS = ndimage.generate_binary_structure(3, 1)


@dataclass(frozen=True)
class Identity:
    def describe(self) -> str:
        return "identity"


@dataclass(frozen=True)
class Erode:
    k: int

    def describe(self) -> str:
        return f"erode({self.k})"


@dataclass(frozen=True)
class Dilate:
    k: int

    def describe(self) -> str:
        return f"dilate({self.k})"


@dataclass(frozen=True)
class TruncatePlane:
    """Zero ``fraction`` of the organ's bounding-box extent from one end of ``axis``."""

    axis: str = "z"
    fraction: float = 0.5
    from_low: bool = True

    def describe(self) -> str:
        return f"truncate({self.axis};{self.fraction:g};{'low' if self.from_low else 'high'})"


@dataclass(frozen=True)
class CutGap:
    """Zero a slab of ``thickness`` slices through the centroid.

    ``axis=None`` cuts across the organ's longest bounding-box axis.
    """

    thickness: int = 2
    axis: Optional[str] = None

    def describe(self) -> str:
        return f"cutgap({self.thickness};{self.axis or 'longest'})"


@dataclass(frozen=True)
class PatchNoise:
    noise: NoiseSpec

    def describe(self) -> str:
        n = self.noise
        return f"patchnoise({n.max_patches};{n.min_patch};{n.max_patch};{n.center_sampling.value})"


Degradation = Union[Identity, Erode, Dilate, TruncatePlane, CutGap, PatchNoise]


def erode(data: np.ndarray, k: int) -> np.ndarray:
    """Erosion by the 6-connected L1 ball of radius k; outside the grid is background."""
    if k == 0:
        return data.astype(bool)
    return ndimage.binary_erosion(data, _CROSS, iterations=k, border_value=0)


def dilate(data: np.ndarray, k: int) -> np.ndarray:
    if k == 0:
        return data.astype(bool)
    return ndimage.binary_dilation(data, _CROSS, iterations=k)


def degrade(gt: VoxelMask, spec: Degradation, seed: int = 0) -> tuple[VoxelMask, float]:
    """Apply one degradation and return it with its Dice against ``gt``."""
    if gt.is_empty():
        raise ValueError("cannot degrade an empty mask")
    data = gt.data.astype(bool)
    if isinstance(spec, Identity):
        out = data
    elif isinstance(spec, (Erode, Dilate)):
        if spec.k < 0:
            raise ValueError("morphology radius must be >= 0")
        out = erode(data, spec.k) if isinstance(spec, Erode) else dilate(data, spec.k)
    elif isinstance(spec, TruncatePlane):
        if not 0.0 <= spec.fraction <= 1.0:
            raise ValueError("truncation fraction must lie in [0, 1]")
        ax = axis_index(spec.axis)
        box = tight_bounding_box(gt)
        extent = box.hi[ax] - box.lo[ax] + 1
        n_cut = int(round(spec.fraction * extent))
        out = data.copy()
        sl = [slice(None)] * 3
        if spec.from_low:
            sl[ax] = slice(box.lo[ax], box.lo[ax] + n_cut)
        else:
            sl[ax] = slice(box.hi[ax] + 1 - n_cut, box.hi[ax] + 1)
        out[tuple(sl)] = False
    elif isinstance(spec, CutGap):
        if spec.thickness < 1:
            raise ValueError("gap thickness must be >= 1")
        box = tight_bounding_box(gt)
        ax = int(np.argmax(box.shape)) if spec.axis is None else axis_index(spec.axis)
        c = int(np.floor(center_of_mass(gt)[ax] / gt.spacing[ax]))
        start = c - spec.thickness // 2
        out = data.copy()
        sl = [slice(None)] * 3
        sl[ax] = slice(max(start, 0), max(start + spec.thickness, 0))
        out[tuple(sl)] = False
    elif isinstance(spec, PatchNoise):
        out = corrupt_mask(gt, spec.noise, seed).data.astype(bool)
    else:
        raise TypeError(f"unknown degradation {spec!r}")
    degraded = VoxelMask(out, gt.spacing)
    return degraded, dice(degraded, gt)


# ---------------------------------------------------------------------------
# datasets


@dataclass
class ManifestRow:
    case_id: str
    organ: str
    true_dice: float
    degradation: str


MANIFEST_FIELDS = ("case_id", "organ", "true_dice", "degradation")


def default_degradation_mix() -> list[tuple[float, Degradation]]:
    """Weighted menu of error kinds used for the degraded 30% of test organs."""
    return [
        (2.0, Erode(1)),
        (1.0, Erode(2)),
        (1.5, Dilate(1)),
        (1.0, Dilate(2)),
        (1.0, TruncatePlane("z", 0.3, True)),
        (1.0, TruncatePlane("z", 0.5, True)),
        (1.0, TruncatePlane("z", 0.4, False)),
        (1.0, TruncatePlane("x", 0.5, True)),
        (1.0, CutGap(2)),
        (0.5, CutGap(4)),
        (1.0, PatchNoise(NoiseSpec(3, 3, 6, "bounding_box"))),
    ]


def _draw(rng, mix) -> Degradation:
    weights = np.asarray([w for w, _ in mix], dtype=float)
    if np.any(weights < 0) or weights.sum() <= 0:
        raise ValueError("degradation mix weights must be non-negative with a positive sum")
    return mix[int(rng.choice(len(mix), p=weights / weights.sum()))][1]


def degrade_case(gt: MultiChannelVolume, degraded_fraction: float, mix, seed: int):
    """Degrade each organ with probability ``degraded_fraction``."""
    rng = np.random.default_rng(seed)
    channels, rows = [], []
    for c, organ in enumerate(gt.channels):
        mask = gt.channel(c)
        spec = _draw(rng, mix) if rng.random() < degraded_fraction else Identity()
        out, d = degrade(mask, spec, derive_seed(seed, c))
        channels.append(out)
        rows.append((organ, d, spec.describe()))
    return MultiChannelVolume.from_masks(gt.channels, channels), rows


def build_dataset(
    anatomy_specs: Sequence[AnatomySpec],
    out_dir,
    degraded_fraction: float = 0.3,
    mix=None,
    seed: int = 0,
    thresholds: Optional[dict] = None,
    max_retries: int = 50,
) -> list[ManifestRow]:
    """Write ``gt/<case>.omv``, ``auto/<case>.omv`` and ``manifest.csv``.

    With ``thresholds`` the degradation draw is repeated (up to ``max_retries``
    times) until every organ has both accurate and inaccurate cases.
    """
    mix = default_degradation_mix() if mix is None else mix
    if not 0.0 <= degraded_fraction <= 1.0:
        raise ValueError("degraded_fraction must lie in [0, 1]")
    anatomies = [generate_anatomy(s) for s in anatomy_specs]
    for attempt in range(max_retries + 1):
        cases = []
        rows = []
        for i, gt in enumerate(anatomies):
            case_id = f"case{i:04d}"
            auto, info = degrade_case(gt, degraded_fraction, mix, derive_seed(seed, attempt, i))
            cases.append((case_id, gt, auto))
            rows.extend(ManifestRow(case_id, o, d, desc) for o, d, desc in info)
        if thresholds is None or _both_labels(rows, thresholds):
            break
    else:
        raise RuntimeError(f"no draw with both labels for every organ after {max_retries} retries")
    os.makedirs(os.path.join(out_dir, "gt"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "auto"), exist_ok=True)
    for case_id, gt, auto in cases:
        write_omv(gt, os.path.join(out_dir, "gt", f"{case_id}.omv"))
        write_omv(auto, os.path.join(out_dir, "auto", f"{case_id}.omv"))
    write_manifest(rows, os.path.join(out_dir, "manifest.csv"))
    return rows


def _both_labels(rows, thresholds) -> bool:
    seen: dict[str, set] = {}
    for r in rows:
        seen.setdefault(r.organ, set()).add(int(r.true_dice < thresholds[r.organ]))
    return all(v == {0, 1} for v in seen.values())


def write_manifest(rows: Sequence[ManifestRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_FIELDS)
        for r in rows:
            w.writerow([r.case_id, r.organ, repr(float(r.true_dice)), r.degradation])


def read_manifest(path) -> list[ManifestRow]:
    from .metrics import SchemaError

    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != MANIFEST_FIELDS:
            raise SchemaError(f"{path}: expected columns {','.join(MANIFEST_FIELDS)}, got {reader.fieldnames}")
        try:
            return [ManifestRow(r["case_id"], r["organ"], float(r["true_dice"]), r["degradation"]) for r in reader]
        except ValueError as exc:
            raise SchemaError(f"{path}: {exc}") from None


def anatomy_series(n: int, seed: int, **kwargs) -> list[AnatomySpec]:
    """``n`` anatomy specs with seeds derived from one master seed."""
    return [AnatomySpec(seed=derive_seed(seed, i), **kwargs) for i in range(n)]
