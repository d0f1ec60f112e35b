"""Random binary patch noise for organ masks, and the signed Dice coefficient."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .voxelgrid import VoxelMask


class CenterSampling(str, enum.Enum):
    FOREGROUND = "foreground"
    BOUNDING_BOX = "bounding_box"


@dataclass(frozen=True)
class NoiseSpec:
    max_patches: int
    min_patch: int
    max_patch: int
    center_sampling: CenterSampling = CenterSampling.BOUNDING_BOX

    def __post_init__(self):
        object.__setattr__(self, "center_sampling", CenterSampling(self.center_sampling))
        for name in ("max_patches", "min_patch", "max_patch"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")
            object.__setattr__(self, name, int(v))
        if self.min_patch > self.max_patch:
            raise ValueError(f"min_patch {self.min_patch} exceeds max_patch {self.max_patch}")

    def to_dict(self) -> dict:
        return {
            "max_patches": self.max_patches,
            "min_patch": self.min_patch,
            "max_patch": self.max_patch,
            "center_sampling": self.center_sampling.value,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSpec":
        return cls(**d)


class Patch(NamedTuple):
    """An axis-aligned cuboid, inclusive corners, possibly partly outside the grid."""

    add: bool
    lo: tuple[int, int, int]
    hi: tuple[int, int, int]


def sample_patches(target: VoxelMask, spec: NoiseSpec, seed: int) -> list[Patch]:
    """Draw the patch plan for one corruption.

    One coin decides whether this corruption adds or removes; all of its
    patches share that mode. Draw order from ``numpy.random.default_rng(seed)``:
    a uniform float (add if < 0.5), the patch count ``n ~ U{1..max_patches}``,
    then per patch three side lengths ``~ U{min_patch..max_patch}`` and the
    center voxel:
    an index into the x-major list of foreground voxels, or one uniform
    integer per axis inside the tight bounding box. An empty target samples
    centers from the whole grid.
    """
    rng = np.random.default_rng(seed)
    fg = np.argwhere(target.data)
    if len(fg) == 0:
        box_lo, box_hi = np.zeros(3, int), np.asarray(target.dims) - 1
        use_fg = False
    else:
        box_lo, box_hi = fg.min(axis=0), fg.max(axis=0)
        use_fg = spec.center_sampling is CenterSampling.FOREGROUND
    add = bool(rng.random() < 0.5)
    n = int(rng.integers(1, spec.max_patches + 1))
    patches = []
    for _ in range(n):
        sides = rng.integers(spec.min_patch, spec.max_patch + 1, size=3)
        if use_fg:
            center = fg[rng.integers(len(fg))]
        else:
            center = rng.integers(box_lo, box_hi + 1)
        lo = center - sides // 2
        hi = lo + sides - 1
        patches.append(Patch(add, tuple(int(v) for v in lo), tuple(int(v) for v in hi)))
    return patches


def apply_patches(target: VoxelMask, patches: Sequence[Patch]) -> VoxelMask:
    """Paint patches in order; later patches overwrite earlier ones."""
    out = np.array(target.data, copy=True)
    dims = target.dims
    for p in patches:
        sl = tuple(slice(max(l, 0), min(h, n - 1) + 1) for l, h, n in zip(p.lo, p.hi, dims))
        out[sl] = 1 if p.add else 0
    return VoxelMask(out, target.spacing)


def corrupt_mask(target: VoxelMask, spec: NoiseSpec, seed: int) -> VoxelMask:
    """Add or remove random cuboid patches; deterministic for a given seed."""
    return apply_patches(target, sample_patches(target, spec, seed))


def signed_dice(input: VoxelMask, target: VoxelMask) -> float:
    """``sgn(|I| - |T|) * dice(I, T)`` with ``sgn(0) = +1``; two empty masks give +1."""
    a, b = _as_array(input), _as_array(target)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na, nb = int(np.count_nonzero(a)), int(np.count_nonzero(b))
    if na + nb == 0:
        return 1.0
    inter = int(np.count_nonzero(a & b))
    d = 2.0 * inter / (na + nb)
    return -d if na < nb else d


def _as_array(m) -> np.ndarray:
    data = m.data if isinstance(m, VoxelMask) else np.asarray(m)
    return data.astype(bool, copy=False)


def derive_seed(*keys: int) -> int:
    """Stable 64-bit seed from a tuple of non-negative integers."""
    ss = np.random.SeedSequence([int(k) for k in keys])
    return int(ss.generate_state(1, np.uint64)[0])


@dataclass
class CalibrationHistogram:
    counts: np.ndarray
    edges: np.ndarray
    values: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def fractions(self) -> np.ndarray:
        return self.counts / max(self.total, 1)

    @property
    def min(self) -> float:
        return float(self.values.min()) if self.values.size else float("nan")

    @property
    def max(self) -> float:
        return float(self.values.max()) if self.values.size else float("nan")


def calibration_histogram(
    targets: Sequence[VoxelMask],
    spec: NoiseSpec,
    samples_per_target: int,
    bins: int = 10,
    seed: int = 0,
) -> CalibrationHistogram:
    """Histogram of signed Dice over repeated corruptions of each target.

    Bins are equal-width over [-1, 1]; +1 falls into the last bin.
    """
    if bins < 2:
        raise ValueError("bins must be >= 2")
    if not targets:
        raise ValueError("at least one target is required")
    values = []
    for t_idx, target in enumerate(targets):
        for s in range(samples_per_target):
            noisy = corrupt_mask(target, spec, derive_seed(seed, t_idx, s))
            values.append(signed_dice(noisy, target))
    values = np.asarray(values, dtype=float)
    edges = np.linspace(-1.0, 1.0, bins + 1)
    counts, _ = np.histogram(values, bins=edges)
    return CalibrationHistogram(counts, edges, values)
