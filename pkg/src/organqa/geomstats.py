"""Shape-statistics baseline: six geometric features per organ, a Gaussian fit,
and Mahalanobis distance as the inaccuracy score."""

from __future__ import annotations

import math
from dataclasses import astuple, dataclass
from typing import Sequence

import numpy as np
from scipy import linalg

from .voxelgrid import EmptyForegroundError, MultiChannelVolume, VoxelMask

FEATURE_NAMES = ("volume", "surface_area", "sav_ratio", "elongation", "roundness", "centroid_offset")
N_FEATURES = len(FEATURE_NAMES)
RIDGE_EPS = 1e-6


@dataclass(frozen=True)
class FeatureVector:
    volume: float  # mm^3
    surface_area: float  # mm^2
    sav_ratio: float  # 1/mm
    elongation: float
    roundness: float
    centroid_offset: float  # mm

    def as_array(self) -> np.ndarray:
        return np.array(astuple(self), dtype=float)

    @classmethod
    def from_array(cls, arr) -> "FeatureVector":
        return cls(*(float(v) for v in arr))


def exposed_face_area(data: np.ndarray, spacing) -> float:
    """Total area of voxel faces bordering background or the grid edge."""
    sx, sy, sz = spacing
    face_area = (sy * sz, sx * sz, sx * sy)
    padded = np.pad(data.astype(bool), 1)
    total = 0.0
    for axis, area in enumerate(face_area):
        transitions = np.count_nonzero(np.diff(padded, axis=axis))
        total += transitions * area
    return total


def _centroid(data: np.ndarray, spacing) -> np.ndarray:
    return (np.argwhere(data).mean(axis=0) + 0.5) * np.asarray(spacing)


def shape_features(mask: VoxelMask) -> tuple[float, float, float, float, float]:
    """volume, surface area, surface/volume, elongation, roundness of one mask.

    Elongation is ``sqrt(l1 / l2)`` for the two largest eigenvalues of the
    second-moment matrix of the mask treated as a union of solid voxels (the
    covariance of voxel centers plus ``s**2 / 12`` per axis).
    """
    data = mask.data
    n = int(np.count_nonzero(data))
    if n == 0:
        raise EmptyForegroundError("features of an empty organ mask")
    sp = np.asarray(mask.spacing, dtype=float)
    volume = n * float(np.prod(sp))
    area = exposed_face_area(data, sp)
    pts = (np.argwhere(data) + 0.5) * sp
    cov = np.cov(pts, rowvar=False, bias=True) if n > 1 else np.zeros((3, 3))
    cov = cov + np.diag(sp**2 / 12.0)
    eig = np.sort(np.linalg.eigvalsh(cov))[::-1]
    elongation = math.sqrt(eig[0] / eig[1])
    sphere_area = math.pi ** (1.0 / 3.0) * (6.0 * volume) ** (2.0 / 3.0)
    return volume, area, area / volume, elongation, sphere_area / area


def extract_features(case: MultiChannelVolume, organ_index) -> FeatureVector:
    """Six features of one organ channel.

    The centroid offset is the distance from this organ's centroid to the mean
    centroid of the other nonempty channels (0 if there are none).
    """
    i = case.index(organ_index) if isinstance(organ_index, str) else int(organ_index)
    masks = case.masks()
    volume, area, sav, elong, round_ = shape_features(masks[i])
    others = [_centroid(m.data, m.spacing) for j, m in enumerate(masks) if j != i and not m.is_empty()]
    if others:
        offset = float(np.linalg.norm(_centroid(masks[i].data, masks[i].spacing) - np.mean(others, axis=0)))
    else:
        offset = 0.0
    return FeatureVector(volume, area, sav, elong, round_, offset)


class TooFewSamplesError(ValueError):
    pass


class NotPositiveDefiniteError(ValueError):
    pass


@dataclass
class GaussianModel:
    organ: str
    mean: np.ndarray
    covariance: np.ndarray

    def to_text(self) -> str:
        """Organ name, 6 means, 21 lower-triangle covariance entries."""
        tri = self.covariance[np.tril_indices(N_FEATURES)]
        return "\n".join([
            f"gaussian {self.organ}",
            "mean " + " ".join(repr(float(v)) for v in self.mean),
            "cov " + " ".join(repr(float(v)) for v in tri),
        ])

    @classmethod
    def from_text(cls, text: str) -> "GaussianModel":
        lines = [l for l in text.strip().splitlines() if l.strip()]
        if len(lines) != 3 or not lines[0].startswith("gaussian "):
            raise ValueError("malformed gaussian model block")
        organ = lines[0][len("gaussian "):]
        mean = np.array([float(v) for v in lines[1].split()[1:]])
        tri = [float(v) for v in lines[2].split()[1:]]
        if mean.size != N_FEATURES or len(tri) != N_FEATURES * (N_FEATURES + 1) // 2:
            raise ValueError("gaussian model block has the wrong number of entries")
        cov = np.zeros((N_FEATURES, N_FEATURES))
        cov[np.tril_indices(N_FEATURES)] = tri
        cov = cov + np.tril(cov, -1).T
        return cls(organ, mean, cov)


def fit_gaussian(features: Sequence, organ: str = "") -> GaussianModel:
    """Sample mean and unbiased covariance, ridge-regularized when near singular.

    When the smallest eigenvalue of the correlation-scaled covariance is below
    ``RIDGE_EPS``, ``RIDGE_EPS * var_j`` is added to each diagonal entry
    (``RIDGE_EPS`` alone for zero-variance features).
    """
    x = np.array([f.as_array() if isinstance(f, FeatureVector) else np.asarray(f, float) for f in features])
    if x.ndim != 2 or x.shape[0] <= x.shape[1]:
        raise TooFewSamplesError(f"need more than {N_FEATURES} samples, got {len(x)}")
    mean = x.mean(axis=0)
    cov = np.cov(x, rowvar=False, ddof=1)
    var = np.diag(cov).copy()
    scale = np.where(var > 0, var, 1.0)
    d = 1.0 / np.sqrt(scale)
    smallest = np.linalg.eigvalsh(cov * np.outer(d, d))[0]
    if smallest < RIDGE_EPS:
        cov = cov + np.diag(RIDGE_EPS * scale)
    return GaussianModel(organ, mean, cov)


def mahalanobis_score(model: GaussianModel, x) -> float:
    """``sqrt((x - mu)^T Sigma^-1 (x - mu))`` through a Cholesky solve."""
    v = (x.as_array() if isinstance(x, FeatureVector) else np.asarray(x, float)) - model.mean
    try:
        chol = linalg.cholesky(model.covariance, lower=True)
    except linalg.LinAlgError:
        raise NotPositiveDefiniteError(f"covariance for {model.organ!r} is not positive definite") from None
    z = linalg.solve_triangular(chol, v, lower=True)
    return float(math.sqrt(z @ z))
