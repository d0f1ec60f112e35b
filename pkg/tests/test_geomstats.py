import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from organqa.geomstats import (
    RIDGE_EPS,
    FeatureVector,
    GaussianModel,
    TooFewSamplesError,
    extract_features,
    fit_gaussian,
    mahalanobis_score,
    shape_features,
)
from organqa.voxelgrid import EmptyForegroundError, MultiChannelVolume, VoxelMask


def one_channel(data, spacing=(1.0, 1.0, 1.0)):
    return MultiChannelVolume(("organ",), np.asarray(data, np.uint8)[None], spacing)


def ball(n=32, r=10.0, c=None):
    c = n / 2 if c is None else c
    g = np.meshgrid(*(np.arange(n) + 0.5,) * 3, indexing="ij")
    return (sum((x - c) ** 2 for x in g) <= r * r).astype(np.uint8)


def loop_features(data, spacing):
    """Voxel and face enumeration with explicit loops."""
    nx, ny, nz = data.shape
    sx, sy, sz = spacing
    vox = []
    area = 0.0
    for i, j, k in itertools.product(range(nx), range(ny), range(nz)):
        if not data[i, j, k]:
            continue
        vox.append(((i + 0.5) * sx, (j + 0.5) * sy, (k + 0.5) * sz))
        for d, a in (((1, 0, 0), sy * sz), ((0, 1, 0), sx * sz), ((0, 0, 1), sx * sy)):
            for sign in (1, -1):
                q = (i + sign * d[0], j + sign * d[1], k + sign * d[2])
                inside = 0 <= q[0] < nx and 0 <= q[1] < ny and 0 <= q[2] < nz
                if not inside or not data[q]:
                    area += a
    n = len(vox)
    volume = n * sx * sy * sz
    mean = [sum(v[a] for v in vox) / n for a in range(3)]
    m = [[sum((v[a] - mean[a]) * (v[b] - mean[b]) for v in vox) / n for b in range(3)] for a in range(3)]
    for a, s in enumerate(spacing):
        m[a][a] += s * s / 12
    eig = sorted(np.linalg.eigvalsh(np.array(m)), reverse=True)
    elong = math.sqrt(eig[0] / eig[1])
    rnd = (math.pi ** (1 / 3) * (6 * volume) ** (2 / 3)) / area
    return volume, area, area / volume, elong, rnd


def test_single_voxel():
    d = np.zeros((3, 3, 3))
    d[1, 1, 1] = 1
    f = extract_features(one_channel(d), 0)
    assert (f.volume, f.surface_area, f.sav_ratio) == (1.0, 6.0, 6.0)
    assert f.elongation == pytest.approx(1.0, abs=1e-12)
    assert f.centroid_offset == 0.0


def test_bar_face_count():
    d = np.zeros((4, 3, 3))
    d[1:3, 1, 1] = 1
    f = extract_features(one_channel(d), "organ")
    assert (f.volume, f.surface_area) == (2.0, 10.0)


def test_mask_touching_grid_edge_counts_boundary_faces():
    f = extract_features(one_channel(np.ones((2, 2, 2))), 0)
    assert f.surface_area == 24.0


def test_ball_matches_loop_oracle():
    d = ball(32, 10)
    sp = (1.0, 1.0, 1.0)
    got = shape_features(VoxelMask(d, sp))
    want = loop_features(d, sp)
    assert got[:3] == want[:3]
    assert got[3] == pytest.approx(want[3], rel=1e-12)
    assert got[4] == pytest.approx(want[4], rel=1e-12)
    assert 0.6 < got[4] <= 1.0


def test_anisotropic_blob_matches_loop_oracle():
    rng = np.random.default_rng(1)
    d = (rng.random((7, 6, 5)) < 0.5).astype(np.uint8)
    sp = (0.5, 1.25, 3.0)
    got = shape_features(VoxelMask(d, sp))
    want = loop_features(d, sp)
    np.testing.assert_allclose(got, want, rtol=1e-12)


def test_centroid_offset_between_channels():
    v = np.zeros((2, 10, 10, 10), np.uint8)
    v[0, 1, 1, 1] = 1
    v[1, 4, 5, 1] = 1
    case = MultiChannelVolume(("a", "b"), v, (2.0, 1.0, 1.0))
    assert extract_features(case, "a").centroid_offset == pytest.approx(math.hypot(6.0, 4.0))


def test_empty_organ_raises():
    with pytest.raises(EmptyForegroundError):
        extract_features(one_channel(np.zeros((3, 3, 3))), 0)


@settings(max_examples=30, deadline=None)
@given(shift=st.tuples(*(st.integers(-4, 4),) * 3), r=st.floats(2.0, 5.0))
def test_features_translation_invariant(shift, r):
    base = ball(24, r)
    moved = np.roll(base, shift, axis=(0, 1, 2))
    a = shape_features(VoxelMask(base))
    b = shape_features(VoxelMask(moved))
    np.testing.assert_allclose(a, b, rtol=1e-12)


def test_spacing_scaling_and_bounds():
    d = ball(20, 5)
    a = shape_features(VoxelMask(d, (1.0, 1.0, 1.0)))
    b = shape_features(VoxelMask(d, (2.0, 0.5, 3.0)))
    assert b[0] == pytest.approx(a[0] * 3.0)
    c = shape_features(VoxelMask(d, (2.0, 2.0, 2.0)))
    assert c[1] == pytest.approx(a[1] * 4.0)
    for r in (2.0, 4.0, 7.5, 10.0):
        _, _, _, elong, rnd = shape_features(VoxelMask(ball(32, r)))
        assert elong >= 1.0
        assert rnd <= 1.05


# -- Gaussian fit --------------------------------------------------------------


def test_identical_samples_give_ridge_only():
    x = np.array([1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
    m = fit_gaussian([x] * 8, "o")
    np.testing.assert_array_equal(m.mean, x)
    np.testing.assert_array_equal(m.covariance, RIDGE_EPS * np.eye(6))


def test_too_few_samples():
    with pytest.raises(TooFewSamplesError):
        fit_gaussian([np.arange(6.0)] * 6)


def test_two_clusters_match_direct_formula():
    rng = np.random.default_rng(4)
    a = rng.normal(0, 1, (10, 6))
    b = rng.normal(5, 2, (10, 6))
    x = np.empty((20, 6))
    x[0::2], x[1::2] = a, b
    m = fit_gaussian([FeatureVector.from_array(r) for r in x])
    mu = [sum(x[i, j] for i in range(20)) / 20 for j in range(6)]
    cov = [[sum((x[i, j] - mu[j]) * (x[i, k] - mu[k]) for i in range(20)) / 19 for k in range(6)] for j in range(6)]
    np.testing.assert_allclose(m.mean, mu, atol=1e-10)
    np.testing.assert_allclose(m.covariance, cov, atol=1e-10)


def test_mahalanobis_trivial_cases():
    m = GaussianModel("o", np.arange(6.0), np.diag([4.0, 1, 1, 1, 1, 1]))
    assert mahalanobis_score(m, np.arange(6.0)) == 0.0
    x = np.arange(6.0)
    x[0] += 2 * 2.0
    assert mahalanobis_score(m, x) == pytest.approx(2.0, abs=1e-15)


def test_mahalanobis_matches_explicit_inverse():
    rng = np.random.default_rng(8)
    a = rng.normal(size=(6, 6))
    cov = a @ a.T + 0.5 * np.eye(6)
    m = GaussianModel("o", rng.normal(size=6), cov)
    inv = np.linalg.inv(cov)
    for _ in range(10):
        x = rng.normal(size=6) * 3
        v = x - m.mean
        assert mahalanobis_score(m, x) == pytest.approx(math.sqrt(v @ inv @ v), rel=1e-9)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**9))
def test_mahalanobis_affine_invariance(seed):
    rng = np.random.default_rng(seed)
    # well-conditioned mixing keeps both fits out of the ridge branch, which is
    # deliberately not affine invariant
    x = rng.normal(size=(30, 6)) @ (rng.normal(size=(6, 6)) + 4 * np.eye(6))
    q = rng.normal(size=6) * 2
    a = rng.normal(size=(6, 6)) + 4 * np.eye(6)
    b = rng.normal(size=6)
    m1, m2 = fit_gaussian(list(x)), fit_gaussian(list(x @ a.T + b))
    assert np.array_equal(m1.covariance, np.cov(x, rowvar=False))
    s1 = mahalanobis_score(m1, q)
    s2 = mahalanobis_score(m2, a @ q + b)
    assert s2 == pytest.approx(s1, rel=1e-6)


def test_model_text_round_trip():
    rng = np.random.default_rng(2)
    m = fit_gaussian(list(rng.normal(size=(12, 6))), "femoral_head_left")
    back = GaussianModel.from_text(m.to_text())
    assert back.organ == m.organ
    np.testing.assert_array_equal(back.mean, m.mean)
    np.testing.assert_array_equal(back.covariance, m.covariance)
