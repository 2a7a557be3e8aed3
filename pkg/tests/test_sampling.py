from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.ndimage import map_coordinates

from crossview_pid.geometry import PointCloud, Pose, SatelliteIntrinsics
from crossview_pid.sampling import (
    FeatureMap,
    avg_pool2,
    bilinear_gradient,
    bilinear_sample,
    build_pyramid,
    feature_difference,
    sample_tensor,
    spatial_gradient_tensor,
)
from crossview_pid.tensorlib import Tensor


@pytest.fixture()
def fmap():
    return FeatureMap(np.random.default_rng(0).normal(size=(9, 11, 3)))


def test_feature_map_validation():
    with pytest.raises(ValueError):
        FeatureMap(np.full((3, 3, 1), np.nan))
    with pytest.raises(ValueError):
        FeatureMap(np.zeros((3, 3, 0)))
    fm = FeatureMap(np.zeros((4, 5)))
    assert (fm.height, fm.width, fm.channels) == (4, 5, 1)
    assert not fm.data.flags.writeable


@settings(max_examples=40, deadline=None)
@given(st.floats(0, 10), st.floats(0, 8))
def test_bilinear_matches_scipy(u, v):
    data = np.random.default_rng(1).normal(size=(9, 11, 3))
    vals, ok = bilinear_sample(FeatureMap(data), np.array([u, v]))
    assert ok
    ref = [map_coordinates(data[..., c], [[v], [u]], order=1)[0] for c in range(3)]
    np.testing.assert_allclose(vals, ref, atol=1e-12)


def test_out_of_region_is_zero_and_flagged(fmap):
    vals, ok = bilinear_sample(fmap, np.array([[-0.01, 2.0], [10.0, 8.0], [10.01, 1.0], [np.nan, 1.0]]))
    assert ok.tolist() == [False, True, False, False]
    assert (vals[[0, 2, 3]] == 0).all()
    np.testing.assert_allclose(vals[1], fmap.data[8, 10])


def test_integer_coordinates_hit_pixels(fmap):
    vals, _ = bilinear_sample(fmap, np.array([[3.0, 4.0]]))
    np.testing.assert_array_equal(vals[0], fmap.data[4, 3])


def test_bilinear_gradient_matches_finite_differences(fmap):
    rng = np.random.default_rng(2)
    uv = rng.uniform([0.2, 0.2], [9.8, 7.8], size=(50, 2))
    # keep the stencil inside one cell
    frac = uv - np.floor(uv)
    uv = np.floor(uv) + np.clip(frac, 0.05, 0.95)
    g, ok = bilinear_gradient(fmap, uv)
    h = 1e-6
    for k in range(2):
        d = np.zeros(2)
        d[k] = h
        num = (bilinear_sample(fmap, uv + d)[0] - bilinear_sample(fmap, uv - d)[0]) / (2 * h)
        np.testing.assert_allclose(g[..., k], num, atol=1e-7)
    assert ok.all()


def test_pyramid_levels_and_intrinsics():
    data = np.random.default_rng(3).normal(size=(16, 16, 2))
    K = SatelliteIntrinsics.centered(16, 16, 0.5)
    pyr = build_pyramid(FeatureMap(data), 3, K)
    assert [lv.height for lv in pyr.levels] == [4, 8, 16]
    assert pyr.meters_per_pixel == (2.0, 1.0, 0.5)
    np.testing.assert_allclose(pyr.levels[1].data, data.reshape(8, 2, 8, 2, 2).mean(axis=(1, 3)))
    # a metric point maps to the pooled-cell center on every level
    xy = np.array([1.25, -0.75])
    for Kl, lv in zip(pyr.intrinsics, pyr.levels):
        assert Kl.half_extent == K.half_extent
    K1 = pyr.intrinsics[1]
    u = K1.cu + xy[0] / K1.meters_per_pixel
    u0 = K.cu + xy[0] / K.meters_per_pixel
    assert u == pytest.approx((u0 - 0.5) / 2)
    with pytest.raises(ValueError):
        build_pyramid(FeatureMap(np.zeros((2, 2, 1))), 3)


def test_avg_pool_odd_sizes_truncate():
    assert avg_pool2(np.ones((5, 7, 1))).shape == (2, 3, 1)


def test_feature_difference_zero_at_truth_and_masks():
    data = np.random.default_rng(4).uniform(size=(32, 32, 2))
    K = SatelliteIntrinsics.centered(32, 32, 0.5)
    cloud = PointCloud(np.array([[0.0, 1.6, 2.0], [1.0, 1.6, 4.0], [0.0, 1.6, 40.0]]))
    p = Pose(0.3, -1.0, 0.2)
    from crossview_pid.geometry import project_satellite
    uv, _ = project_satellite(K, p, cloud)
    Fg, _ = bilinear_sample(FeatureMap(data), uv)
    e, valid = feature_difference(FeatureMap(data), K, p, cloud, Fg)
    assert valid.tolist() == [True, True, False]
    assert np.abs(e).max() == 0.0
    _, valid = feature_difference(FeatureMap(data), K, p, cloud, Fg, ground_valid=[False, True, True])
    assert valid.tolist() == [False, True, False]
    with pytest.raises(ValueError):
        feature_difference(FeatureMap(data), K, p, cloud, Fg[:, :1])


def _fd(fn, x, h=1e-6):
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        hi = fn()
        flat[i] = old - h
        lo = fn()
        flat[i] = old
        gf[i] = (hi - lo) / (2 * h)
    return g


def test_sample_tensor_forward_and_gradients():
    rng = np.random.default_rng(5)
    maps = rng.normal(size=(2, 6, 7, 3))
    uv = rng.uniform([0.1, 0.1], [5.9, 4.9], size=(2, 4, 2))
    uv = np.floor(uv) + np.clip(uv - np.floor(uv), 0.05, 0.95)
    uv[1, 3] = [-1.0, 2.0]  # out of region
    w = rng.normal(size=(2, 4, 3))
    m_t = Tensor(maps, requires_grad=True)
    uv_t = Tensor(uv, requires_grad=True)
    out, valid = sample_tensor(m_t, uv_t)
    for b in range(2):
        ref, ok = bilinear_sample(FeatureMap(maps[b]), uv[b])
        np.testing.assert_allclose(out.data[b], ref, atol=1e-12)
        np.testing.assert_array_equal(valid[b], ok)
    out.backward(w)

    def f():
        return float((sample_tensor(Tensor(maps), Tensor(uv))[0].data * w).sum())

    np.testing.assert_allclose(m_t.grad, _fd(f, maps), atol=1e-7)
    np.testing.assert_allclose(uv_t.grad, _fd(f, uv), atol=1e-6)


def test_spatial_gradient_tensor_matches_reference_and_is_linear_in_map():
    rng = np.random.default_rng(6)
    maps = rng.normal(size=(1, 5, 5, 2))
    uv = rng.uniform(0.2, 3.8, size=(1, 6, 2))
    m_t = Tensor(maps, requires_grad=True)
    g, _ = spatial_gradient_tensor(m_t, uv)
    ref, _ = bilinear_gradient(FeatureMap(maps[0]), uv[0])
    np.testing.assert_allclose(g.data[0], ref, atol=1e-12)
    w = rng.normal(size=g.shape)
    g.backward(w)

    def f():
        return float((spatial_gradient_tensor(Tensor(maps), uv)[0].data * w).sum())

    np.testing.assert_allclose(m_t.grad, _fd(f, maps), atol=1e-7)
