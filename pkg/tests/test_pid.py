from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crossview_pid.geometry import PointCloud, Pose, SatelliteIntrinsics, project_satellite
from crossview_pid.pid import (
    CandidateSpec,
    PidCoefficients,
    assemble_branches,
    branch_width,
    d_branch,
    generate_candidates,
    i_branch,
    p_branch,
    reduce_pose_gradient,
    residual_pose_jacobian,
)
from crossview_pid.sampling import FeatureMap, bilinear_sample, feature_difference


def test_worked_example_six_candidates():
    spec = CandidateSpec((10.0, 10.0, math.radians(5)), (10.0, 10.0, math.radians(5)))
    off = spec.offsets()
    assert len(spec) == 6
    expected = np.array([[10, 0, 0], [-10, 0, 0], [0, 10, 0], [0, -10, 0],
                         [0, 0, math.radians(5)], [0, 0, -math.radians(5)]])
    np.testing.assert_allclose(off, expected)
    # derived from the noise radii: a quarter of the full +-20 m / +-10 deg range
    derived = CandidateSpec.from_noise((20.0, 20.0, math.radians(10)))
    np.testing.assert_allclose(derived.offsets(), expected)


def test_candidate_counts_and_modes():
    assert len(CandidateSpec.from_noise((20, 20, 0.2), per_direction=4)) == 12
    assert len(CandidateSpec.from_noise((20, 20, 0.2), per_direction=0)) == 0
    grid = CandidateSpec((1, 1, 1), (1, 1, 1), "grid")
    assert len(grid) == 26
    assert len(CandidateSpec((1, 0, 0), (1, 0, 0))) == 2
    with pytest.raises(ValueError):
        CandidateSpec((1, 1, 1), (2, 1, 1))
    with pytest.raises(ValueError):
        CandidateSpec((1, 1, 1), (0, 1, 1))
    with pytest.raises(ValueError):
        CandidateSpec.from_noise((1, 1, 1), per_direction=3)
    with pytest.raises(ValueError):
        CandidateSpec(mode="ring")


def test_generate_candidates_wraps_angles():
    spec = CandidateSpec((0, 0, 0.5), (0, 0, 0.5))
    cands = generate_candidates(Pose(0, 0, math.pi - 0.1), spec)
    assert cands[0].theta == pytest.approx(-math.pi + 0.4)


def test_branch_widths():
    assert branch_width(8, "P", 6) == 9
    assert branch_width(8, "PI", 6) == 57
    assert branch_width(8, "PD", 6) == 17
    assert branch_width(8, "PID", 6) == 65
    assert branch_width(8, "PID", 6, "axes") == 81
    with pytest.raises(ValueError):
        branch_width(8, "ID", 6)


def _scene(seed=0, n=20):
    rng = np.random.default_rng(seed)
    data = rng.uniform(size=(40, 40, 3))
    from scipy.ndimage import gaussian_filter
    data = gaussian_filter(data, (1.5, 1.5, 0))
    K = SatelliteIntrinsics.centered(40, 40, 0.5)
    pts = np.column_stack([rng.uniform(-4, 4, n), np.full(n, 1.6), rng.uniform(1, 6, n)])
    return FeatureMap(data), K, PointCloud(pts)


def test_p_and_i_blocks():
    F, K, cloud = _scene()
    gt = Pose(0.5, -0.5, 0.1)
    uv, _ = project_satellite(K, gt, cloud)
    Fg, _ = bilinear_sample(F, uv)
    e, _ = feature_difference(F, K, gt, cloud, Fg)
    assert np.abs(p_branch(e, 0.7)).max() == 0.0
    spec = CandidateSpec((1, 1, 0.1), (1, 1, 0.1))
    cands = generate_candidates(gt, spec)
    blk = i_branch(F, K, cands, cloud, Fg, 2.0)
    assert blk.shape == (len(cloud), 6 * 3)
    e2, _ = feature_difference(F, K, cands[2], cloud, Fg)
    np.testing.assert_allclose(blk[:, 6:9], 2.0 * e2)
    assert i_branch(F, K, [], cloud, Fg, 1.0).shape == (len(cloud), 0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_residual_jacobian_matches_finite_differences(seed):
    F, K, cloud = _scene(seed % 7)
    rng = np.random.default_rng(seed)
    p = Pose(*rng.uniform([-2, -2, -0.3], [2, 2, 0.3]))
    Fg = rng.normal(size=(len(cloud), 3))
    G = residual_pose_jacobian(F, K, p, cloud)
    h = 1e-6
    for k in range(3):
        d = np.zeros(3)
        d[k] = h
        hi, vh = feature_difference(F, K, Pose.from_array(p.as_array() + d), cloud, Fg)
        lo, vl = feature_difference(F, K, Pose.from_array(p.as_array() - d), cloud, Fg)
        uv, _ = project_satellite(K, p, cloud)
        # skip points whose stencil straddles a cell edge (the surface has a kink there)
        uvh, _ = project_satellite(K, Pose.from_array(p.as_array() + d), cloud)
        uvl, _ = project_satellite(K, Pose.from_array(p.as_array() - d), cloud)
        same = (np.floor(uvh) == np.floor(uvl)).all(axis=1) & vh & vl
        num = (hi - lo) / (2 * h)
        np.testing.assert_allclose(G[same, :, k], num[same], rtol=1e-4, atol=1e-6)


def test_reduce_modes():
    G = np.random.default_rng(0).normal(size=(5, 4, 3))
    np.testing.assert_allclose(reduce_pose_gradient(G, "norm"), np.linalg.norm(G, axis=-1))
    np.testing.assert_allclose(reduce_pose_gradient(G, "sum", (True, False, True)), G[..., 0] + G[..., 2])
    ax = reduce_pose_gradient(G, "axes")
    assert ax.shape == (5, 12)
    np.testing.assert_allclose(ax[:, 4:8], G[..., 1])
    with pytest.raises(ValueError):
        reduce_pose_gradient(G, "max")


def test_d_branch_scales_and_checks_channels():
    F, K, cloud = _scene()
    Fg = np.zeros((len(cloud), 3))
    d1 = d_branch(F, K, Pose(0, 0, 0), cloud, Fg, 1.0)
    d2 = d_branch(F, K, Pose(0, 0, 0), cloud, Fg, 2.5)
    np.testing.assert_allclose(d2, 2.5 * d1)
    with pytest.raises(ValueError):
        d_branch(F, K, Pose(0, 0, 0), cloud, Fg[:, :2], 1.0)


def test_assemble_and_blocks():
    bf = assemble_branches(np.ones((4, 2)), np.zeros((4, 6)), np.full((4, 2), 3.0), np.ones(4))
    assert bf.width == 11
    np.testing.assert_array_equal(bf.block("d"), np.full((4, 2), 3.0))
    assert bf.block("valid").shape == (4, 1)
    with pytest.raises(ValueError):
        assemble_branches(np.ones((4, 2)), np.zeros((3, 6)), np.ones((4, 2)), np.ones(4))


def test_coefficients_start_at_one():
    c = PidCoefficients()
    assert c.values() == {"k_p": 1.0, "k_i": 1.0, "k_d": 1.0}
    assert [p.name for p in c.parameters()] == ["coef.k_p", "coef.k_i", "coef.k_d"]
