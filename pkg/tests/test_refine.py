from __future__ import annotations

from dataclasses import replace

import numpy as np
import pytest

from crossview_pid.geometry import PointCloud, Pose
from crossview_pid.pid import CandidateSpec, assemble_branches, d_branch, generate_candidates, i_branch, p_branch
from crossview_pid.refine import ModelConfig, RefinementNetwork, restrict_branches
from crossview_pid.sampling import FeatureMap, feature_difference
from crossview_pid.spe import positional_embedding, spe_forward
from crossview_pid.tensorlib import Tensor, l1_pose_loss

from conftest import SMALL_NOISE


def small_model_config(**kw) -> ModelConfig:
    base = dict(n_points=64, raw_channels=4, channels=4, encoder_hidden=8,
                candidates=CandidateSpec.from_noise(SMALL_NOISE), levels=3, iterations=5, embed_dim=4,
                reduced_points=8, phi_hidden=16, psi_hidden=16, output_scale=(1.0, 1.0, 0.05))
    base.update(kw)
    return ModelConfig(**base)


def zero_heads(model):
    for h in model.heads:
        w, b = h.psi.layers[-1]
        w.data[:] = 0
        b.data[:] = 0


def test_zero_heads_never_move(small_dataset):
    model = RefinementNetwork(small_model_config())
    zero_heads(model)
    batch = small_dataset.batch(range(3))
    res = model.forward(batch)
    assert len(res.trace.steps) == 15
    for s in res.trace.steps:
        np.testing.assert_array_equal(s.pose_out, batch.init)
    assert len(res.estimates) == 3


def test_trace_bookkeeping(small_dataset):
    model = RefinementNetwork(small_model_config())
    res = model.forward(small_dataset.batch(range(4)))
    steps = res.trace.steps
    assert [(s.level, s.iteration) for s in steps] == [(l, i) for l in range(3) for i in range(5)]
    for a, b in zip(steps, steps[1:]):
        np.testing.assert_array_equal(a.pose_out, b.pose_in)
    np.testing.assert_array_equal(steps[-1].pose_out, res.final.data)
    assert (np.abs(res.final.data[:, 2]) <= np.pi).all()


def test_supervise_every_iter_collects_all_steps(small_dataset):
    model = RefinementNetwork(small_model_config(iterations=2))
    res = model.forward(small_dataset.batch([0]), supervise_every_iter=True)
    assert len(res.estimates) == 6
    with pytest.raises(ValueError):
        model.forward(small_dataset.batch([0]), iterations=0)


def test_all_points_masked_gives_zero_update_and_warning(small_dataset):
    model = RefinementNetwork(small_model_config())
    batch = small_dataset.batch([0, 1])
    batch.ground_valid[1] = False
    res = model.forward(batch)
    np.testing.assert_array_equal(res.final.data[1], batch.init[1])
    assert not np.array_equal(res.final.data[0], batch.init[0])
    assert res.trace.warnings and "[1]" in res.trace.warnings[0]


@pytest.mark.parametrize("branches,d_mode", [("P", "norm"), ("PI", "norm"), ("PID", "norm"), ("PD", "axes"),
                                             ("PID", "sum")])
def test_batched_step_matches_single_scene_reference(small_dataset, branches, d_mode):
    cfg = small_model_config(levels=1, iterations=1, branches=branches, d_mode=d_mode,
                             coefficients=(0.9, 1.1, 1.3))
    model = RefinementNetwork(cfg).astype(np.float64)
    batch = small_dataset.batch(range(3), levels=1)
    out = model.predict(batch)
    K = batch.intrinsics[-1]
    k_p, k_i, k_d = cfg.coefficients
    for b in range(3):
        F = FeatureMap(model.encoder(Tensor(batch.levels[-1][b].astype(np.float64))).data)
        Fg = model.encoder(Tensor(batch.ground[b].astype(np.float64))).data
        cloud = PointCloud(batch.clouds[b])
        gv = batch.ground_valid[b]
        p = Pose.from_array(batch.init[b])
        e, valid = feature_difference(F, K, p, cloud, Fg, gv)
        n = len(cloud)
        i_blk = np.zeros((n, 0))
        d_blk = np.zeros((n, 0))
        if "I" in branches:
            i_blk = i_branch(F, K, generate_candidates(p, cfg.candidates), cloud, Fg, k_i, gv)
        if "D" in branches:
            d_blk = d_branch(F, K, p, cloud, Fg, k_d, d_mode, ground_valid=gv)
        w = assemble_branches(p_branch(e, k_p), i_blk, d_blk, valid)
        pe = positional_embedding(model.heads[0].pe_mlp, p, cloud, K)
        dp = spe_forward(model.heads[0], w, pe).data
        np.testing.assert_allclose(out[b], batch.init[b] + dp, rtol=1e-7, atol=1e-7)


def test_branch_reduction_is_bitwise(small_dataset):
    cfg = small_model_config(coefficients=(1.0, 0.0, 0.0))
    full = RefinementNetwork(cfg)
    small = restrict_branches(full, "P")
    assert small.config.width == cfg.channels + 1
    batch = small_dataset.batch(range(6))
    a = full.predict(batch)
    b = small.predict(batch)
    assert a.tobytes() == b.tobytes()
    with pytest.raises(ValueError):
        restrict_branches(small, "PID")


def test_state_dict_round_trip_and_names():
    m = RefinementNetwork(small_model_config())
    names = list(m.named_parameters())
    assert names[0].startswith("encoder.") and "coef.k_p" in names
    other = RefinementNetwork(small_model_config(seed=9))
    other.load_state_dict(m.state_dict())
    for k, v in m.state_dict().items():
        np.testing.assert_array_equal(other.state_dict()[k], v)
    with pytest.raises(KeyError):
        other.load_state_dict({})


def test_config_dict_round_trip():
    cfg = small_model_config(d_axes=(True, False, True))
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        replace(cfg, branches="D")


@pytest.mark.parametrize("kw", [
    # one step: the D block's own derivative through the encoded map
    dict(branches="PID", d_stop_gradient=False, levels=1, iterations=1),
    # several steps with the pose chain kept differentiable
    dict(branches="PI", detach_pose=False, levels=2, iterations=2),
])
def test_end_to_end_gradient_matches_finite_differences(small_dataset, kw):
    cfg = small_model_config(**kw)
    model = RefinementNetwork(cfg, np.float64)
    batch = small_dataset.batch([0, 1], levels=cfg.levels)

    def loss():
        return float(l1_pose_loss(model.forward(batch, record=False).estimates, batch.gt).data)

    out = model.forward(batch, record=False)
    l1_pose_loss(out.estimates, batch.gt).backward()
    params = model.named_parameters()
    h = 1e-6
    rng = np.random.default_rng(0)
    names = ["coef.k_p", "coef.k_i", "encoder.0.weight", f"level{cfg.levels - 1}.phi.0.weight", "level0.psi.1.bias"]
    if "D" in cfg.branches:
        names.append("coef.k_d")
    for name in names:
        p = params[name]
        for _ in range(3):
            idx = tuple(rng.integers(s) for s in p.shape)
            old = p.data[idx]
            p.data[idx] = old + h
            hi = loss()
            p.data[idx] = old - h
            lo = loss()
            p.data[idx] = old
            num = (hi - lo) / (2 * h)
            assert p.grad[idx] == pytest.approx(num, rel=1e-3, abs=1e-7), name
