from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from crossview_pid.geometry import Pose
from crossview_pid.harness.metrics import compute_metrics, decompose_error, decompose_errors, recall


def test_decompose_examples():
    assert decompose_error(Pose(0, 3, 0), Pose(0, 0, 0)) == pytest.approx((0.0, 3.0, 0.0))
    assert decompose_error(Pose(1, 2, 0.1), Pose(1, 2, 0.1)) == (0.0, 0.0, 0.0)
    assert decompose_error(Pose(3, 0, math.pi / 2), Pose(0, 0, math.pi / 2)) == pytest.approx((0.0, 3.0, 0.0))
    assert decompose_error(Pose(0, 0, math.radians(179)), Pose(0, 0, math.radians(-179)))[2] == pytest.approx(2.0)


@given(st.floats(-50, 50), st.floats(-50, 50), st.floats(-3.1, 3.1))
def test_decomposition_preserves_length(dx, dy, th):
    lat, lon, _ = decompose_errors(np.array([[dx, dy, th]]), np.array([[0.0, 0.0, th]]))
    assert math.hypot(lat[0], lon[0]) == pytest.approx(math.hypot(dx, dy), abs=1e-9)


def test_hand_fixture():
    assert recall([0.5, 1.5, 0.9], 1.0) == pytest.approx(66.6666666667)
    gt = np.zeros((3, 3))
    est = np.array([[0.5, 0, 0], [1.5, 0, 0], [0.9, 0, 0]])
    m = compute_metrics(est, gt)
    assert m["recall"]["lateral"]["1"] == pytest.approx(200 / 3)
    assert m["recall"]["longitudinal"]["1"] == 100.0
    assert m["mean"]["lateral_m"] == pytest.approx(2.9 / 3)
    assert m["median"]["position_m"] == pytest.approx(0.9)


def test_threshold_is_strict():
    assert recall([1.0], 1.0) == 0.0


def test_perfect_estimates():
    gt = np.random.default_rng(0).normal(size=(5, 3))
    m = compute_metrics(gt, gt)
    assert all(v == 100.0 for axis in m["recall"].values() for v in axis.values())
    assert m["mean"]["position_m"] == 0.0 and m["count"] == 5


def test_errors():
    with pytest.raises(ValueError):
        compute_metrics(np.zeros((0, 3)), np.zeros((0, 3)))
    with pytest.raises(ValueError):
        compute_metrics(np.zeros((2, 3)), np.zeros((3, 3)))
