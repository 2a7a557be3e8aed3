"""Error decomposition and recall metrics.

Position errors are split in the ground-truth heading frame: the heading
direction of a pose with azimuth ``theta`` is ``R(theta) (0, 1)``.
Longitudinal error is the component along it, lateral the perpendicular one.
Both are reported as absolute values.  Recalls are per axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..geometry import Pose, wrap_angle

DEFAULT_THRESHOLDS_M = (0.25, 1.0, 5.0)
DEFAULT_THRESHOLDS_DEG = (0.25, 1.0, 5.0)


def decompose_error(est: Pose, gt: Pose) -> tuple[float, float, float]:
    """``(lateral m, longitudinal m, orientation deg)``, all non-negative."""
    lat, lon, ori = decompose_errors(est.as_array()[None], gt.as_array()[None])
    return float(lat[0]), float(lon[0]), float(ori[0])


def decompose_errors(est: np.ndarray, gt: np.ndarray):
    """Vectorised :func:`decompose_error` over ``(n, 3)`` pose arrays."""
    est = np.asarray(est, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    dx = est[:, 0] - gt[:, 0]
    dy = est[:, 1] - gt[:, 1]
    c = np.cos(gt[:, 2])
    s = np.sin(gt[:, 2])
    # heading h = (-s, c); lateral axis (c, s)
    lon = -s * dx + c * dy
    lat = c * dx + s * dy
    ori = np.degrees(np.abs(wrap_angle(est[:, 2] - gt[:, 2])))
    return np.abs(lat), np.abs(lon), ori


@dataclass(frozen=True)
class Thresholds:
    meters: tuple = DEFAULT_THRESHOLDS_M
    degrees: tuple = DEFAULT_THRESHOLDS_DEG


def _key(t: float) -> str:
    return f"{t:g}"


def recall(errors, threshold: float) -> float:
    """Percentage of entries strictly below ``threshold``."""
    e = np.asarray(errors, dtype=np.float64)
    if e.size == 0:
        raise ValueError("recall of an empty error list")
    return 100.0 * float(np.count_nonzero(e < threshold)) / e.size


def compute_metrics(est, gt, thresholds: Thresholds = Thresholds()) -> dict:
    """Metrics block for ``(n, 3)`` estimates against ground truth.

    Mean/median position error uses the Euclidean norm; recalls are per axis.
    """
    est = np.asarray(est, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    if est.shape[0] == 0:
        raise ValueError("compute_metrics needs at least one scene")
    if est.shape != gt.shape:
        raise ValueError(f"estimate/ground-truth shape mismatch {est.shape} vs {gt.shape}")
    lat, lon, ori = decompose_errors(est, gt)
    pos = np.hypot(est[:, 0] - gt[:, 0], est[:, 1] - gt[:, 1])
    out = {
        "count": int(est.shape[0]),
        "mean": {"position_m": float(pos.mean()), "lateral_m": float(lat.mean()),
                 "longitudinal_m": float(lon.mean()), "orientation_deg": float(ori.mean())},
        "median": {"position_m": float(np.median(pos)), "lateral_m": float(np.median(lat)),
                   "longitudinal_m": float(np.median(lon)), "orientation_deg": float(np.median(ori))},
        "recall": {
            "lateral": {_key(t): recall(lat, t) for t in thresholds.meters},
            "longitudinal": {_key(t): recall(lon, t) for t in thresholds.meters},
            "orientation": {_key(t): recall(ori, t) for t in thresholds.degrees},
        },
    }
    return out


def axis_mean_abs(est, gt) -> np.ndarray:
    """Mean absolute error per pose component (x m, y m, theta rad)."""
    est = np.asarray(est, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    d = est - gt
    d[:, 2] = wrap_angle(d[:, 2])
    return np.abs(d).mean(axis=0)


def thresholds_from_lists(meters, degrees) -> Thresholds:
    m = tuple(float(x) for x in meters)
    d = tuple(float(x) for x in degrees)
    if not m or not d or any(not (x > 0 and math.isfinite(x)) for x in m + d):
        raise ValueError("thresholds must be positive and finite")
    return Thresholds(m, d)
