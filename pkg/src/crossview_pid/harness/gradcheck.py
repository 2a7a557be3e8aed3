"""Finite-difference oracles for the analytic derivatives, runnable on demand.

Three suites:

* ``geometry``: satellite projection Jacobians against central differences of
  the projection itself,
* ``d_branch``: the residual pose-derivative (bilinear gradient chained with
  the Jacobian) against central differences of the residual,
* ``tensorlib``: every differentiable op's backward rule against central
  differences of a random linear read-out of its output (float64).

Each failure names the check and the instance seed so it can be replayed.
"""

from __future__ import annotations

import contextlib
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .. import geometry, pid, refine, sampling, spe, tensorlib as tl
from ..geometry import Pose, SatelliteIntrinsics, project_satellite_batch, satellite_jacobians
from ..pid import residual_pose_jacobian
from ..sampling import FeatureMap, feature_difference

TOLERANCES = {"geometry": 1e-4, "d_branch": 1e-4, "tensorlib": 1e-3}
FAULTS = ("satellite_jacobian_theta_sign",)


def rel_err(analytic, numeric, floor: float = 1e-8) -> float:
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return float(np.linalg.norm(a - n) / scale)


@dataclass
class SuiteResult:
    name: str
    tolerance: float
    instances: int = 0
    max_rel_err: float = 0.0
    failures: list = field(default_factory=list)

    def record(self, check: str, seed, err: float) -> None:
        self.instances += 1
        self.max_rel_err = max(self.max_rel_err, err)
        if not err < self.tolerance:
            self.failures.append({"check": check, "seed": seed, "rel_err": err})

    @property
    def passed(self) -> bool:
        return not self.failures

    def to_dict(self) -> dict:
        return {"instances": self.instances, "max_rel_err": self.max_rel_err, "tolerance": self.tolerance,
                "passed": self.passed, "failures": self.failures[:20], "n_failures": len(self.failures)}


@contextlib.contextmanager
def inject_fault(name: str | None):
    """Temporarily replace a derivative with a deliberately wrong one."""
    if name is None:
        yield
        return
    if name not in FAULTS:
        raise ValueError(f"unknown fault {name!r}, expected one of {FAULTS}")
    original = geometry.satellite_jacobians

    def flipped(K_s, poses, points):
        J = original(K_s, poses, points)
        J[..., 2] = -J[..., 2]
        return J

    modules = (geometry, pid, refine)
    for m in modules:
        m.satellite_jacobians = flipped
    try:
        yield
    finally:
        for m in modules:
            m.satellite_jacobians = original


# -- geometry --------------------------------------------------------------------
def _random_intrinsics(rng) -> SatelliteIntrinsics:
    w = int(rng.integers(32, 129))
    return SatelliteIntrinsics.centered(w, w, float(rng.uniform(0.2, 1.0)))


def check_geometry(n: int = 100, seed: int = 0, h: float = 1e-6) -> SuiteResult:
    res = SuiteResult("geometry", TOLERANCES["geometry"])
    for k in range(n):
        s = [seed, 0, k]
        rng = np.random.default_rng(s)
        K = _random_intrinsics(rng)
        pose = np.array([rng.uniform(-5, 5), rng.uniform(-5, 5), rng.uniform(-math.pi, math.pi)])
        pts = np.stack([rng.uniform(-10, 10, 8), rng.uniform(-2, 2, 8), rng.uniform(1, 20, 8)], axis=1)
        J = geometry.satellite_jacobians(K, pose, pts)
        num = np.zeros_like(J)
        for a in range(3):
            d = np.zeros(3)
            d[a] = h
            up, _ = project_satellite_batch(K, pose + d, pts)
            dn, _ = project_satellite_batch(K, pose - d, pts)
            num[..., a] = (up - dn) / (2 * h)
        res.record("satellite_jacobian", s, rel_err(J, num))
    return res


# -- D branch --------------------------------------------------------------------
def _away_from_cells(uv: np.ndarray, J: np.ndarray, h: float, margin: float = 1e-3) -> np.ndarray:
    """Points whose finite-difference stencil stays inside one bilinear cell."""
    reach = h * np.abs(J).sum(axis=-1) + margin  # (N, 2)
    frac = uv - np.floor(uv)
    return ((frac > reach) & (frac < 1 - reach)).all(axis=-1)


def check_d_branch(n: int = 100, seed: int = 0, h: float = 1e-6) -> SuiteResult:
    res = SuiteResult("d_branch", TOLERANCES["d_branch"])
    for k in range(n):
        s = [seed, 1, k]
        rng = np.random.default_rng(s)
        size = 24
        K = SatelliteIntrinsics.centered(size, size, float(rng.uniform(0.5, 1.5)))
        C = int(rng.integers(1, 5))
        fmap = FeatureMap(rng.normal(size=(size, size, C)))
        pose = Pose(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-math.pi, math.pi))
        half = 0.35 * size * K.meters_per_pixel
        pts = np.stack([rng.uniform(-half, half, 12), rng.uniform(-2, 2, 12), rng.uniform(-half, half, 12)], axis=1)
        g = rng.normal(size=(12, C))
        G = residual_pose_jacobian(fmap, K, pose, pts)
        uv, _ = project_satellite_batch(K, pose.as_array(), pts)
        keep = _away_from_cells(uv, satellite_jacobians(K, pose.as_array(), pts), h)
        if not keep.any():
            continue
        num = np.zeros_like(G)
        base = pose.as_array()
        for a in range(3):
            d = np.zeros(3)
            d[a] = h
            # keep theta unwrapped so the stencil is symmetric
            up, _ = feature_difference(fmap, K, Pose(*(base + d)), pts, g)
            dn, _ = feature_difference(fmap, K, Pose(*(base - d)), pts, g)
            num[..., a] = (up - dn) / (2 * h)
        res.record("residual_pose_jacobian", s, rel_err(G[keep], num[keep]))
    return res


# -- tensorlib -------------------------------------------------------------------
def _fd_check(fn, inputs: list[np.ndarray], rng, h: float = 1e-6) -> float:
    """Backward of ``sum(w * fn(*inputs))`` vs central differences, all inputs."""
    ts = [tl.Tensor(x.copy(), requires_grad=True) for x in inputs]
    out = fn(*ts)
    w = rng.normal(size=out.shape)
    (out * w).sum().backward()
    analytic = np.concatenate([(t.grad if t.grad is not None else np.zeros_like(t.data)).ravel() for t in ts])
    numeric = []
    for i, x in enumerate(inputs):
        g = np.zeros_like(x)
        flat = g.reshape(-1)
        for j in range(x.size):
            xp = x.copy().reshape(-1)
            xm = x.copy().reshape(-1)
            xp[j] += h
            xm[j] -= h
            args_p = [a if k != i else xp.reshape(x.shape) for k, a in enumerate(inputs)]
            args_m = [a if k != i else xm.reshape(x.shape) for k, a in enumerate(inputs)]
            with tl.no_grad():
                fp = float((fn(*[tl.Tensor(a) for a in args_p]).data * w).sum())
                fm = float((fn(*[tl.Tensor(a) for a in args_m]).data * w).sum())
            flat[j] = (fp - fm) / (2 * h)
        numeric.append(g.ravel())
    return rel_err(analytic, np.concatenate(numeric))


def _away_from_zero(rng, shape, low: float = 0.05):
    x = rng.uniform(low, 1.0, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def _op_cases():
    """``name -> builder(rng) -> (fn, inputs)``."""

    def bilinear(rng):
        B, H, W, C, M = 2, 5, 6, 2, 4
        fmap = rng.normal(size=(B, H, W, C))
        uv = np.stack([rng.uniform(0.2, W - 1.2, (B, M)), rng.uniform(0.2, H - 1.2, (B, M))], axis=-1)
        frac = uv - np.floor(uv)
        uv = np.where(np.abs(frac - 0.5) > 0.45, np.floor(uv) + 0.5, uv)
        return (lambda f, p: sampling.sample_tensor(f, p)[0]), [fmap, uv]

    def spatial(rng):
        B, H, W, C, M = 2, 4, 5, 2, 3
        uv = np.stack([rng.uniform(0, W - 1, (B, M)), rng.uniform(0, H - 1, (B, M))], axis=-1)
        return (lambda f: sampling.spatial_gradient_tensor(f, uv)[0]), [rng.normal(size=(B, H, W, C))]

    def project(rng):
        K = SatelliteIntrinsics.centered(64, 64, float(rng.uniform(0.3, 1.0)))
        pts = np.stack([rng.uniform(-5, 5, (2, 4)), rng.uniform(-1, 1, (2, 4)), rng.uniform(1, 10, (2, 4))], -1)
        return (lambda p: refine.project_tensor(p, pts, K)), [rng.normal(size=(2, 3, 3))]

    def psi_linear(rng):
        x = rng.normal(size=(2, 3, 4))
        return (lambda a, w, b: spe._blocked_linear(a, w, b)), [x, rng.normal(size=(12, 5)), rng.normal(size=5)]

    def phi(rng):
        mlp = tl.Mlp((6, 5, 3), rng, "phi", bias=False, dtype=np.float64)
        w0, w1 = (layer[0].data for layer in mlp.layers)

        def f(x, a, b):
            mlp.layers[0] = (a, None)
            mlp.layers[1] = (b, None)
            return spe._phi_forward(mlp, x)

        return f, [_away_from_zero(rng, (2, 3, 6)), w0, w1]

    def maxpool(rng):
        x = rng.normal(size=(2, 5, 3))
        return spe._max_over_points, [x]

    def softmax(rng):
        return spe._softmax_over_points, [rng.normal(size=(2, 5, 1))]

    def loss(rng):
        gt = rng.normal(size=(3, 3))
        return (lambda a, b: tl.l1_pose_loss([a, b], gt, 0.7)), [gt + _away_from_zero(rng, (3, 3)),
                                                                   gt + _away_from_zero(rng, (3, 3))]

    cases = {
        "add": lambda r: (tl.add, [r.normal(size=(3, 4)), r.normal(size=(4,))]),
        "sub": lambda r: (tl.sub, [r.normal(size=(2, 3)), r.normal(size=(2, 1))]),
        "mul": lambda r: (tl.mul, [r.normal(size=(3, 4)), r.normal(size=(1, 4))]),
        "matmul": lambda r: (tl.matmul, [r.normal(size=(3, 4)), r.normal(size=(4, 2))]),
        "matmul_batched": lambda r: (tl.matmul, [r.normal(size=(2, 3, 4)), r.normal(size=(4, 2))]),
        "matmul_broadcast": lambda r: (tl.matmul, [r.normal(size=(2, 3, 4)), r.normal(size=(2, 4, 2))]),
        "leaky_relu": lambda r: (tl.leaky_relu, [_away_from_zero(r, (3, 4))]),
        "abs": lambda r: (tl.tabs, [_away_from_zero(r, (3, 4))]),
        "sum": lambda r: ((lambda x: tl.tsum(x, axis=1)), [r.normal(size=(3, 4))]),
        "mean": lambda r: ((lambda x: tl.mean(x, axis=0)), [r.normal(size=(3, 4))]),
        "l2_norm": lambda r: (tl.l2_norm, [r.normal(size=(3, 4))]),
        "concat": lambda r: ((lambda a, b: tl.concat([a, b], axis=-1)), [r.normal(size=(2, 3)), r.normal(size=(2, 2))]),
        "reshape": lambda r: ((lambda x: tl.reshape(x, (6, 2))), [r.normal(size=(3, 4))]),
        "transpose": lambda r: ((lambda x: tl.transpose(x, (2, 0, 1))), [r.normal(size=(2, 3, 2))]),
        "getitem": lambda r: ((lambda x: x[:, 1:3]), [r.normal(size=(3, 4))]),
        "cast": lambda r: ((lambda x: tl.cast(x, np.float64)), [r.normal(size=(3,))]),
        "bilinear_sample": bilinear,
        "bilinear_gradient": spatial,
        "project_satellite": project,
        "psi_linear": psi_linear,
        "phi_shared_mlp": phi,
        "max_over_points": maxpool,
        "softmax_over_points": softmax,
        "l1_pose_loss": loss,
    }
    return cases


def check_tensorlib(n: int = 100, seed: int = 0, ops=None) -> SuiteResult:
    res = SuiteResult("tensorlib", TOLERANCES["tensorlib"])
    cases = _op_cases()
    for name in ops or cases:
        for k in range(n):
            s = [seed, 2, k, sorted(cases).index(name)]
            rng = np.random.default_rng(s)
            fn, inputs = cases[name](rng)
            res.record(name, s, _fd_check(fn, inputs, rng))
    return res


SUITES = {"geometry": check_geometry, "d_branch": check_d_branch, "tensorlib": check_tensorlib}


def gradcheck(instances: int = 100, seed: int = 0, suites=None, fault: str | None = None) -> dict:
    """Run the oracle suites; ``fault`` injects a known-wrong derivative."""
    t0 = time.perf_counter()
    out = {}
    with inject_fault(fault):
        for name in suites or SUITES:
            if name not in SUITES:
                raise ValueError(f"unknown suite {name!r}, expected one of {tuple(SUITES)}")
            out[name] = SUITES[name](instances, seed).to_dict()
    failing = sorted({f["check"] for s in out.values() for f in s["failures"]})
    return {
        "passed": all(s["passed"] for s in out.values()),
        "failing_checks": failing,
        "suites": out,
        "fault": fault,
        "seconds": time.perf_counter() - t0,
    }
