"""Branch features built from cross-view feature differences.

* P block: the residual at the current pose, scaled by ``k_p``.
* I block: residuals at a fixed, ordered set of candidate poses around the
  current pose, concatenated along channels and scaled by ``k_i``.  Channel
  block ``c`` always belongs to candidate ``c``.
* D block: the pose-derivative of the residual, ``d e / d(x, y, theta)``,
  reduced over the pose axes and scaled by ``k_d``.

These are the single-scene reference implementations; the batched network
path in :mod:`crossview_pid.refine` is tested against them.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose, SatelliteIntrinsics, project_satellite, satellite_jacobians
from .sampling import FeatureMap, bilinear_gradient, feature_difference
from .tensorlib import Parameter

BRANCH_CONFIGS = ("P", "PI", "PD", "PID")
D_MODES = ("norm", "sum", "axes")
CANDIDATE_MODES = ("axis", "grid")


class PidCoefficients:
    """The three learnable branch gains, each a one-element parameter."""

    def __init__(self, k_p: float = 1.0, k_i: float = 1.0, k_d: float = 1.0, dtype=np.float32):
        self.k_p = Parameter(np.array([k_p]), "coef.k_p", dtype)
        self.k_i = Parameter(np.array([k_i]), "coef.k_i", dtype)
        self.k_d = Parameter(np.array([k_d]), "coef.k_d", dtype)

    def parameters(self) -> list[Parameter]:
        return [self.k_p, self.k_i, self.k_d]

    def values(self) -> dict[str, float]:
        return {p.name.split(".")[1]: float(p.data[0]) for p in self.parameters()}


@dataclass(frozen=True)
class CandidateSpec:
    """Search radii and steps per axis (meters, meters, radians).

    A zero radius disables that axis.  ``mode`` is ``"axis"`` (perturb one
    axis at a time) or ``"grid"`` (full Cartesian product minus the center).
    """

    radii: tuple[float, float, float] = (0.0, 0.0, 0.0)
    steps: tuple[float, float, float] = (0.0, 0.0, 0.0)
    mode: str = "axis"

    def __post_init__(self):
        radii = tuple(float(r) for r in self.radii)
        steps = tuple(float(s) for s in self.steps)
        if len(radii) != 3 or len(steps) != 3:
            raise ValueError("candidate radii and steps need three components")
        if self.mode not in CANDIDATE_MODES:
            raise ValueError(f"unknown candidate mode {self.mode!r}, expected one of {CANDIDATE_MODES}")
        for axis, r, s in zip("xyt", radii, steps):
            if r < 0 or s < 0:
                raise ValueError(f"axis {axis}: radius and step must be non-negative")
            if r == 0:
                continue
            if s == 0:
                raise ValueError(f"axis {axis}: step must be positive when radius {r} > 0")
            if s > r * (1 + 1e-12):
                raise ValueError(f"axis {axis}: step {s} exceeds radius {r}")
        object.__setattr__(self, "radii", radii)
        object.__setattr__(self, "steps", steps)

    @classmethod
    def from_noise(cls, noise_radii, per_direction: int = 2, fraction_of_range: float = 0.25,
                   mode: str = "axis") -> CandidateSpec:
        """Derive radii/steps from the initial-pose noise ``+-r``.

        The search radius is ``fraction_of_range`` of the full noise range
        ``2 r`` (so the default is half the noise radius: ``+-20 m`` noise gives
        a 10 m radius).  ``per_direction`` samples are spread evenly along
        each axis, half on each side; zero disables the I branch.
        """
        if per_direction < 0 or per_direction % 2:
            raise ValueError("candidates per direction must be a non-negative even number")
        if per_direction == 0:
            return cls(mode=mode)
        radii = tuple(fraction_of_range * 2.0 * float(r) for r in noise_radii)
        half = per_direction // 2
        steps = tuple(r / half for r in radii)
        return cls(radii, steps, mode)

    @classmethod
    def from_range(cls, widths, per_direction: int = 2, fraction_of_range: float = 0.25,
                   mode: str = "axis") -> CandidateSpec:
        """Like :meth:`from_noise` but given the full noise range ``2 r`` per axis."""
        return cls.from_noise(tuple(0.5 * float(w) for w in widths), per_direction, fraction_of_range, mode)

    def counts(self) -> tuple[int, int, int]:
        """Number of offsets on each side of the center per axis."""
        return tuple(
            0 if r == 0 else int(math.floor(r / s + 1e-9)) for r, s in zip(self.radii, self.steps)
        )

    def offsets(self) -> np.ndarray:
        """Ordered ``(K, 3)`` pose offsets, excluding the zero offset."""
        counts = self.counts()
        if self.mode == "axis":
            rows = []
            for axis in range(3):
                for sign in (1, -1):
                    for k in range(1, counts[axis] + 1):
                        off = [0.0, 0.0, 0.0]
                        off[axis] = sign * k * self.steps[axis]
                        rows.append(off)
            return np.array(rows, dtype=np.float64).reshape(-1, 3)
        ranges = [range(-n, n + 1) for n in counts]
        rows = [
            [i * self.steps[0], j * self.steps[1], k * self.steps[2]]
            for i, j, k in itertools.product(*ranges)
            if (i, j, k) != (0, 0, 0)
        ]
        return np.array(rows, dtype=np.float64).reshape(-1, 3)

    def __len__(self) -> int:
        return self.offsets().shape[0]


def generate_candidates(p: Pose, spec: CandidateSpec) -> list[Pose]:
    base = p.as_array()
    return [Pose.from_array(base + off) for off in spec.offsets()]


def _k(k) -> float:
    if isinstance(k, Parameter):
        return k.data.reshape(-1)[0]
    return k


def p_branch(e: np.ndarray, k_p) -> np.ndarray:
    return _k(k_p) * np.asarray(e)


def i_branch(F_s: FeatureMap, K_s: SatelliteIntrinsics, candidates, cloud, F_g_points, k_i,
             ground_valid=None) -> np.ndarray:
    """``concat_c k_i * e(candidate_c)``; zero width when there are no candidates."""
    n = np.asarray(F_g_points).shape[0]
    if len(candidates) == 0:
        return np.zeros((n, 0))
    blocks = []
    for cand in candidates:
        e, _ = feature_difference(F_s, K_s, cand, cloud, F_g_points, ground_valid)
        blocks.append(_k(k_i) * e)
    return np.concatenate(blocks, axis=1)


def residual_pose_jacobian(F_s: FeatureMap, K_s: SatelliteIntrinsics, p: Pose, cloud,
                           valid=None) -> np.ndarray:
    """``d e / d(x, y, theta)`` per point, shape ``(N, C, 3)``.

    Chain of the bilinear spatial gradient ``dF/d(u, v)`` and the satellite
    projection Jacobian ``d(u, v)/d(x, y, theta)``.  The ground term of the
    residual does not depend on the pose.  Masked points get zero rows.
    """
    pts = cloud.points if hasattr(cloud, "points") else np.asarray(cloud, dtype=np.float64)
    uv, sat_valid = project_satellite(K_s, p, pts)
    dF_duv, in_bounds = bilinear_gradient(F_s, uv)
    J = satellite_jacobians(K_s, p.as_array(), pts)
    G = dF_duv @ J
    ok = sat_valid & in_bounds
    if valid is not None:
        ok = ok & np.asarray(valid, dtype=bool)
    return np.where(ok[:, None, None], G, 0.0)


def reduce_pose_gradient(G: np.ndarray, mode: str = "norm", axes=(True, True, True)) -> np.ndarray:
    """Collapse ``(..., C, 3)`` pose gradients to D-branch channels."""
    if mode not in D_MODES:
        raise ValueError(f"unknown D mode {mode!r}, expected one of {D_MODES}")
    mask = np.asarray(axes, dtype=G.dtype).reshape(3)
    G = G * mask
    if mode == "norm":
        return np.sqrt((G * G).sum(axis=-1))
    if mode == "sum":
        return G.sum(axis=-1)
    # axes: one C-wide block per pose axis, x block first
    return np.swapaxes(G, -1, -2).reshape(G.shape[:-2] + (3 * G.shape[-2],))


def d_branch(F_s: FeatureMap, K_s: SatelliteIntrinsics, p: Pose, cloud, F_g_points, k_d,
             mode: str = "norm", axes=(True, True, True), ground_valid=None) -> np.ndarray:
    F_g_points = np.asarray(F_g_points)
    if F_g_points.shape[1] != F_s.channels:
        raise ValueError(
            f"channel mismatch: satellite map has {F_s.channels} channels, "
            f"ground point features have shape {F_g_points.shape}"
        )
    G = residual_pose_jacobian(F_s, K_s, p, cloud, ground_valid)
    return _k(k_d) * reduce_pose_gradient(G, mode, axes)


def d_width(channels: int, mode: str) -> int:
    return 3 * channels if mode == "axes" else channels


@dataclass(frozen=True)
class BranchFeatures:
    """Per-point ``[P | I | D | validity]`` features with recorded block widths."""

    data: np.ndarray = field(repr=False)
    widths: dict = field(default_factory=dict)

    def block(self, name: str) -> np.ndarray:
        order = ("p", "i", "d", "valid")
        start = sum(self.widths[k] for k in order[: order.index(name)])
        return self.data[:, start:start + self.widths[name]]

    @property
    def width(self) -> int:
        return self.data.shape[1]


def assemble_branches(p_block, i_block, d_block, validity) -> BranchFeatures:
    blocks = {
        "p": np.asarray(p_block).reshape(len(p_block), -1),
        "i": np.asarray(i_block).reshape(len(i_block), -1),
        "d": np.asarray(d_block).reshape(len(d_block), -1),
        "valid": np.asarray(validity, dtype=np.float64).reshape(len(validity), -1),
    }
    rows = {k: v.shape[0] for k, v in blocks.items()}
    if len(set(rows.values())) != 1:
        raise ValueError(f"per-point row counts differ between blocks: {rows}")
    data = np.concatenate([blocks[k] for k in ("p", "i", "d", "valid")], axis=1)
    return BranchFeatures(data, {k: v.shape[1] for k, v in blocks.items()})


def branch_width(channels: int, branches: str, n_candidates: int, d_mode: str = "norm") -> int:
    """Feature width of a branch configuration, including the validity channel."""
    if branches not in BRANCH_CONFIGS:
        raise ValueError(f"unknown branch configuration {branches!r}, expected one of {BRANCH_CONFIGS}")
    w = channels + 1
    if "I" in branches:
        w += n_candidates * channels
    if "D" in branches:
        w += d_width(channels, d_mode)
    return w
