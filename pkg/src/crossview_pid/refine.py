"""Coarse-to-fine iterative pose refinement: the batched, differentiable network.

One step at pyramid level ``l``:

1. project the cloud at the current pose and at every candidate offset,
2. sample the encoded satellite level and subtract the encoded ground features,
3. build ``[P | I | D | validity]`` per point plus a positional embedding,
4. regress ``dp`` with the level's head and add it to the pose.

Poses are float64; network features use the parameter dtype (float32 by
default, float64 for gradient checks).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .geometry import (
    SatelliteIntrinsics,
    ground_plane_coords,
    in_map,
    metric_to_pixel,
    satellite_jacobians,
    wrap_angle,
)
from .pid import (
    BRANCH_CONFIGS,
    D_MODES,
    CandidateSpec,
    PidCoefficients,
    branch_width,
    d_width,
    reduce_pose_gradient,
)
from .sampling import sample_tensor, spatial_gradient_tensor
from .spe import HEADS, SpeParams, pe_inputs, spe_forward
from .tensorlib import (
    Mlp,
    Parameter,
    Tensor,
    add,
    cast,
    concat,
    l2_norm,
    matmul,
    mul,
    no_grad,
    reshape,
    sub,
    transpose,
    tsum,
)


@dataclass(frozen=True)
class ModelConfig:
    """Architecture and behaviour switches of :class:`RefinementNetwork`."""

    n_points: int = 256
    raw_channels: int = 4
    channels: int = 8
    encoder_hidden: int = 16
    branches: str = "PID"
    d_mode: str = "norm"
    d_axes: tuple = (True, True, True)
    d_stop_gradient: bool = True
    candidates: CandidateSpec = field(default_factory=CandidateSpec)
    levels: int = 3
    iterations: int = 1
    embed_dim: int = 16
    reduced_points: int = 32
    phi_hidden: int = 64
    psi_hidden: int = 64
    head: str = "spe"
    output_scale: tuple = (1.0, 1.0, 1.0)
    output_decay: float = 1.0
    detach_pose: bool = True
    coefficients: tuple = (1.0, 1.0, 1.0)
    seed: int = 0

    def __post_init__(self):
        if self.branches not in BRANCH_CONFIGS:
            raise ValueError(f"unknown branch configuration {self.branches!r}, expected one of {BRANCH_CONFIGS}")
        if self.d_mode not in D_MODES:
            raise ValueError(f"unknown D mode {self.d_mode!r}, expected one of {D_MODES}")
        if self.head not in HEADS:
            raise ValueError(f"unknown head {self.head!r}, expected one of {HEADS}")
        if self.levels < 1 or self.iterations < 1:
            raise ValueError("levels and iterations must be at least 1")
        if len(tuple(self.d_axes)) != 3 or len(tuple(self.output_scale)) != 3:
            raise ValueError("d_axes and output_scale need three components")
        object.__setattr__(self, "d_axes", tuple(bool(a) for a in self.d_axes))
        object.__setattr__(self, "output_scale", tuple(float(s) for s in self.output_scale))
        object.__setattr__(self, "coefficients", tuple(float(c) for c in self.coefficients))

    @property
    def n_candidates(self) -> int:
        return len(self.candidates) if "I" in self.branches else 0

    @property
    def width(self) -> int:
        return branch_width(self.channels, self.branches, self.n_candidates, self.d_mode)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["candidates"] = {"radii": list(self.candidates.radii), "steps": list(self.candidates.steps),
                           "mode": self.candidates.mode}
        d["d_axes"] = list(self.d_axes)
        d["output_scale"] = list(self.output_scale)
        d["coefficients"] = list(self.coefficients)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        d = dict(d)
        c = d.pop("candidates")
        cand = c if isinstance(c, CandidateSpec) else CandidateSpec(tuple(c["radii"]), tuple(c["steps"]), c["mode"])
        for k in ("d_axes", "output_scale", "coefficients"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(candidates=cand, **d)


@dataclass
class StepRecord:
    level: int
    iteration: int
    pose_in: np.ndarray
    pose_out: np.ndarray
    n_valid: np.ndarray


@dataclass
class RefinementTrace:
    steps: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    @property
    def poses(self) -> list:
        """Pose after every step, ``(B, 3)`` each."""
        return [s.pose_out for s in self.steps]


@dataclass
class ForwardResult:
    estimates: list  # Tensors (B, 3): supervised poses in order
    final: Tensor
    trace: RefinementTrace


def project_tensor(poses: Tensor, clouds: np.ndarray, K_s: SatelliteIntrinsics) -> Tensor:
    """Satellite pixels of every point at every pose: ``(B, K, 3) -> (B, K, N, 2)``."""
    pts = np.asarray(clouds, dtype=np.float64)[:, None]  # (B, 1, N, 3)
    uv = metric_to_pixel(K_s, ground_plane_coords(poses.data, pts))

    def backward(g):
        J = satellite_jacobians(K_s, poses.data, pts)  # (B, K, N, 2, 3)
        return (np.einsum("bkni,bknij->bkj", g, J).astype(poses.dtype),)

    return Tensor.from_op(uv.astype(poses.dtype), (poses,), backward, "project_satellite")


def _wrap_shift(pose: Tensor) -> Tensor:
    raw = pose.data[..., 2]
    shift = np.zeros_like(pose.data)
    shift[..., 2] = wrap_angle(raw) - raw
    return add(pose, shift)


class RefinementNetwork:
    """Shared encoder, branch gains and one estimator head per pyramid level."""

    def __init__(self, config: ModelConfig, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(config.seed)
        cfg = config
        # one encoder for both views; it has to learn features invariant to the domain shift
        self.encoder = Mlp((cfg.raw_channels, cfg.encoder_hidden, cfg.channels), rng, "encoder", dtype=dtype)
        self.coefficients = PidCoefficients(*cfg.coefficients, dtype=dtype)
        self.heads = []
        for l in range(cfg.levels):
            scale = np.asarray(cfg.output_scale) * cfg.output_decay ** l
            self.heads.append(SpeParams(
                cfg.n_points, cfg.width, rng, cfg.embed_dim, cfg.reduced_points, cfg.phi_hidden,
                cfg.psi_hidden, scale, cfg.head, f"level{l}", dtype,
            ))
        self._offsets = cfg.candidates.offsets() if "I" in cfg.branches else np.zeros((0, 3))

    # -- parameters ----------------------------------------------------------
    def parameters(self) -> list[Parameter]:
        ps = self.encoder.parameters()
        ps += self.coefficients.parameters()
        for h in self.heads:
            ps += h.parameters()
        return ps

    def named_parameters(self) -> dict[str, Parameter]:
        out = {}
        for p in self.parameters():
            if p.name in out:
                raise RuntimeError(f"duplicate parameter name {p.name}")
            out[p.name] = p
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.named_parameters().items()}

    def load_state_dict(self, state: dict) -> None:
        params = self.named_parameters()
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, p in params.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise ValueError(f"{k}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(self.dtype).copy()

    def astype(self, dtype) -> RefinementNetwork:
        """Copy with every parameter cast to ``dtype``."""
        other = RefinementNetwork(self.config, dtype)
        other.load_state_dict(self.state_dict())
        return other

    # -- forward ---------------------------------------------------------------
    def encode(self, batch):
        sat = [self.encoder(Tensor(lv.astype(self.dtype))) for lv in batch.levels[-self.config.levels:]]
        ground = self.encoder(Tensor(np.asarray(batch.ground, dtype=self.dtype)))
        return sat, ground

    def step(self, level: int, pose: Tensor, sat: Tensor, ground: Tensor, batch, K_s: SatelliteIntrinsics,
             trace: RefinementTrace | None = None) -> Tensor:
        cfg = self.config
        B, N = batch.clouds.shape[:2]
        C = cfg.channels
        Kc = self._offsets.shape[0]
        offsets = np.concatenate([np.zeros((1, 3)), self._offsets], axis=0)  # (1+Kc, 3)
        all_poses = add(reshape(pose, (B, 1, 3)), offsets.astype(pose.dtype))
        uv = project_tensor(all_poses, batch.clouds, K_s)  # (B, 1+Kc, N, 2)
        vals, valid = sample_tensor(sat, reshape(uv, (B, (1 + Kc) * N, 2)))
        valid = valid.reshape(B, 1 + Kc, N) & np.asarray(batch.ground_valid, dtype=bool)[:, None, :]
        mask = valid.astype(self.dtype)[..., None]
        e = mul(sub(reshape(vals, (B, 1 + Kc, N, C)), reshape(ground, (B, 1, N, C))), mask)

        coef = self.coefficients
        blocks = [mul(e[:, 0], coef.k_p)]
        if "I" in cfg.branches and Kc:
            cand = reshape(transpose(e[:, 1:], (0, 2, 1, 3)), (B, N, Kc * C))
            blocks.append(mul(cand, coef.k_i))
        if "D" in cfg.branches:
            blocks.append(mul(self._d_block(sat, uv.data[:, 0], valid[:, 0], batch.clouds, pose.data, K_s),
                              coef.k_d))
        v0 = valid[:, 0]
        blocks.append(Tensor(v0.astype(self.dtype)[..., None]))
        w = concat(blocks, axis=-1)

        hx, hy = K_s.half_extent
        xy = mul(sub(uv[:, 0], np.array([K_s.cu, K_s.cv], dtype=pose.dtype)), K_s.meters_per_pixel)
        pe_in = pe_inputs(cast(xy, self.dtype), np.asarray(batch.clouds)[..., 1], (hx, hy))
        head = self.heads[level]
        pe = head.pe_mlp(pe_in)
        dp = cast(spe_forward(head, w, pe), pose.dtype)

        n_valid = v0.sum(axis=1)
        ok = n_valid > 0
        if not ok.all() and trace is not None:
            bad = np.flatnonzero(~ok).tolist()
            trace.warnings.append(f"level {level}: no valid points for batch rows {bad}; pose left unchanged")
        dp = mul(dp, ok.astype(pose.dtype)[:, None])
        new = _wrap_shift(add(pose, dp))
        if trace is not None:
            trace.steps.append(StepRecord(level, -1, pose.data.copy(), new.data.copy(), n_valid))
        return new

    def _d_block(self, sat: Tensor, uv0: np.ndarray, valid0: np.ndarray, clouds, poses, K_s) -> Tensor:
        cfg = self.config
        J = satellite_jacobians(K_s, poses, clouds)  # (B, N, 2, 3)
        if cfg.d_stop_gradient:
            with no_grad():
                grad_uv, _ = spatial_gradient_tensor(sat, uv0)
            G = grad_uv.data.astype(np.float64) @ J
            G = np.where(valid0[..., None, None], G, 0.0)
            return Tensor(reduce_pose_gradient(G, cfg.d_mode, cfg.d_axes).astype(self.dtype))
        grad_uv, _ = spatial_gradient_tensor(sat, uv0)  # (B, N, C, 2)
        mask = (J * np.asarray(cfg.d_axes, dtype=np.float64)) * valid0[..., None, None]
        G = matmul(grad_uv, mask.astype(self.dtype))  # (B, N, C, 3)
        if cfg.d_mode == "norm":
            return l2_norm(G, axis=-1)
        if cfg.d_mode == "sum":
            return tsum(G, axis=-1)
        B, N, C, _ = G.shape
        return reshape(transpose(G, (0, 1, 3, 2)), (B, N, 3 * C))

    def forward(self, batch, supervise_every_iter: bool = False, iterations: int | None = None,
                record: bool = True) -> ForwardResult:
        """Run all levels (coarse to fine) from ``batch.init``."""
        cfg = self.config
        iters = cfg.iterations if iterations is None else int(iterations)
        if iters < 1:
            raise ValueError("iterations must be at least 1")
        sat, ground = self.encode(batch)
        intr = list(batch.intrinsics)[-cfg.levels:]
        pose = Tensor(np.asarray(batch.init, dtype=np.float64))
        trace = RefinementTrace() if record else None
        estimates = []
        for l in range(cfg.levels):
            for it in range(iters):
                new = self.step(l, pose, sat[l], ground, batch, intr[l], trace)
                if trace is not None:
                    trace.steps[-1].iteration = it
                if supervise_every_iter or it == iters - 1:
                    estimates.append(new)
                pose = Tensor(new.data) if cfg.detach_pose else new
        return ForwardResult(estimates, estimates[-1], trace)

    __call__ = forward

    def predict(self, batch, iterations: int | None = None) -> np.ndarray:
        with no_grad():
            return self.forward(batch, iterations=iterations, record=False).final.data.copy()


def restrict_branches(model: RefinementNetwork, branches: str) -> RefinementNetwork:
    """A smaller-branch model sharing every weight that the smaller model has.

    Rows of each head's first estimator layer are selected channel by channel,
    so a full model whose dropped branches are zero computes the same numbers.
    """
    cfg = model.config
    if branches not in BRANCH_CONFIGS:
        raise ValueError(f"unknown branch configuration {branches!r}")
    if not set(branches) <= set(cfg.branches):
        raise ValueError(f"cannot restrict {cfg.branches} to {branches}")
    small = RefinementNetwork(replace(cfg, branches=branches), model.dtype)
    C = cfg.channels
    Kc = model._offsets.shape[0]
    spans = {"P": (0, C)}
    start = C
    if "I" in cfg.branches:
        spans["I"] = (start, start + Kc * C)
        start += Kc * C
    if "D" in cfg.branches:
        dw = d_width(C, cfg.d_mode)
        spans["D"] = (start, start + dw)
        start += dw
    keep = list(range(*spans["P"]))
    for b in ("I", "D"):
        if b in branches:
            keep += list(range(*spans[b]))
    keep += list(range(start, cfg.width + cfg.embed_dim))  # validity + embedding

    state = model.state_dict()
    for l, head in enumerate(small.heads):
        if head.head != "spe":
            continue
        key = f"level{l}.psi.0.weight"
        W = state[key]
        H = W.shape[1]
        W3 = W.reshape(cfg.width + cfg.embed_dim, cfg.reduced_points, H)
        state[key] = W3[keep].reshape(-1, H)
    if cfg.head != "spe":
        for l in range(cfg.levels):
            key = f"level{l}.psi.0.weight"
            state[key] = state[key][keep]
    small.load_state_dict(state)
    return small
