"""Spatially aware pose estimator (SPE) and the pooling baselines.

The SPE concatenates branch features with a positional embedding of each
point's satellite-frame coordinates, compresses the point axis with an MLP
whose weights are shared by every channel, flattens ``channels x reduced
points`` and regresses the pose update with a head MLP.

The point axis carries meaning: the head needs a fixed point count ``N``.
"""

from __future__ import annotations

import numpy as np

from .geometry import Pose, SatelliteIntrinsics, ground_plane_coords
from .tensorlib import (
    Mlp,
    Parameter,
    ShapeError,
    Tensor,
    add,
    as_tensor,
    concat,
    leaky_relu,
    matmul,
    mean,
    mul,
    reshape,
    transpose,
)

HEADS = ("spe", "avgpool", "maxpool", "weighted")


class SpeParams:
    """Weights of one estimator head.

    ``pe_mlp``: 3 -> E -> E.  ``phi``: N -> hidden -> N' along the point axis,
    bias-free so an all-zero channel stays exactly zero.  ``psi``:
    ``N' * (W + E)`` -> hidden -> 3.  ``output_scale`` multiplies the head
    output so the regression targets are O(1).
    """

    def __init__(self, n_points: int, width: int, rng: np.random.Generator, embed_dim: int = 16,
                 reduced_points: int = 32, phi_hidden: int = 64, psi_hidden: int = 64,
                 output_scale=(1.0, 1.0, 1.0), head: str = "spe", name: str = "spe",
                 dtype=np.float32):
        if head not in HEADS:
            raise ValueError(f"unknown head {head!r}, expected one of {HEADS}")
        self.n_points = int(n_points)
        self.width = int(width)
        self.embed_dim = int(embed_dim)
        self.reduced_points = int(reduced_points)
        self.head = head
        self.output_scale = np.asarray(output_scale, dtype=np.float64).reshape(3)
        self.pe_mlp = Mlp((3, embed_dim, embed_dim), rng, f"{name}.pe", dtype=dtype)
        channels = self.width + self.embed_dim
        if head == "spe":
            self.phi = Mlp((n_points, phi_hidden, reduced_points), rng, f"{name}.phi", bias=False,
                           dtype=dtype)
            self.psi = Mlp((reduced_points * channels, psi_hidden, 3), rng, f"{name}.psi", dtype=dtype)
        elif head == "weighted":
            self.phi = None
            self.psi = Mlp((channels, psi_hidden, 4), rng, f"{name}.psi", dtype=dtype)
        else:
            self.phi = None
            self.psi = Mlp((channels, psi_hidden, 3), rng, f"{name}.psi", dtype=dtype)

    @property
    def flat_width(self) -> int:
        return self.reduced_points * (self.width + self.embed_dim)

    def parameters(self) -> list[Parameter]:
        ps = self.pe_mlp.parameters()
        if self.phi is not None:
            ps += self.phi.parameters()
        return ps + self.psi.parameters()


def pe_inputs(sat_xy: Tensor, heights: np.ndarray, half_extent) -> Tensor:
    """Satellite coordinates ``(x_s, y_s, Y)`` normalised by the map half-extent."""
    hx, hy = half_extent
    scale = np.array([1.0 / hx, 1.0 / hy], dtype=sat_xy.dtype)
    xy = mul(sat_xy, scale)
    z = np.asarray(heights, dtype=sat_xy.dtype)[..., None] / hx
    return concat([xy, Tensor(z)], axis=-1)


def positional_embedding(pe_mlp: Mlp, p: Pose, cloud, K_s: SatelliteIntrinsics) -> Tensor:
    """Embedding ``(N, E)`` of the cloud placed at pose ``p``."""
    pts = cloud.points if hasattr(cloud, "points") else np.asarray(cloud, dtype=np.float64)
    xy = ground_plane_coords(p.as_array(), pts)
    dtype = pe_mlp.layers[0][0].dtype
    inp = pe_inputs(Tensor(xy.astype(dtype)), pts[:, 1], K_s.half_extent)
    return pe_mlp(inp)


def _blocked_linear(x: Tensor, weight: Parameter, bias: Parameter) -> Tensor:
    """``flatten(x) @ W + b`` for channel-major ``x (B, C, M)``, summed channel by channel.

    The per-channel partial products are accumulated in channel order with a
    sequential cumulative sum, so a channel that is exactly zero adds exactly
    zero and never perturbs the rounding of the others.
    """
    B, C, M = x.shape
    H = weight.shape[1]
    if weight.shape[0] != C * M:
        raise ShapeError("psi input", (B, C * M), weight.shape)
    W3 = weight.data.reshape(C, M, H)
    xc = np.ascontiguousarray(np.swapaxes(x.data, 0, 1))  # (C, B, M)
    parts = np.matmul(xc, W3)  # (C, B, H)
    out = np.cumsum(parts, axis=0)[-1] + bias.data

    def backward(g):
        gx = np.swapaxes(np.matmul(g[None], np.swapaxes(W3, 1, 2)), 0, 1) if x.requires_grad else None
        gw = np.matmul(np.swapaxes(xc, 1, 2), g[None]).reshape(C * M, H) if weight.requires_grad else None
        gb = g.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return Tensor.from_op(out, (x, weight, bias), backward, "psi_linear")


def _psi_forward(psi: Mlp, x: Tensor) -> Tensor:
    (w0, b0), rest = psi.layers[0], psi.layers[1:]
    h = _blocked_linear(x, w0, b0)
    for w, b in rest:
        h = leaky_relu(h, psi.slope)
        h = add(matmul(h, w), b)
    return h


def _phi_forward(phi: Mlp, x: Tensor) -> Tensor:
    """Apply ``phi`` along the point axis of ``x (B, C, N)``, channel by channel."""
    xc = transpose(x, (1, 0, 2))  # (C, B, N)
    last = len(phi.layers) - 1
    for i, (w, _) in enumerate(phi.layers):
        xc = matmul(xc, w)
        if i < last:
            xc = leaky_relu(xc, phi.slope)
    return transpose(xc, (1, 0, 2))


def spe_forward(params: SpeParams, w, pe) -> Tensor:
    """Pose update ``(B, 3)`` (or ``(3,)`` for unbatched input).

    ``w`` is ``(B, N, W)`` branch features (or a
    :class:`~crossview_pid.pid.BranchFeatures`), ``pe`` ``(B, N, E)``.
    """
    if hasattr(w, "widths"):
        w = w.data
    w = as_tensor(w)
    pe = as_tensor(pe)
    unbatched = w.ndim == 2
    if unbatched:
        w = reshape(w, (1,) + w.shape)
        pe = reshape(pe, (1,) + pe.shape)
    if w.shape[1] != params.n_points:
        raise ShapeError("spe_forward point count", w.shape, (w.shape[0], params.n_points, params.width))
    if w.shape[2] != params.width or pe.shape[2] != params.embed_dim:
        raise ShapeError("spe_forward feature width", w.shape[1:] + pe.shape[2:],
                         (params.n_points, params.width, params.embed_dim))
    if pe.shape[:2] != w.shape[:2]:
        raise ShapeError("spe_forward embedding", pe.shape, w.shape)
    dtype = params.pe_mlp.layers[0][0].dtype
    if w.dtype != dtype:
        w = Tensor(w.data.astype(dtype)) if not w.requires_grad else w
    x = concat([w, pe], axis=-1)  # (B, N, W+E)
    if params.head == "spe":
        out = spe_head(params, x)
    elif params.head == "avgpool":
        out = avg_pool_head(params.psi, x)
    elif params.head == "maxpool":
        out = max_pool_head(params.psi, x)
    else:
        out = weighted_average_head(params.psi, x)
    out = mul(out, params.output_scale.astype(out.dtype))
    if unbatched:
        out = reshape(out, (3,))
    return out


def spe_head(params: SpeParams, x: Tensor) -> Tensor:
    xt = transpose(x, (0, 2, 1))  # (B, W+E, N)
    comp = _phi_forward(params.phi, xt)  # (B, W+E, N')
    return _psi_forward(params.psi, comp)


# -- pooling baselines ----------------------------------------------------------
def avg_pool_head(psi: Mlp, x: Tensor) -> Tensor:
    """Average point features, then regress."""
    return psi(mean(x, axis=1))


def _max_over_points(x: Tensor) -> Tensor:
    idx = np.argmax(x.data, axis=1)
    out = np.take_along_axis(x.data, idx[:, None, :], axis=1)[:, 0, :]

    def backward(g):
        full = np.zeros_like(x.data)
        np.put_along_axis(full, idx[:, None, :], g[:, None, :], axis=1)
        return (full,)

    return Tensor.from_op(out, (x,), backward, "max")


def max_pool_head(psi: Mlp, x: Tensor) -> Tensor:
    """Channel-wise max over points, then regress."""
    return psi(_max_over_points(x))


def _softmax_over_points(logits: Tensor) -> Tensor:
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    s = ez / ez.sum(axis=1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return Tensor.from_op(s, (logits,), backward, "softmax")


def weighted_average_head(psi: Mlp, x: Tensor) -> Tensor:
    """Per-point pose updates averaged with softmax confidences."""
    per_point = psi(x)  # (B, N, 4)
    dp = per_point[:, :, 0:3]
    conf = _softmax_over_points(per_point[:, :, 3:4])
    return (dp * conf).sum(axis=1)
