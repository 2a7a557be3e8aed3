"""Feature maps, pyramids, bilinear sampling and the cross-view feature difference.

Pixel centers sit on integer coordinates and ``u`` indexes columns, ``v``
rows.  A sample is in bounds on ``[0, W-1] x [0, H-1]``; outside that region
the sample is the zero vector and its flag is False (no clamping).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose, SatelliteIntrinsics, project_satellite
from .tensorlib import Tensor


@dataclass(frozen=True)
class FeatureMap:
    """Dense ``H x W x C`` grid, read-only after construction."""

    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        arr = np.array(self.data, copy=True)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3 or arr.shape[2] < 1:
            raise ValueError(f"feature map must be H x W x C with C >= 1, got {arr.shape}")
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        if not np.isfinite(arr).all():
            raise ValueError("feature map contains non-finite entries")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class Pyramid:
    """Average-pooled levels, coarsest first."""

    levels: tuple[FeatureMap, ...]
    meters_per_pixel: tuple[float, ...]
    intrinsics: tuple[SatelliteIntrinsics, ...] | None = None

    def __len__(self) -> int:
        return len(self.levels)


def _corners(height: int, width: int, uv: np.ndarray):
    """Cell lookup shared by sampling and gradients.

    Returns ``(u0, v0, fu, fv, valid)``; for invalid points the fractions are 0
    and the indices point at cell (0, 0) so gathers stay in range.
    """
    if height < 2 or width < 2:
        raise ValueError(f"bilinear sampling needs at least a 2x2 map, got {height}x{width}")
    uv = np.asarray(uv, dtype=np.float64)
    u = uv[..., 0]
    v = uv[..., 1]
    valid = np.isfinite(u) & np.isfinite(v) & (u >= 0) & (u <= width - 1) & (v >= 0) & (v <= height - 1)
    us = np.where(valid, u, 0.0)
    vs = np.where(valid, v, 0.0)
    u0 = np.minimum(np.floor(us), width - 2).astype(np.int64)
    v0 = np.minimum(np.floor(vs), height - 2).astype(np.int64)
    return u0, v0, us - u0, vs - v0, valid


def _corner_values(data: np.ndarray, u0, v0):
    return data[v0, u0], data[v0, u0 + 1], data[v0 + 1, u0], data[v0 + 1, u0 + 1]


def bilinear_sample(fmap: FeatureMap, uv):
    """Sample ``fmap`` at ``uv`` (``(2,)`` or ``(..., 2)``).

    Returns ``(values[..., C], in_bounds[...])``.
    """
    data = fmap.data
    u0, v0, fu, fv, valid = _corners(fmap.height, fmap.width, uv)
    f00, f10, f01, f11 = _corner_values(data, u0, v0)
    fu = fu[..., None]
    fv = fv[..., None]
    out = (1 - fu) * (1 - fv) * f00 + fu * (1 - fv) * f10 + (1 - fu) * fv * f01 + fu * fv * f11
    out = np.where(valid[..., None], out, 0.0)
    return out, valid


def bilinear_gradient(fmap: FeatureMap, uv):
    """Exact derivative of the bilinear surface, ``(..., C, 2)`` as ``d/du, d/dv``.

    Piecewise constant in ``u`` for ``dF/du`` (linear in ``v``) and vice versa.
    Out-of-region points get a zero matrix and a False flag.
    """
    data = fmap.data
    u0, v0, fu, fv, valid = _corners(fmap.height, fmap.width, uv)
    f00, f10, f01, f11 = _corner_values(data, u0, v0)
    fu = fu[..., None]
    fv = fv[..., None]
    du = (1 - fv) * (f10 - f00) + fv * (f11 - f01)
    dv = (1 - fu) * (f01 - f00) + fu * (f11 - f10)
    grad = np.stack([du, dv], axis=-1)
    grad = np.where(valid[..., None, None], grad, 0.0)
    return grad, valid


def feature_difference(F_s: FeatureMap, K_s: SatelliteIntrinsics, p: Pose, cloud,
                       F_g_points, ground_valid=None):
    """Per-point residual ``F_s[proj(p, x_i)] - F_g[i]`` and its validity mask.

    Rows invalid in either view are zeroed.
    """
    F_g_points = np.asarray(F_g_points)
    if F_g_points.ndim != 2 or F_g_points.shape[1] != F_s.channels:
        raise ValueError(
            f"channel mismatch: satellite map has {F_s.channels} channels, "
            f"ground point features have shape {F_g_points.shape}"
        )
    uv, sat_valid = project_satellite(K_s, p, cloud)
    if F_g_points.shape[0] != uv.shape[0]:
        raise ValueError(
            f"ground features have {F_g_points.shape[0]} rows but the cloud has {uv.shape[0]} points"
        )
    sampled, in_bounds = bilinear_sample(F_s, uv)
    valid = sat_valid & in_bounds
    if ground_valid is not None:
        valid = valid & np.asarray(ground_valid, dtype=bool)
    e = np.where(valid[:, None], sampled - F_g_points, 0.0)
    return e, valid


def avg_pool2(data: np.ndarray) -> np.ndarray:
    h, w = data.shape[0] // 2 * 2, data.shape[1] // 2 * 2
    d = data[:h, :w]
    return 0.25 * (d[0::2, 0::2] + d[1::2, 0::2] + d[0::2, 1::2] + d[1::2, 1::2])


def build_pyramid(fmap: FeatureMap, levels: int = 3, K_s: SatelliteIntrinsics | None = None) -> Pyramid:
    """2x2 average pooling per level; level 0 is the coarsest."""
    if levels < 1:
        raise ValueError("a pyramid needs at least one level")
    need = 2 ** (levels - 1)
    if fmap.height < need or fmap.width < need:
        raise ValueError(
            f"map {fmap.height}x{fmap.width} too small for {levels} levels (needs {need} px per side)"
        )
    maps = [fmap]
    intr = [K_s] if K_s is not None else None
    for _ in range(levels - 1):
        maps.append(FeatureMap(avg_pool2(maps[-1].data)))
        if intr is not None:
            intr.append(intr[-1].downsample())
    res0 = K_s.meters_per_pixel if K_s is not None else 1.0
    mpp = [res0 * 2 ** i for i in range(levels)]
    return Pyramid(
        tuple(reversed(maps)),
        tuple(reversed(mpp)),
        None if intr is None else tuple(reversed(intr)),
    )


# -- differentiable versions ------------------------------------------------
def _flat_corner_index(B: int, H: int, W: int, u0, v0):
    base = (np.arange(B).reshape((B,) + (1,) * (u0.ndim - 1)) * (H * W))
    i00 = base + v0 * W + u0
    return np.stack([i00, i00 + 1, i00 + W, i00 + W + 1], axis=-1)


def _scatter(flat_shape, idx: np.ndarray, contrib: np.ndarray, dtype) -> np.ndarray:
    """Adjoint of a corner gather: accumulate ``contrib[..., 4, C]`` into a flat map."""
    n, C = flat_shape
    cell = (idx.reshape(-1, 1) * C + np.arange(C)).reshape(-1)
    out = np.bincount(cell, weights=contrib.reshape(-1).astype(np.float64), minlength=n * C)
    return out.reshape(n, C).astype(dtype)


def sample_tensor(fmap: Tensor, uv: Tensor):
    """Bilinear sampling of a batched map ``(B, H, W, C)`` at ``uv (B, M, 2)``.

    Differentiable w.r.t. both the map values and the sample coordinates.
    Returns ``(values (B, M, C), valid (B, M))``.
    """
    B, H, W, C = fmap.shape
    u0, v0, fu, fv, valid = _corners(H, W, uv.data)
    idx = _flat_corner_index(B, H, W, u0, v0)
    flat = fmap.data.reshape(B * H * W, C)
    corners = flat[idx]  # (B, M, 4, C)
    w = np.stack([(1 - fu) * (1 - fv), fu * (1 - fv), (1 - fu) * fv, fu * fv], axis=-1)
    w = np.where(valid[..., None], w, 0.0).astype(fmap.dtype)
    out = np.einsum("bmk,bmkc->bmc", w, corners)

    def backward(g):
        g_map = None
        g_uv = None
        if fmap.requires_grad:
            contrib = w[..., None] * g[:, :, None, :]
            g_map = _scatter((B * H * W, C), idx, contrib, fmap.dtype).reshape(fmap.shape)
        if uv.requires_grad:
            f00, f10, f01, f11 = (corners[:, :, k, :] for k in range(4))
            fu_, fv_ = fu[..., None], fv[..., None]
            du = (1 - fv_) * (f10 - f00) + fv_ * (f11 - f01)
            dv = (1 - fu_) * (f01 - f00) + fu_ * (f11 - f10)
            g_uv = np.stack([(g * du).sum(-1), (g * dv).sum(-1)], axis=-1)
            g_uv = np.where(valid[..., None], g_uv, 0.0).astype(uv.dtype)
        return g_map, g_uv

    return Tensor.from_op(out, (fmap, uv), backward, "bilinear_sample"), valid


def spatial_gradient_tensor(fmap: Tensor, uv: np.ndarray):
    """``dF/d(u, v)`` of a batched map as a tensor ``(B, M, C, 2)``.

    Linear in the map values, so gradients flow back into the map; the sample
    coordinates are treated as constants.
    """
    B, H, W, C = fmap.shape
    u0, v0, fu, fv, valid = _corners(H, W, uv)
    idx = _flat_corner_index(B, H, W, u0, v0)
    flat = fmap.data.reshape(B * H * W, C)
    corners = flat[idx]
    wu = np.stack([-(1 - fv), (1 - fv), -fv, fv], axis=-1)
    wv = np.stack([-(1 - fu), -fu, (1 - fu), fu], axis=-1)
    wu = np.where(valid[..., None], wu, 0.0).astype(fmap.dtype)
    wv = np.where(valid[..., None], wv, 0.0).astype(fmap.dtype)
    du = np.einsum("bmk,bmkc->bmc", wu, corners)
    dv = np.einsum("bmk,bmkc->bmc", wv, corners)
    out = np.stack([du, dv], axis=-1)

    def backward(g):
        contrib = wu[..., None] * g[:, :, None, :, 0] + wv[..., None] * g[:, :, None, :, 1]
        return (_scatter((B * H * W, C), idx, contrib, fmap.dtype).reshape(fmap.shape),)

    return Tensor.from_op(out, (fmap,), backward, "bilinear_gradient"), valid
