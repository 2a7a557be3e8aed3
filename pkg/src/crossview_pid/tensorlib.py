"""A small dense-tensor reverse-mode differentiation engine on top of numpy.

Only the operations the refinement network needs are provided: matmul,
broadcast add/sub/mul, leaky rectifier, concat, l2-norm over the last axis,
sum, mean, abs, reshape/transpose/slicing, plus a hook (:meth:`Tensor.from_op`)
for domain ops that supply their own backward rule.

Every op checks its output for NaN/Inf and raises :class:`NonFiniteError`
naming the op.  Arrays keep the dtype they are created with; parameters are
float32 unless explicitly cast (gradient checks run the same graph in float64).
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

LEAKY_SLOPE = 0.01


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""

    def __init__(self, op: str, a, b):
        self.op = op
        self.shapes = (tuple(a), tuple(b))
        super().__init__(f"{op}: incompatible shapes {tuple(a)} and {tuple(b)}")


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""

    def __init__(self, op: str):
        self.op = op
        super().__init__(f"non-finite value produced by op '{op}'")


_GRAD_ENABLED = True


class no_grad:
    """Context manager that stops graph recording (evaluation passes)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def _as_array(x, dtype=None) -> np.ndarray:
    arr = np.asarray(x)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float32)
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = "leaf"

    # -- construction -----------------------------------------------------
    @classmethod
    def from_op(
        cls,
        data: np.ndarray,
        parents: Sequence[Tensor],
        backward: Callable[[np.ndarray], Sequence[np.ndarray | None]],
        op: str,
    ) -> Tensor:
        """Wrap ``data`` as the output of an op.

        ``backward(grad_out)`` must return one gradient (or ``None``) per
        parent, already shaped like that parent.
        """
        data = np.asarray(data)
        if not np.isfinite(data).all():
            raise NonFiniteError(op)
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        out.requires_grad = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)

            def _bw(g, _parents=tuple(parents)):
                grads = backward(g)
                for p, pg in zip(_parents, grads):
                    if pg is not None and p.requires_grad:
                        p._accumulate(pg)

            out._backward = _bw
        else:
            out._parents = ()
            out._backward = None
        return out

    def _accumulate(self, g: np.ndarray) -> None:
        g = np.asarray(g, dtype=self.data.dtype)
        if g.shape != self.data.shape:
            raise ShapeError(f"grad accumulation into {self.op}", g.shape, self.data.shape)
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    # -- properties -------------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # -- autodiff ---------------------------------------------------------
    def backward(self, grad=None) -> None:
        """Reverse-mode sweep from this tensor (default seed: ones)."""
        if grad is None:
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                if not isinstance(node, Parameter):
                    # interior grads are not needed after propagation
                    node.grad = None

    # -- operators --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def abs(self):
        return tabs(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


class Parameter(Tensor):
    """A named leaf tensor that receives gradients."""

    __slots__ = ("name",)

    def __init__(self, data, name: str, dtype=np.float32):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _const_like(x, ref: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=ref.data.dtype))


# -- elementwise ---------------------------------------------------------------
def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = _const_like(b, a)
    _broadcast_shape("add", a, b)
    return Tensor.from_op(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        b = as_tensor(b)
        a = _const_like(a, b)
    a = as_tensor(a)
    b = _const_like(b, a)
    _broadcast_shape("sub", a, b)
    return Tensor.from_op(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = _const_like(b, a)
    _broadcast_shape("mul", a, b)
    return Tensor.from_op(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def leaky_relu(x: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    pos = x.data > 0
    scale = np.where(pos, 1.0, slope).astype(x.data.dtype)
    return Tensor.from_op(x.data * scale, (x,), lambda g: (g * scale,), "leaky_relu")


def tabs(x: Tensor) -> Tensor:
    sgn = np.sign(x.data)
    return Tensor.from_op(np.abs(x.data), (x,), lambda g: (g * sgn,), "abs")


# -- linear algebra / reductions ---------------------------------------------
def matmul(a, b) -> Tensor:
    a = as_tensor(a)
    b = _const_like(b, a)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    if b.ndim == 2 and a.ndim > 2:
        # one GEMM over all leading rows instead of a loop over batch dims
        lead = a.shape[:-1]
        a2 = a.data.reshape(-1, a.shape[-1])
        out = (a2 @ b.data).reshape(lead + (b.shape[1],))

        def backward2(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
            gb = (a2.T @ g2) if b.requires_grad else None
            return ga, gb

        return Tensor.from_op(out, (a, b), backward2, "matmul")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return (
            None if ga is None else _unbroadcast(ga, a.shape),
            None if gb is None else _unbroadcast(gb, b.shape),
        )

    return Tensor.from_op(out, (a, b), backward, "matmul")


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor.from_op(np.asarray(out), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([x.shape[a] for a in axes]))
    out = x.data.mean(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape).astype(x.data.dtype),)

    return Tensor.from_op(np.asarray(out, dtype=x.data.dtype), (x,), backward, "mean")


def l2_norm(x: Tensor, axis: int = -1) -> Tensor:
    """Euclidean norm over ``axis``; the gradient at the origin is 0."""
    n = np.sqrt((x.data * x.data).sum(axis=axis))
    safe = np.where(n > 0, n, 1.0)

    def backward(g):
        scale = np.where(n > 0, g / safe, 0.0)
        return (np.expand_dims(scale, axis) * x.data,)

    return Tensor.from_op(n.astype(x.data.dtype), (x,), backward, "l2_norm")


# -- structural ------------------------------------------------------------------
def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    ref = tensors[0]
    ax = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(
            t.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != ax
        ):
            raise ShapeError("concat", ref.shape, t.shape)
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def backward(g):
        grads = []
        for i in range(len(tensors)):
            sl = [slice(None)] * g.ndim
            sl[ax] = slice(bounds[i], bounds[i + 1])
            grads.append(g[tuple(sl)])
        return grads

    return Tensor.from_op(out, tensors, backward, "concat")


def cast(x: Tensor, dtype) -> Tensor:
    if x.dtype == dtype:
        return x
    return Tensor.from_op(x.data.astype(dtype), (x,), lambda g: (g.astype(x.dtype),), "cast")


def reshape(x: Tensor, shape) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", x.shape, shape) from None
    return Tensor.from_op(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(a % x.ndim for a in axes)
    inv = tuple(np.argsort(axes))
    return Tensor.from_op(
        np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose"
    )


def getitem(x: Tensor, idx) -> Tensor:
    out = x.data[idx]

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return Tensor.from_op(np.array(out), (x,), backward, "getitem")


# -- modules --------------------------------------------------------------------
class Mlp:
    """Fully connected stack; leaky hidden activations, linear output.

    Weights are ``(fan_in, fan_out)`` so ``forward`` maps ``(..., fan_in)`` to
    ``(..., fan_out)``.  Init is uniform in ``+-1/sqrt(fan_in)``.
    """

    def __init__(self, dims: Sequence[int], rng: np.random.Generator, name: str = "mlp",
                 slope: float = LEAKY_SLOPE, bias: bool = True, dtype=np.float32):
        if len(dims) < 2:
            raise ValueError(f"an MLP needs at least input and output dims, got {dims}")
        self.dims = tuple(int(d) for d in dims)
        self.slope = slope
        self.name = name
        self.bias = bias
        self.layers: list[tuple[Parameter, Parameter | None]] = []
        for i, (fan_in, fan_out) in enumerate(zip(self.dims[:-1], self.dims[1:])):
            bound = 1.0 / math.sqrt(fan_in)
            w = Parameter(rng.uniform(-bound, bound, size=(fan_in, fan_out)), f"{name}.{i}.weight", dtype)
            b = None
            if bias:
                b = Parameter(rng.uniform(-bound, bound, size=(fan_out,)), f"{name}.{i}.bias", dtype)
            self.layers.append((w, b))

    def __call__(self, x) -> Tensor:
        return self.forward(x)

    def forward(self, x) -> Tensor:
        x = as_tensor(x)
        if x.shape[-1] != self.dims[0]:
            raise ShapeError(f"{self.name} input", x.shape, (self.dims[0],))
        last = len(self.layers) - 1
        for i, (w, b) in enumerate(self.layers):
            x = matmul(x, w)
            if b is not None:
                x = add(x, b)
            if i < last:
                x = leaky_relu(x, self.slope)
        return x

    def parameters(self) -> list[Parameter]:
        return [p for layer in self.layers for p in layer if p is not None]


# -- optimisation ---------------------------------------------------------------
def global_norm(grads: Iterable[np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads))


def clip_global_norm(grads: Sequence[np.ndarray], max_norm: float = 10.0):
    """Scale all gradients by ``max_norm / g`` when their joint norm ``g`` exceeds it.

    Returns ``(clipped, norm_before)``.
    """
    grads = [np.asarray(g) for g in grads]
    norm = global_norm(grads)
    if not math.isfinite(norm):
        raise NonFiniteError("clip_global_norm")
    if norm <= max_norm:
        return list(grads), norm
    scale = max_norm / norm
    return [(g * scale).astype(g.dtype) for g in grads], norm


def adam_step(params, grads, m, v, t: int, lr: float = 1e-4, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update on plain arrays.

    ``lr`` is a float or one rate per parameter.  Returns
    ``(new_params, new_m, new_v)``; inputs are not modified.
    """
    if t < 1:
        raise ValueError("adam step counter starts at 1")
    lrs = list(lr) if isinstance(lr, (list, tuple)) else [lr] * len(params)
    new_p, new_m, new_v = [], [], []
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for p, g, mi, vi, rate in zip(params, grads, m, v, lrs):
        mi = beta1 * mi + (1.0 - beta1) * g
        vi = beta2 * vi + (1.0 - beta2) * (g * g)
        step = rate * (mi / c1) / (np.sqrt(vi / c2) + eps)
        new_p.append((p - step).astype(p.dtype))
        new_m.append(mi.astype(p.dtype))
        new_v.append(vi.astype(p.dtype))
    return new_p, new_m, new_v


class Adam:
    """Stateful wrapper around :func:`adam_step` for a fixed parameter list."""

    def __init__(self, params: Sequence[Parameter], lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, max_norm: float | None = 10.0,
                 lrs: Sequence[float] | None = None):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        if lrs is not None and len(lrs) != len(self.params):
            raise ValueError("need one learning rate per parameter")
        self.lrs = None if lrs is None else [float(x) for x in lrs]
        self.max_norm = max_norm
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.last_grad_norm = 0.0

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        if self.max_norm is not None:
            grads, self.last_grad_norm = clip_global_norm(grads, self.max_norm)
        else:
            self.last_grad_norm = global_norm(grads)
        self.t += 1
        new_p, self.m, self.v = adam_step(
            [p.data for p in self.params], grads, self.m, self.v, self.t,
            self.lrs if self.lrs is not None else self.lr, self.beta1, self.beta2, self.eps,
        )
        for p, d in zip(self.params, new_p):
            p.data = d

    def state(self) -> dict:
        return {"t": self.t, "lr": self.lr, "beta1": self.beta1, "beta2": self.beta2,
                "eps": self.eps, "m": self.m, "v": self.v}

    def load_state(self, state: dict) -> None:
        self.t = int(state["t"])
        self.m = [np.array(a, dtype=p.data.dtype) for a, p in zip(state["m"], self.params)]
        self.v = [np.array(a, dtype=p.data.dtype) for a, p in zip(state["v"], self.params)]


# -- loss -----------------------------------------------------------------------
def l1_pose_loss(estimates, gt, angle_weight: float = 1.0) -> Tensor:
    """Sum over levels of ``|dx| + |dy| + angle_weight * |wrap(dtheta)|``.

    ``estimates`` is a list (one per level) of ``(B, 3)`` tensors, ``(3,)``
    arrays or :class:`~crossview_pid.geometry.Pose`; ``gt`` broadcasts against
    them.  The result is averaged over the batch.
    """
    if len(estimates) == 0:
        raise ValueError("l1_pose_loss needs at least one level")
    gt_arr = _pose_array(gt)
    weights = np.array([1.0, 1.0, angle_weight])
    total = None
    for est in estimates:
        est_t = est if isinstance(est, Tensor) else Tensor(_pose_array(est))
        diff = sub(est_t, gt_arr.astype(est_t.dtype))
        # wrap the angle difference with a constant shift; its derivative is 1
        raw = diff.data[..., 2].astype(np.float64)
        shift = np.zeros(diff.shape, dtype=np.float64)
        shift[..., 2] = _wrap(raw) - raw
        diff = add(diff, shift.astype(diff.dtype))
        term = tabs(diff) * weights.astype(diff.dtype)
        term = tsum(term, axis=-1)
        term = mean(term) if term.ndim > 0 else term
        total = term if total is None else add(total, term)
    return total


def _wrap(theta: np.ndarray) -> np.ndarray:
    return theta - 2.0 * np.pi * np.ceil((theta - np.pi) / (2.0 * np.pi))


def _pose_array(p) -> np.ndarray:
    if hasattr(p, "as_array"):
        return p.as_array()
    if isinstance(p, Tensor):
        return p.data
    return np.asarray(p, dtype=np.float64)
