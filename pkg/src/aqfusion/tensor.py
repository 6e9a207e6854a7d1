"""Dense tensors with tape-based reverse-mode differentiation.

A :class:`Tensor` wraps a contiguous numpy array.  Every differentiable
operation records its parents and a closure mapping the output gradient to the
parent gradients; :meth:`Tensor.backward` walks the recorded tape in reverse
topological order.  The graph is rebuilt on every forward pass.

Two numeric precisions are available: ``"standard"`` (float32, the default)
and ``"high"`` (float64, used for finite-difference checks).  Use
:func:`set_precision` or the :func:`precision` context manager.

Convolutions follow the cross-correlation convention (no kernel flip) with
explicit zero padding and accept either ``C x H x W`` or ``N x C x H x W``
inputs.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, ParameterError, ShapeError

_DTYPES = {"standard": np.float32, "high": np.float64}
_state = {"dtype": np.float32, "grad": True}


def set_precision(mode: str) -> None:
    if mode not in _DTYPES:
        raise ParameterError(f"unknown precision {mode!r}; expected one of {sorted(_DTYPES)}")
    _state["dtype"] = _DTYPES[mode]


def get_precision() -> str:
    return "high" if _state["dtype"] is np.float64 else "standard"


def default_dtype():
    return _state["dtype"]


@contextlib.contextmanager
def precision(mode: str):
    """Temporarily switch the global numeric precision."""
    old = get_precision()
    set_precision(mode)
    try:
        yield
    finally:
        set_precision(old)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (inference)."""
    old = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = old


def is_grad_enabled() -> bool:
    return _state["grad"]


class Tensor:
    """n-dimensional array node in a differentiation graph.

    Attributes:
        data: the values, in the dtype of the precision active at creation.
        requires_grad: whether gradients flow to this tensor.
        grad: accumulated gradient (same shape as ``data``) or None.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype != _state["dtype"]:
            arr = arr.astype(_state["dtype"])
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    # ------------------------------------------------------------------ basics
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{rg})"

    def __len__(self):
        return self.data.shape[0]

    # ---------------------------------------------------------------- backward
    def backward(self) -> None:
        """Populate ``grad`` on every ``requires_grad`` ancestor of this scalar.

        Gradients accumulate across calls; reset them with ``zero_grad``.
        """
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("loss does not depend on any tensor that requires grad")

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

        pending = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            node.grad = g.copy() if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                k = id(p)
                pending[k] = pg if k not in pending else pending[k] + pg

    # --------------------------------------------------------------- operators
    def __add__(self, other):
        return add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, _lift(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _lift(other))

    def __getitem__(self, idx):
        return index(self, idx)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if _state["grad"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


# ------------------------------------------------------------------ broadcasting
def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb:
        return
    short, long_ = (sa, sb) if len(sa) < len(sb) else (sb, sa)
    if len(short) == 0 or long_[len(long_) - len(short):] == short:
        return
    raise ShapeError(f"{op}: incompatible shapes {sa} and {sb} (only leading-extent broadcast allowed)")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))).reshape(shape)


# ------------------------------------------------------------------- elementwise
def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _node(x.data * x.data.dtype.type(c), (x,), lambda g: (g * g.dtype.type(c),))


def square(x: Tensor) -> Tensor:
    return _node(x.data * x.data, (x,), lambda g: (2 * g * x.data,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _node(np.where(mask, x.data, 0).astype(x.data.dtype), (x,), lambda g: (g * mask,))


def _axis_ok(x: Tensor, axis, op: str):
    if axis is None:
        return None
    axes = axis if isinstance(axis, tuple) else (axis,)
    for ax in axes:
        if not -x.ndim <= ax < x.ndim:
            raise ShapeError(f"{op}: axis {ax} out of range for shape {x.shape}")
    return tuple(ax % x.ndim for ax in axes)


def tsum(x: Tensor, axis=None) -> Tensor:
    axes = _axis_ok(x, axis, "sum")
    out = x.data.sum(axis=axes)

    def back(g):
        if axes is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axes), x.shape).copy(),)

    return _node(np.asarray(out), (x,), back)


def mean(x: Tensor, axis=None) -> Tensor:
    axes = _axis_ok(x, axis, "mean")
    count = x.size if axes is None else int(np.prod([x.shape[a] for a in axes]))
    return scale(tsum(x, axis), 1.0 / count)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean over all elements of ``(a - b) ** 2``."""
    if a.shape != b.shape:
        raise ShapeError(f"mse: shapes {a.shape} and {b.shape} differ")
    return mean(square(sub(a, b)))


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from exc
    return _node(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {x.shape}")
    return _node(np.ascontiguousarray(x.data.T), (x,), lambda g: (np.ascontiguousarray(g.T),))


def index(x: Tensor, idx) -> Tensor:
    out = x.data[idx]

    def back(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return _node(np.array(out), (x,), back)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat: nothing to concatenate")
    nd = tensors[0].ndim
    if not -nd <= axis < nd:
        raise ShapeError(f"concat: axis {axis} out of range for {nd}-d inputs")
    axis %= nd
    for t in tensors[1:]:
        if t.ndim != nd or any(t.shape[i] != tensors[0].shape[i] for i in range(nd) if i != axis):
            raise ShapeError(f"concat: shapes {[t.shape for t in tensors]} disagree off axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return _node(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                 lambda g: tuple(np.split(g, cuts, axis=axis)))


def global_avg_pool(x: Tensor) -> Tensor:
    """Average over the two trailing spatial axes."""
    if x.ndim not in (3, 4):
        raise ShapeError(f"global_avg_pool expects C x H x W or N x C x H x W, got {x.shape}")
    return mean(x, axis=(-2, -1))


def softmax_stable(x: Tensor, axis: int = -1) -> Tensor:
    _axis_ok(x, axis, "softmax")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _node(s, (x,), back)


def dropout(x: Tensor, rate: float, mode: str, rng) -> Tensor:
    """Inverted dropout: kept units are scaled by ``1 / (1 - rate)`` in train mode."""
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate must be in [0, 1), got {rate}")
    if mode not in ("train", "eval"):
        raise ParameterError(f"mode must be 'train' or 'eval', got {mode!r}")
    if mode == "eval" or rate == 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.data.dtype) / x.data.dtype.type(1.0 - rate)
    return _node(x.data * keep, (x,), lambda g: (g * keep,))


# ----------------------------------------------------------------------- linear
def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return _node(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w.T + b`` for a batch ``x`` (N x in) and weight ``w`` (out x in)."""
    squeeze = x.ndim == 1
    if squeeze:
        x = reshape(x, (1, x.shape[0]))
    if w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    out = matmul(x, transpose(w))
    if b is not None:
        out = add(out, b)
    if squeeze:
        out = reshape(out, out.shape[1:])
    return out


# ------------------------------------------------------------------ convolution
def conv_output_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _as_batch(x: Tensor, op: str):
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"{op}: expected C x H x W or N x C x H x W input, got {x.shape}")


def _check_conv(h, w, k, stride, pad, op):
    if stride < 1 or pad < 0:
        raise ParameterError(f"{op}: stride must be >= 1 and pad >= 0")
    if k > h + 2 * pad or k > w + 2 * pad:
        raise ShapeError(f"{op}: kernel {k} larger than padded input {h + 2 * pad}x{w + 2 * pad}")


def _pad(a: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return a
    return np.pad(a, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Dense 2-D cross-correlation of ``x`` with kernels ``w`` (C_out x C_in x k x k)."""
    xb, squeeze = _as_batch(x, "conv2d")
    if w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv2d: kernel must be C_out x C_in x k x k, got {w.shape}")
    n, c, h, wd = xb.shape
    co, ci, k, _ = w.shape
    if ci != c:
        raise ShapeError(f"conv2d: input has {c} channels, kernel expects {ci}")
    _check_conv(h, wd, k, stride, pad, "conv2d")
    ho, wo = conv_output_size(h, k, stride, pad), conv_output_size(wd, k, stride, pad)

    xp = _pad(xb.data, pad)
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    cols = win[:, :, : stride * (ho - 1) + 1: stride, : stride * (wo - 1) + 1: stride]
    # cols: n, c, ho, wo, k, k
    out = np.tensordot(cols, w.data, axes=([1, 4, 5], [1, 2, 3]))  # n, ho, wo, co
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def back(g):
        gx = gw = None
        if w.requires_grad:
            gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))  # co, c, k, k
        if xb.requires_grad:
            dcols = np.tensordot(g, w.data, axes=([1], [0]))  # n, ho, wo, c, k, k
            dxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i: i + stride * (ho - 1) + 1: stride, j: j + stride * (wo - 1) + 1: stride] += \
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = dxp[:, :, pad: pad + h, pad: pad + wd] if pad else dxp
        return gx, gw

    out_t = _node(out, (xb, w), back)
    return reshape(out_t, out_t.shape[1:]) if squeeze else out_t


def channel_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-channel bias ``b`` (C,) to ``x`` (C x H x W or N x C x H x W)."""
    if x.ndim not in (3, 4) or b.shape != (x.shape[-3],):
        raise ShapeError(f"channel_bias: bias {b.shape} does not match channels of {x.shape}")
    axes = (0, 2, 3) if x.ndim == 4 else (1, 2)
    return _node(x.data + b.data[:, None, None], (x, b), lambda g: (g, g.sum(axis=axes)))


def depthwise_conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Per-channel cross-correlation; ``w`` is C x 1 x k x k (groups == channels)."""
    xb, squeeze = _as_batch(x, "depthwise_conv2d")
    if w.ndim != 4 or w.shape[1] != 1 or w.shape[2] != w.shape[3]:
        raise ShapeError(f"depthwise_conv2d: kernel must be C x 1 x k x k, got {w.shape}")
    n, c, h, wd = xb.shape
    k = w.shape[2]
    if w.shape[0] != c:
        raise ShapeError(f"depthwise_conv2d: input has {c} channels, kernel has {w.shape[0]}")
    _check_conv(h, wd, k, stride, pad, "depthwise_conv2d")
    ho, wo = conv_output_size(h, k, stride, pad), conv_output_size(wd, k, stride, pad)

    xp = _pad(xb.data, pad)
    kern = w.data[:, 0]

    def window(i, j):
        return (slice(None), slice(None),
                slice(i, i + stride * (ho - 1) + 1, stride),
                slice(j, j + stride * (wo - 1) + 1, stride))

    out = np.zeros((n, c, ho, wo), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            out += xp[window(i, j)] * kern[:, i, j][None, :, None, None]

    def back(g):
        gx = gw = None
        if w.requires_grad:
            gw = np.empty_like(w.data)
            for i in range(k):
                for j in range(k):
                    gw[:, 0, i, j] = np.einsum("nchw,nchw->c", g, xp[window(i, j)])
        if xb.requires_grad:
            dxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    dxp[window(i, j)] += g * kern[:, i, j][None, :, None, None]
            gx = dxp[:, :, pad: pad + h, pad: pad + wd] if pad else dxp
        return gx, gw

    out_t = _node(out, (xb, w), back)
    return reshape(out_t, out_t.shape[1:]) if squeeze else out_t


# ------------------------------------------------------------ gradient checking
def numerical_grad(fn: Callable[[], Tensor], t: Tensor, eps: float = 1e-6,
                   indices: Sequence[int] | None = None) -> np.ndarray:
    """Central finite differences of scalar ``fn()`` w.r.t. entries of ``t``.

    ``indices`` restricts the check to selected flat positions; the remaining
    entries of the returned array are NaN.
    """
    flat = t.data.reshape(-1)
    out = np.full(flat.shape, np.nan)
    idxs = range(flat.size) if indices is None else indices
    with no_grad():
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(fn().data.sum())
            flat[i] = orig - eps
            fm = float(fn().data.sum())
            flat[i] = orig
            out[i] = (fp - fm) / (2 * eps)
    return out.reshape(t.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``||a - n|| / max(||a||, ||n||)`` over finite entries of ``numeric``."""
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    keep = np.isfinite(n)
    a, n = a[keep], n[keep]
    denom = max(np.linalg.norm(a), np.linalg.norm(n))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - n) / denom)


def gradcheck(fn: Callable[[], Tensor], inputs: Sequence[Tensor], eps: float = 1e-6,
              max_entries: int | None = None, rng=None) -> float:
    """Worst relative error between backprop and finite differences over ``inputs``.

    ``fn`` must rebuild the graph from ``inputs`` on every call.  With
    ``max_entries`` set, each input is probed at that many random positions.
    """
    for t in inputs:
        t.grad = None
    fn().backward()
    worst = 0.0
    for t in inputs:
        analytic = np.zeros(t.shape) if t.grad is None else t.grad.astype(np.float64)
        idx = None
        if max_entries is not None and t.size > max_entries:
            gen = rng if rng is not None else np.random.default_rng(0)
            idx = sorted(gen.choice(t.size, size=max_entries, replace=False))
        numeric = numerical_grad(fn, t, eps, idx)
        worst = max(worst, relative_error(analytic, numeric))
    return worst
