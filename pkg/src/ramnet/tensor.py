"""Dense tensors with reverse-mode automatic differentiation.

Only the operations needed by the depth network are provided. All image
tensors use the NCHW layout and binary operations require equal shapes
(there is no general broadcasting).

Storage is float32 by default. Inside ``float64_mode()`` newly created
tensors use float64, which is what the gradient checks run in.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor", "GraphFreedError", "NonFiniteError", "float64_mode", "no_grad",
    "get_default_dtype", "backward", "conv2d", "bilinear_upsample2x",
    "elementwise", "relu", "sigmoid", "tanh", "add", "mul", "sub",
    "one_minus", "absolute", "square", "scale", "sobel_gradients",
    "avg_downsample2x", "concat", "split", "sum_all", "sum_per_sample",
    "mean_all",
]

_state = {"dtype": np.float32, "grad_enabled": True, "check_finite": True}


class GraphFreedError(RuntimeError):
    """Raised when backward runs over a graph that was already released."""


class NonFiniteError(FloatingPointError):
    """A forward op produced NaN or inf from its inputs."""


def get_default_dtype():
    return _state["dtype"]


@contextlib.contextmanager
def float64_mode():
    """Create all new tensors in float64 (verification mode)."""
    prev = _state["dtype"]
    _state["dtype"] = np.float64
    try:
        yield
    finally:
        _state["dtype"] = prev


@contextlib.contextmanager
def no_grad():
    """Disable graph recording, e.g. for evaluation."""
    prev = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = prev


class Tensor:
    """An n-d array node in the computation graph.

    Leaves created with ``requires_grad=True`` receive gradients in ``grad``
    when :func:`backward` is called. Gradients accumulate across calls until
    :meth:`zero_grad` is used.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_freed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype or _state["dtype"])
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._freed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def backward(self, retain_graph: bool = False) -> None:
        backward(self, retain_graph=retain_graph)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # Arithmetic sugar. Scalars are folded in without graph nodes of their own.
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return _add_scalar(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return _add_scalar(self, -float(other))

    def __rsub__(self, other):
        return _add_scalar(scale(self, -1.0), float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap an op result, recording the backward closure when needed."""
    if _state["check_finite"] and not np.all(np.isfinite(data)):
        raise NonFiniteError("non-finite values produced by forward op")
    out = Tensor(data, dtype=data.dtype)
    if _state["grad_enabled"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, retain_graph: bool = False) -> None:
    """Populate ``grad`` on every leaf that requires it.

    The graph is released afterwards unless ``retain_graph`` is set; running
    backward through a released graph raises :class:`GraphFreedError`.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._freed:
        raise GraphFreedError("graph already freed; pass retain_graph=True to reuse it")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor requiring grad")
    order = _toposort(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._freed:
            raise GraphFreedError("graph already freed; pass retain_graph=True to reuse it")
        if node.is_leaf:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        pgrads = node._backward(g)
        for p, pg in zip(node._parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg
    if not retain_graph:
        for node in order:
            if not node.is_leaf:
                node._parents = ()
                node._backward = None
                node._freed = True


# ---------------------------------------------------------------- elementwise

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    y = 0.5 * (np.tanh(0.5 * x.data) + 1.0)
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),))


def one_minus(x: Tensor) -> Tensor:
    return _make(1.0 - x.data, (x,), lambda g: (-g,))


def absolute(x: Tensor) -> Tensor:
    s = np.sign(x.data)
    return _make(np.abs(x.data), (x,), lambda g: (g * s,))


def square(x: Tensor) -> Tensor:
    return _make(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def scale(x: Tensor, c: float) -> Tensor:
    return _make(x.data * x.data.dtype.type(c), (x,), lambda g: (g * c,))


def _add_scalar(x: Tensor, c: float) -> Tensor:
    return _make(x.data + x.data.dtype.type(c), (x,), lambda g: (g,))


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_shape(a, b, "mul")
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


_UNARY = {"relu": relu, "sigmoid": sigmoid, "tanh": tanh, "one_minus": one_minus}
_BINARY = {"add": add, "mul": mul, "sub": sub}


def elementwise(kind: str, a: Tensor, b: Tensor | None = None) -> Tensor:
    """Dispatch a pointwise op by name."""
    if kind in _UNARY:
        return _UNARY[kind](a)
    if kind in _BINARY:
        if b is None:
            raise ValueError(f"{kind} needs two operands")
        return _BINARY[kind](a, b)
    raise ValueError(f"unknown elementwise kind {kind!r}")


# ---------------------------------------------------------------- reductions

def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _make(np.asarray(x.data.sum(), dtype=x.dtype), (x,),
                 lambda g: (np.full(shape, g, dtype=x.dtype),))


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    shape = x.shape
    return _make(np.asarray(x.data.mean(), dtype=x.dtype), (x,),
                 lambda g: (np.full(shape, g / n, dtype=x.dtype),))


def sum_per_sample(x: Tensor) -> Tensor:
    """Sum over every axis but the first: (N, ...) -> (N,)."""
    shape = x.shape
    axes = tuple(range(1, x.ndim))
    expand = (slice(None),) + (None,) * len(axes)

    def bw(g):
        return (np.broadcast_to(g[expand], shape).astype(x.dtype),)

    return _make(x.data.sum(axis=axes), (x,), bw)


# ---------------------------------------------------------------- structure

def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            out.append(g[tuple(idx)])
        return tuple(out)

    return _make(np.concatenate([x.data for x in xs], axis=axis), xs, bw)


def split(x: Tensor, sizes: Sequence[int], axis: int = 1) -> list[Tensor]:
    """Inverse of :func:`concat`."""
    if sum(sizes) != x.shape[axis]:
        raise ValueError(f"split sizes {list(sizes)} do not cover axis of size {x.shape[axis]}")
    outs = []
    lo = 0
    for size in sizes:
        idx = [slice(None)] * x.ndim
        idx[axis] = slice(lo, lo + size)
        idx = tuple(idx)

        def bw(g, idx=idx):
            full = np.zeros_like(x.data)
            full[idx] = g
            return (full,)

        outs.append(_make(x.data[idx], (x,), bw))
        lo += size
    return outs


# ---------------------------------------------------------------- convolution

def _require_4d(x: Tensor, op: str) -> None:
    if x.ndim != 4:
        raise ValueError(f"{op}: expected a 4-D NCHW tensor, got shape {x.shape}")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation via im2col and a single matmul."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    _require_4d(x, "conv2d")
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ValueError(f"conv2d: weight must be (C_out, C_in, k, k), got {weight.shape}")
    n, c, h, w = x.shape
    c_out, c_in, k, _ = weight.shape
    if c != c_in:
        raise ValueError(f"conv2d: input {x.shape} has {c} channels, weight {weight.shape} expects {c_in}")
    if bias is not None and bias.shape != (c_out,):
        raise ValueError(f"conv2d: bias shape {bias.shape} does not match weight {weight.shape}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if hp < k or wp < k:
        raise ValueError(f"conv2d: kernel {k} larger than padded input {x.shape}")
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(c * k * k, n * ho * wo)
    w2 = weight.data.reshape(c_out, -1)
    out = (w2 @ cols).reshape(c_out, n, ho, wo).transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def bw(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(c_out, -1)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = (g2 @ cols.T).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=1)
        if x.requires_grad:
            dcols = (w2.T @ g2).reshape(c, k, k, n, ho, wo)
            gxp = np.zeros((n, c, hp, wp), dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                        dcols[:, i, j].transpose(1, 0, 2, 3)
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        return (gx, gw, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, bw)


# ---------------------------------------------------------------- resampling

def _up1d(a: np.ndarray, axis: int) -> np.ndarray:
    # Half-pixel centres: even outputs take 3/4 of their source and 1/4 of the
    # previous sample, odd outputs 1/4 of the next one; edges clamp.
    a = np.moveaxis(a, axis, -1)
    prev = np.concatenate([a[..., :1], a[..., :-1]], axis=-1)
    nxt = np.concatenate([a[..., 1:], a[..., -1:]], axis=-1)
    out = np.empty(a.shape[:-1] + (2 * a.shape[-1],), dtype=a.dtype)
    out[..., 0::2] = 0.75 * a + 0.25 * prev
    out[..., 1::2] = 0.75 * a + 0.25 * nxt
    return np.moveaxis(out, -1, axis)


def _up1d_T(g: np.ndarray, axis: int) -> np.ndarray:
    g = np.moveaxis(g, axis, -1)
    ge, go = g[..., 0::2], g[..., 1::2]
    out = 0.75 * (ge + go)
    # contributions through the "prev" and "next" taps
    out[..., :-1] += 0.25 * ge[..., 1:]
    out[..., 0] += 0.25 * ge[..., 0]
    out[..., 1:] += 0.25 * go[..., :-1]
    out[..., -1] += 0.25 * go[..., -1]
    return np.moveaxis(out, -1, axis)


def bilinear_upsample2x(x: Tensor) -> Tensor:
    """Double H and W with bilinear interpolation (align_corners=False)."""
    _require_4d(x, "bilinear_upsample2x")
    out = _up1d(_up1d(x.data, 2), 3)
    return _make(np.ascontiguousarray(out), (x,), lambda g: (_up1d_T(_up1d_T(g, 3), 2),))


def avg_downsample2x(x: Tensor) -> Tensor:
    _require_4d(x, "avg_downsample2x")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"avg_downsample2x: spatial dims must be even, got {x.shape}")
    out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def bw(g):
        return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25,)

    return _make(out, (x,), bw)


_SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])


def sobel_gradients(x: Tensor) -> tuple[Tensor, Tensor]:
    """Horizontal and vertical Sobel responses with zero padding.

    Channels are treated independently, so an (N, C, H, W) input gives two
    (N, C, H, W) outputs.
    """
    _require_4d(x, "sobel_gradients")
    n, c, h, w = x.shape
    flat = _reshape(x, (n * c, 1, h, w))
    kx = Tensor(_SOBEL_X[None, None], dtype=x.dtype)
    ky = Tensor(_SOBEL_X.T[None, None], dtype=x.dtype)
    gx = conv2d(flat, kx, None, stride=1, padding=1)
    gy = conv2d(flat, ky, None, stride=1, padding=1)
    return _reshape(gx, (n, c, h, w)), _reshape(gy, (n, c, h, w))


def _reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))
