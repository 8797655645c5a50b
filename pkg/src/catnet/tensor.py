"""Minimal reverse-mode automatic differentiation over numpy arrays.

Every operation returns a new :class:`Tensor`. When gradient recording is
enabled and at least one input requires a gradient, the output remembers its
parents and a closure mapping the output gradient to the input gradients.
:func:`backward` sorts the recorded nodes topologically and replays the
closures in reverse. Gradients accumulate on leaves until :func:`zero_grad`.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError

_default_dtype = np.dtype(np.float64)
_grad_enabled = True
_node_ids = itertools.count()


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype.kind != "f":
        raise TypeError(f"default dtype must be floating point, got {dtype}")
    _default_dtype = dtype


def get_default_dtype() -> np.dtype:
    return _default_dtype


@contextlib.contextmanager
def default_dtype(dtype):
    previous = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """N-dimensional real array that can take part in a differentiation graph."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype.kind == "f":
                dtype = data.dtype
            else:
                dtype = _default_dtype
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node_id = next(_node_ids)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag}, op={self.op})"

    def __len__(self) -> int:
        return len(self.data)

    # arithmetic
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(value, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    if like is not None:
        return Tensor(np.asarray(value, dtype=like.dtype))
    return Tensor(value)


def _record(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out.op = op
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf that requires it."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = topological_order(loss)
    grads = {loss.node_id: np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(node.node_id, None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                raise DimensionError(
                    f"gradient shape {pg.shape} does not match {parent.shape} in {node.op}"
                )
            prev = grads.get(parent.node_id)
            grads[parent.node_id] = pg if prev is None else prev + pg


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` that require grad, every input before its consumers."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.node_id in seen:
            continue
        seen.add(node.node_id)
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and parent.node_id not in seen:
                stack.append((parent, False))
    return order


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ----------------------------------------------------------------------------
# elementwise arithmetic


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def _back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(a.data + b.data, (a, b), _back, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def _back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record(a.data - b.data, (a, b), _back, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def _back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record(a.data * b.data, (a, b), _back, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def _back(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _record(out, (a, b), _back, "div")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _record(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def square(x: Tensor) -> Tensor:
    return _record(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,), "square")


def tabs(x: Tensor) -> Tensor:
    return _record(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),), "abs")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _record(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    z = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z)).astype(x.dtype)
    return _record(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


# ----------------------------------------------------------------------------
# reductions and shape manipulation


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)

    def _back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record(np.asarray(x.data.sum(axis=axes, keepdims=keepdims)), (x,), _back, "sum")


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return mul(tsum(x, axis=axes, keepdims=keepdims), 1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    return _record(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _record(
        np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inverse),), "transpose"
    )


def getitem(x: Tensor, index) -> Tensor:
    def _back(g):
        full = np.zeros_like(x.data)
        if _is_advanced(index):
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return _record(np.array(x.data[index]), (x,), _back, "getitem")


def _is_advanced(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray, Tensor)) for i in items)


def pad(x: Tensor, widths: Sequence[tuple[int, int]]) -> Tensor:
    """Zero padding; ``widths`` has one (before, after) pair per axis."""
    widths = tuple((int(a), int(b)) for a, b in widths)
    if len(widths) != x.ndim:
        raise DimensionError(f"pad widths {widths} do not match rank of {x.shape}")
    index = tuple(slice(a, a + n) for (a, _), n in zip(widths, x.shape))
    return _record(np.pad(x.data, widths), (x,), lambda g: (g[index],), "pad")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0]
    axis = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(
            a != b for i, (a, b) in enumerate(zip(t.shape, ref.shape)) if i != axis
        ):
            raise DimensionError(f"cannot concatenate {ref.shape} and {t.shape} along axis {axis}")
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def _back(g):
        return tuple(
            np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:])
        )

    data = np.concatenate([t.data for t in tensors], axis=axis)
    return _record(data, tuple(tensors), _back, "concat")


# ----------------------------------------------------------------------------
# linear algebra and convolutions


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def _back(g):
        return g @ b.data.T, a.data.T @ g

    return _record(a.data @ b.data, (a, b), _back, "matmul")


def _windows(xp: np.ndarray, kernel: tuple[int, ...], stride: tuple[int, ...]) -> np.ndarray:
    nd = len(kernel)
    win = sliding_window_view(xp, kernel, axis=tuple(range(2, 2 + nd)))
    return win[(slice(None), slice(None)) + tuple(slice(None, None, s) for s in stride)]


def _taps(kidx, stride, out_sp):
    return (slice(None), slice(None)) + tuple(
        slice(k, k + s * (o - 1) + 1, s) for k, s, o in zip(kidx, stride, out_sp)
    )


def _im2col(xp: np.ndarray, kernel, stride, out_sp) -> np.ndarray:
    """(B, C, *K, *out) copy of every kernel tap; cheap when the kernel is small."""
    cols = np.empty(xp.shape[:2] + tuple(kernel) + tuple(out_sp), dtype=xp.dtype)
    for kidx in np.ndindex(*kernel):
        cols[(slice(None), slice(None)) + kidx] = xp[_taps(kidx, stride, out_sp)]
    return cols


def _small_kernel(kernel, out_sp) -> bool:
    return np.prod(kernel) <= np.prod(out_sp)


def _conv_forward(xp: np.ndarray, w: np.ndarray, stride: tuple[int, ...]) -> np.ndarray:
    nd = w.ndim - 2
    kernel = w.shape[2:]
    out_sp = tuple((n - k) // s + 1 for n, k, s in zip(xp.shape[2:], kernel, stride))
    batch, cout = xp.shape[0], w.shape[0]
    if _small_kernel(kernel, out_sp):
        cols = _im2col(xp, kernel, stride, out_sp).reshape(batch, -1, int(np.prod(out_sp)))
        return np.matmul(w.reshape(cout, -1), cols).reshape((batch, cout) + out_sp)
    win = _windows(xp, kernel, stride)
    out = np.tensordot(win, w, axes=([1, *range(2 + nd, 2 + 2 * nd)], [1, *range(2, 2 + nd)]))
    return np.ascontiguousarray(np.moveaxis(out, -1, 1))


def _conv_input_grad(g: np.ndarray, w: np.ndarray, stride: tuple[int, ...], shape) -> np.ndarray:
    """Scatter-add ``g`` back through the windows; this is the transposed convolution."""
    kernel = w.shape[2:]
    out_sp = g.shape[2:]
    batch, cout, cin = g.shape[0], w.shape[0], w.shape[1]
    gx = np.zeros(shape, dtype=np.result_type(g, w))
    if _small_kernel(kernel, out_sp):
        cols = np.matmul(w.reshape(cout, -1).T, g.reshape(batch, cout, -1))
        cols = cols.reshape((batch, cin) + tuple(kernel) + tuple(out_sp))
        for kidx in np.ndindex(*kernel):
            gx[_taps(kidx, stride, out_sp)] += cols[(slice(None), slice(None)) + kidx]
        return gx
    nd = len(kernel)
    cols = np.moveaxis(np.tensordot(g, w, axes=([1], [0])), 1 + nd, 1)  # B x Cin x *out x *K
    lead = (slice(None), slice(None))
    for oidx in np.ndindex(*out_sp):
        sl = tuple(slice(o * s, o * s + k) for o, s, k in zip(oidx, stride, kernel))
        gx[lead + sl] += cols[lead + oidx]
    return gx


def _conv_weight_grad(xp: np.ndarray, g: np.ndarray, stride, kernel) -> np.ndarray:
    kernel = tuple(kernel)
    nd = len(kernel)
    out_sp = g.shape[2:]
    batch, cout, cin = g.shape[0], g.shape[1], xp.shape[1]
    if _small_kernel(kernel, out_sp):
        cols = _im2col(xp, kernel, stride, out_sp).reshape(batch, -1, int(np.prod(out_sp)))
        gw = np.matmul(g.reshape(batch, cout, -1), cols.transpose(0, 2, 1)).sum(axis=0)
        return gw.reshape((cout, cin) + kernel)
    win = _windows(xp, kernel, stride)
    axes = [0, *range(2, 2 + nd)]
    return np.tensordot(g, win, axes=(axes, axes))


def _tuple(v, nd):
    return tuple(int(x) for x in v) if isinstance(v, (tuple, list)) else (int(v),) * nd


def _conv(x: Tensor, w: Tensor, stride, padding, nd: int) -> Tensor:
    if x.ndim != nd + 2 or w.ndim != nd + 2:
        raise DimensionError(f"conv{nd}d expects rank-{nd + 2} input and kernels, got {x.shape}, {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise DimensionError(f"conv{nd}d channel mismatch: input {x.shape}, kernels {w.shape}")
    stride, padding = _tuple(stride, nd), _tuple(padding, nd)
    if min(stride) < 1 or min(padding) < 0:
        raise DimensionError(f"invalid stride {stride} or padding {padding}")
    kernel = w.shape[2:]
    for n, p, k in zip(x.shape[2:], padding, kernel):
        if n + 2 * p < k:
            raise DimensionError(f"kernel {kernel} larger than padded input {x.shape} (padding {padding})")
    widths = ((0, 0), (0, 0)) + tuple((p, p) for p in padding)
    xp = np.pad(x.data, widths) if any(padding) else x.data
    inner = (slice(None), slice(None)) + tuple(slice(p, p + n) for p, n in zip(padding, x.shape[2:]))

    def _back(g):
        gx = _conv_input_grad(g, w.data, stride, xp.shape)[inner] if x.requires_grad else None
        gw = _conv_weight_grad(xp, g, stride, kernel) if w.requires_grad else None
        return gx, gw

    return _record(_conv_forward(xp, w.data, stride), (x, w), _back, f"conv{nd}d")


def _conv_transposed(x: Tensor, w: Tensor, stride, nd: int) -> Tensor:
    if x.ndim != nd + 2 or w.ndim != nd + 2:
        raise DimensionError(f"conv{nd}d_transposed expects rank-{nd + 2} tensors, got {x.shape}, {w.shape}")
    if x.shape[1] != w.shape[0]:
        raise DimensionError(f"conv{nd}d_transposed channel mismatch: input {x.shape}, kernels {w.shape}")
    stride = _tuple(stride, nd)
    if min(stride) < 1 or min(x.shape[2:]) < 1:
        raise DimensionError(f"invalid stride {stride} or empty input {x.shape}")
    kernel = w.shape[2:]
    out_sp = tuple((n - 1) * s + k for n, s, k in zip(x.shape[2:], stride, kernel))
    shape = (x.shape[0], w.shape[1]) + out_sp

    def _back(g):
        gx = _conv_forward(g, w.data, stride) if x.requires_grad else None
        gw = _conv_weight_grad(g, x.data, stride, kernel) if w.requires_grad else None
        return gx, gw

    return _record(_conv_input_grad(x.data, w.data, stride, shape), (x, w), _back, f"conv{nd}d_t")


def conv1d(x: Tensor, kernels: Tensor, stride=1, padding=0) -> Tensor:
    """Cross-correlation of ``x`` (B, Cin, L) with ``kernels`` (Cout, Cin, K)."""
    return _conv(x, kernels, stride, padding, 1)


def conv2d(x: Tensor, kernels: Tensor, stride=1, padding=0) -> Tensor:
    return _conv(x, kernels, stride, padding, 2)


def conv1d_transposed(x: Tensor, kernels: Tensor, stride=1) -> Tensor:
    """Adjoint of :func:`conv1d`: ``kernels`` is (Cin, Cout, K), output length (L-1)*stride+K.

    With an identity kernel this is overlap-add of stride-spaced frames.
    """
    return _conv_transposed(x, kernels, stride, 1)


def conv2d_transposed(x: Tensor, kernels: Tensor, stride=1) -> Tensor:
    return _conv_transposed(x, kernels, stride, 2)


def avg_pool(x: Tensor, window) -> Tensor:
    """Mean over non-overlapping windows of the trailing spatial axes."""
    window = _tuple(window, 1) if not isinstance(window, (tuple, list)) else tuple(window)
    nd = len(window)
    spatial = x.shape[-nd:]
    if x.ndim < nd + 1 or any(n % w for n, w in zip(spatial, window)):
        raise DimensionError(f"spatial extents {spatial} not divisible by pooling window {window}")
    lead = x.shape[:-nd]
    split = lead + tuple(v for n, w in zip(spatial, window) for v in (n // w, w))
    inner = tuple(len(lead) + 2 * i + 1 for i in range(nd))
    count = int(np.prod(window))
    out = x.data.reshape(split).mean(axis=inner)

    def _back(g):
        g = np.expand_dims(g, inner) / count
        return (np.broadcast_to(g, split).reshape(x.shape).copy(),)

    return _record(out.astype(x.dtype, copy=False), (x,), _back, "avg_pool")


# ----------------------------------------------------------------------------
# normalization and loss


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.9,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization of (B, C, ...) input.

    Training mode uses batch statistics over batch and spatial axes and updates
    the running arrays in place as ``momentum * old + (1 - momentum) * batch``.
    """
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, x.shape[1]) + (1,) * (x.ndim - 2)
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mu
        running_var *= momentum
        running_var += (1.0 - momentum) * var
    else:
        mu, var = running_mean, running_var
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype).reshape(bshape)
    xhat = (x.data - mu.reshape(bshape).astype(x.dtype)) * inv
    g_ = gamma.data.reshape(bshape)
    out = xhat * g_ + beta.data.reshape(bshape)
    count = x.size // x.shape[1]

    def _back(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * g_
        if training:
            dx = inv / count * (
                count * dxhat
                - dxhat.sum(axis=axes, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
            )
        else:
            dx = dxhat * inv
        return dx, dgamma, dbeta

    return _record(out, (x, gamma, beta), _back, "batch_norm")


def mae_loss(estimate: Tensor, target: Tensor) -> Tensor:
    """Mean absolute error; the subgradient at a tie is zero."""
    estimate, target = _pair(estimate, target)
    if estimate.shape != target.shape:
        raise DimensionError(f"mae_loss shape mismatch: {estimate.shape} vs {target.shape}")
    diff = estimate.data - target.data
    scale = 1.0 / diff.size

    def _back(g):
        s = np.sign(diff) * (g * scale)
        return s, -s

    return _record(np.asarray(np.abs(diff).mean(), dtype=diff.dtype), (estimate, target), _back, "mae")
