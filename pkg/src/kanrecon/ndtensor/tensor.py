"""Dense tensor with reverse-mode automatic differentiation.

Every differentiable operation is a *primitive*: it computes its output with
numpy and records a vector-Jacobian product closure on the output tensor.
:func:`backward` walks the recorded graph once, in reverse topological order,
and hands each ``requires_grad`` leaf its gradient.
"""

from __future__ import annotations

import contextlib
import logging
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]

_DEFAULT_DTYPE = np.float64
_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Operand shapes are invalid for the requested operation."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class TapeError(RuntimeError):
    """Backward was requested on a graph that cannot be differentiated."""


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def default_dtype(dtype) -> Iterator[None]:
    previous = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate without recording the graph (inference)."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Node:
    """One recorded primitive application."""

    __slots__ = ("op", "parents", "vjp")

    def __init__(self, op: str, parents: Tuple["Tensor", ...], vjp: Callable):
        self.op = op
        self.parents = parents
        self.vjp = vjp


class Tensor:
    """N-dimensional real array that can record how it was computed."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "_consumed", "name")
    __array_priority__ = 1000

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype != _DEFAULT_DTYPE:
            arr = arr.astype(_DEFAULT_DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor data contains NaN or Inf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[Node] = None
        self._consumed = False
        self.name = name

    # -- introspection -------------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operator sugar ------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def _raise_not_scalar():
    raise ShapeError("only single-element tensors convert to a Python scalar")


def as_tensor(x: ArrayLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(op: str, data: np.ndarray, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced a non-finite value")
    out = Tensor.__new__(Tensor)
    out.data = data if data.dtype == _DEFAULT_DTYPE else data.astype(_DEFAULT_DTYPE)
    out.grad = None
    out._consumed = False
    out.name = None
    track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = track
    out._node = Node(op, tuple(parents), vjp) if track else None
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from exc


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make("add", a.data + b.data, (a, b), vjp)


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make("sub", a.data - b.data, (a, b), vjp)


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    if isinstance(b, (int, float)) and not isinstance(b, bool):
        return scalar_mul(as_tensor(a), float(b))
    if isinstance(a, (int, float)) and not isinstance(a, bool):
        return scalar_mul(as_tensor(b), float(a))
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make("mul", a.data * b.data, (a, b), vjp)


def scalar_mul(a: Tensor, c: float) -> Tensor:
    return _make("scalar_mul", a.data * c, (a,), lambda g: (g * c,))


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    if isinstance(b, (int, float)) and not isinstance(b, bool):
        return scalar_mul(as_tensor(a), 1.0 / float(b))
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    if np.any(b.data == 0):
        raise NonFiniteError("div: division by zero")
    out = a.data / b.data

    def vjp(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _make("div", out, (a, b), vjp)


def square(a: Tensor) -> Tensor:
    return _make("square", a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split to avoid overflow in exp for large |x|
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def silu(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)

    def vjp(g):
        return (g * (s + a.data * s * (1.0 - s)),)

    return _make("silu", a.data * s, (a,), vjp)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make("softmax", out, (a,), vjp)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}") from exc

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make("matmul", out, (a, b), vjp)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def _expand_to(g: np.ndarray, shape, axes, keepdims) -> np.ndarray:
    if not keepdims:
        for ax in axes:
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        return (np.array(_expand_to(g, a.shape, axes, keepdims)),)

    return _make("sum", np.asarray(out), (a,), vjp)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def vjp(g):
        return (np.array(_expand_to(g, a.shape, axes, keepdims)) / count,)

    return _make("mean", np.asarray(out), (a,), vjp)


def mean_channel(a: Tensor) -> Tensor:
    """Average over axis 1 (channels) of an NCHW tensor, keeping the axis."""
    return mean(a, axis=1, keepdims=True)


def _extreme(a: Tensor, axis, keepdims, fn, op) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out = fn(a.data, axis=axes, keepdims=True)
    hit = a.data == out
    # ties share the gradient evenly
    share = hit / hit.sum(axis=axes, keepdims=True)
    value = out if keepdims else np.squeeze(out, axis=axes)

    def vjp(g):
        if not keepdims:
            for ax in axes:
                g = np.expand_dims(g, ax)
        return (g * share,)

    return _make(op, np.asarray(value), (a,), vjp)


def amax(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return _extreme(a, axis, keepdims, np.max, "amax")


def amin(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return _extreme(a, axis, keepdims, np.min, "amin")


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from exc
    return _make("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: {axes} is not a permutation of rank {a.ndim}")
    inverse = tuple(np.argsort(axes))
    return _make("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of an empty list")
    ref = tensors[0]
    ax = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(
            t.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != ax
        ):
            raise ShapeError(f"concat: incompatible shapes {ref.shape} and {t.shape}")
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])
    out = np.concatenate([t.data for t in tensors], axis=ax)

    def vjp(g):
        index = [slice(None)] * g.ndim
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            index[ax] = slice(lo, hi)
            parts.append(g[tuple(index)])
        return tuple(parts)

    return _make("concat", out, tensors, vjp)


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    return concat(tensors, axis=1)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    ax = axis % a.ndim
    if not 0 <= start < stop <= a.shape[ax]:
        raise ShapeError(f"slice [{start}:{stop}] out of range for extent {a.shape[ax]}")
    index = [slice(None)] * a.ndim
    index[ax] = slice(start, stop)
    index = tuple(index)

    def vjp(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        full[index] = g
        return (full,)

    return _make("slice", a.data[index].copy(), (a,), vjp)


def slice_channels(a: Tensor, start: int, stop: int) -> Tensor:
    return slice_axis(a, 1, start, stop)


def avgpool2(a: Tensor) -> Tensor:
    """2x2 average pooling with stride 2 on an NCHW tensor."""
    b, c, h, w = a.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avgpool2 needs even spatial extents, got {h}x{w}")
    out = a.data.reshape(b, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def vjp(g):
        return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25,)

    return _make("avgpool2", out, (a,), vjp)


def upsample2(a: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling of an NCHW tensor."""
    b, c, h, w = a.shape
    out = np.repeat(np.repeat(a.data, 2, axis=2), 2, axis=3)

    def vjp(g):
        return (g.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _make("upsample2", out, (a,), vjp)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _im2col(x: np.ndarray) -> np.ndarray:
    b, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(2, 3))
    # (B, C, H, W, 3, 3) -> (B*H*W, C*9)
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(b * h * w, c * 9)


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """3x3 convolution, stride 1, zero padding 1, computed directly (im2col)."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW input and OIHW weight, got {x.shape}, {weight.shape}")
    b, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if (kh, kw) != (3, 3):
        raise ShapeError(f"conv2d supports 3x3 kernels only, got {kh}x{kw}")
    if ci != c:
        raise ShapeError(f"conv2d: input has {c} channels, weight expects {ci}")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({o},)")
    cols = _im2col(x.data)
    wmat = weight.data.reshape(o, c * 9)
    out = (cols @ wmat.T).reshape(b, h, w, o).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data.reshape(1, o, 1, 1)
    out = np.ascontiguousarray(out)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def vjp(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (gm.T @ cols).reshape(weight.shape)
        # input gradient = same-padded convolution with the flipped, transposed kernel
        flipped = weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c, o * 9)
        gx = (_im2col(g) @ flipped.T).reshape(b, h, w, c).transpose(0, 3, 1, 2)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _make("conv2d", out, parents, vjp)


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

def _affine_shape(ndim: int, axis: int) -> Tuple[int, ...]:
    shape = [1] * ndim
    shape[axis] = -1
    return tuple(shape)


def batchnorm(
    x: Tensor,
    gamma: Optional[Tensor],
    beta: Optional[Tensor],
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool = True,
    momentum: float = 0.1,
    eps: float = 1e-5,
    axis: int = 1,
) -> Tensor:
    """Batch normalization over every axis except ``axis`` (the feature axis).

    In training mode the batch statistics are used and the running buffers
    are updated in place; in eval mode the running buffers are used.
    """
    ax = axis % x.ndim
    red = tuple(i for i in range(x.ndim) if i != ax)
    feat = x.shape[ax]
    if running_mean.shape != (feat,) or running_var.shape != (feat,):
        raise ShapeError(f"batchnorm: running stats must have shape ({feat},)")
    bshape = _affine_shape(x.ndim, ax)
    if training:
        n = int(np.prod([x.shape[i] for i in red]))
        mu = x.data.mean(axis=red, keepdims=True)
        var = x.data.var(axis=red, keepdims=True)
        unbiased = var.reshape(-1) * (n / max(n - 1, 1))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.reshape(-1)
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        mu = running_mean.reshape(bshape)
        var = running_var.reshape(bshape)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    g_ = gamma.data.reshape(bshape) if gamma is not None else 1.0
    out = xhat * g_ + (beta.data.reshape(bshape) if beta is not None else 0.0)
    parents = [x] + [p for p in (gamma, beta) if p is not None]

    def vjp(g):
        gx_hat = g * g_
        if training:
            gx = inv * (
                gx_hat
                - gx_hat.mean(axis=red, keepdims=True)
                - xhat * (gx_hat * xhat).mean(axis=red, keepdims=True)
            )
        else:
            gx = gx_hat * inv
        grads = [gx]
        if gamma is not None:
            grads.append((g * xhat).sum(axis=red))
        if beta is not None:
            grads.append(g.sum(axis=red))
        return tuple(grads)

    return _make("batchnorm", out, parents, vjp)


def _normalize_groups(x: np.ndarray, red, eps):
    mu = x.mean(axis=red, keepdims=True)
    var = x.var(axis=red, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    return (x - mu) * inv, inv


def _norm_vjp(gx_hat, xhat, inv, red):
    return inv * (
        gx_hat
        - gx_hat.mean(axis=red, keepdims=True)
        - xhat * (gx_hat * xhat).mean(axis=red, keepdims=True)
    )


def layernorm(x: Tensor, gamma: Optional[Tensor] = None, beta: Optional[Tensor] = None,
              eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply an optional affine map."""
    d = x.shape[-1]
    for p in (gamma, beta):
        if p is not None and p.shape != (d,):
            raise ShapeError(f"layernorm: affine parameter shape {p.shape} != ({d},)")
    xhat, inv = _normalize_groups(x.data, (-1,), eps)
    g_ = gamma.data if gamma is not None else 1.0
    out = xhat * g_ + (beta.data if beta is not None else 0.0)
    parents = [x] + [p for p in (gamma, beta) if p is not None]
    lead = tuple(range(x.ndim - 1))

    def vjp(g):
        grads = [_norm_vjp(g * g_, xhat, inv, (-1,))]
        if gamma is not None:
            grads.append((g * xhat).sum(axis=lead))
        if beta is not None:
            grads.append(g.sum(axis=lead))
        return tuple(grads)

    return _make("layernorm", out, parents, vjp)


def groupnorm(x: Tensor, groups: int, gamma: Optional[Tensor] = None,
              beta: Optional[Tensor] = None, eps: float = 1e-5) -> Tensor:
    b, c, h, w = x.shape
    if c % groups:
        raise ShapeError(f"groupnorm: {c} channels not divisible into {groups} groups")
    xg = x.data.reshape(b, groups, c // groups, h, w)
    red = (2, 3, 4)
    xhat_g, inv = _normalize_groups(xg, red, eps)
    xhat = xhat_g.reshape(x.shape)
    bshape = (1, c, 1, 1)
    g_ = gamma.data.reshape(bshape) if gamma is not None else 1.0
    out = xhat * g_ + (beta.data.reshape(bshape) if beta is not None else 0.0)
    parents = [x] + [p for p in (gamma, beta) if p is not None]

    def vjp(g):
        gxh = (g * g_).reshape(xg.shape)
        grads = [_norm_vjp(gxh, xhat_g, inv, red).reshape(x.shape)]
        if gamma is not None:
            grads.append((g * xhat).sum(axis=(0, 2, 3)))
        if beta is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return _make("groupnorm", out, parents, vjp)


# ---------------------------------------------------------------------------
# spectral filtering and spline bases
# ---------------------------------------------------------------------------

def spectral_filter(x: Tensor, gain: np.ndarray) -> Tensor:
    """``real(ifft2(fft2(x) * gain))`` over the last two axes.

    ``gain`` is a real array laid out in numpy's *unshifted* frequency order.
    Both transforms are orthonormal, so the adjoint of the real-linear map is
    the same filter with the conjugate gain.
    """
    if gain.shape != x.shape[-2:]:
        raise ShapeError(f"spectral_filter: gain {gain.shape} vs spatial {x.shape[-2:]}")
    out = np.fft.ifft2(np.fft.fft2(x.data, norm="ortho") * gain, norm="ortho").real

    def vjp(g):
        return (np.fft.ifft2(np.fft.fft2(g, norm="ortho") * np.conj(gain), norm="ortho").real,)

    return _make("spectral_filter", out, (x,), vjp)


def bspline(x: Tensor, grid: np.ndarray, order: int) -> Tensor:
    """B-spline basis values for every entry of ``x`` (appends a basis axis).

    Inputs are clamped to the interior span ``[grid[order], grid[-order-1]]``;
    the gradient is zero where clamping was active.
    """
    from kanrecon.kan import bspline_basis_with_derivative

    lo, hi = grid[order], grid[-order - 1]
    inside = (x.data >= lo) & (x.data <= hi)
    values, deriv = bspline_basis_with_derivative(x.data, grid, order)

    def vjp(g):
        return ((g * deriv).sum(axis=-1) * inside,)

    return _make("bspline", values, (x,), vjp)


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

class GradTape:
    """Primitive applications reachable from a root, in topological order."""

    def __init__(self, nodes: List[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root: Tensor) -> "GradTape":
        order: List[Tensor] = []
        seen = set()
        stack: List[Tuple[Tensor, bool]] = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            if t._node is not None:
                for p in reversed(t._node.parents):
                    if p.requires_grad and id(p) not in seen:
                        stack.append((p, False))
        return cls(order)

    def ops(self) -> List[str]:
        return [t._node.op if t._node is not None else "leaf" for t in self.nodes]

    def __len__(self) -> int:
        return len(self.nodes)


def backward(root: Tensor) -> Dict[Tensor, np.ndarray]:
    """Accumulate d(root)/d(leaf) into every ``requires_grad`` leaf.

    Returns a map from leaf tensor to its gradient. The graph is released
    afterwards; a second call on the same root raises :class:`TapeError`.
    """
    if root.size != 1:
        raise TapeError(f"backward needs a scalar root, got shape {root.shape}")
    if root._consumed:
        raise TapeError("tape already consumed by a previous backward()")
    if not root.requires_grad:
        raise TapeError("root does not require grad")
    tape = GradTape.from_root(root)
    grads: Dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    leaves: Dict[Tensor, np.ndarray] = {}
    for t in reversed(tape.nodes):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        node = t._node
        if node is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            leaves[t] = t.grad
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
        t._node = None
        t._consumed = True
    root._consumed = True
    return leaves


# ---------------------------------------------------------------------------
# registry
# ---------------------------------------------------------------------------

PRIMITIVES: Dict[str, Callable[..., Tensor]] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "scalar_mul": scalar_mul,
    "div": div,
    "square": square,
    "exp": exp,
    "matmul": matmul,
    "conv2d": conv2d,
    "relu": relu,
    "silu": silu,
    "batchnorm": batchnorm,
    "layernorm": layernorm,
    "groupnorm": groupnorm,
    "softmax": softmax,
    "concat_channels": lambda *ts: concat_channels(ts),
    "reshape": reshape,
    "transpose": transpose,
    "mean_channel": mean_channel,
    "slice_channels": slice_channels,
    "sum": sum_,
    "mean": mean,
    "amax": amax,
    "amin": amin,
    "avgpool2": avgpool2,
    "upsample2": upsample2,
    "spectral_filter": spectral_filter,
    "bspline": bspline,
}


def primitive_forward(op: str, inputs: Sequence[Tensor], attrs: Optional[dict] = None) -> Tensor:
    """Apply the registered primitive ``op`` to ``inputs`` with keyword ``attrs``."""
    try:
        fn = PRIMITIVES[op]
    except KeyError:
        raise KeyError(f"unknown primitive {op!r}") from None
    return fn(*inputs, **(attrs or {}))
