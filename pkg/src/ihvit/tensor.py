"""Dense tensors with reverse-mode automatic differentiation.

Tensors are plain row-major numpy arrays (f32 by default, f64 for
verification) wrapped with a ``requires_grad`` flag.  Differentiable
operations record themselves onto an explicit :class:`Tape`; there is no
global graph.  A tape is created per training step::

    with Tape() as tape:
        loss = cross_entropy(matmul(x, w), labels)
    tape.backward(loss)      # populates .grad on reachable tensors

Every forward output is checked for NaN/Inf; a non-finite value aborts
the step with a diagnostic naming the operation.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

_DTYPES = {"f32": np.float32, "f64": np.float64}
_DTYPE_NAMES = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class TensorError(Exception):
    """Base class for tensor-library failures."""


class ShapeError(TensorError):
    """Operand shapes cannot be combined by the requested operation."""


class UsageError(TensorError):
    """API misuse: bad tape state, dtype mix, non-scalar loss, bad labels."""


class NumericsError(TensorError):
    """A forward output contained NaN or Inf."""


class Tensor:
    """Dense multi-dimensional array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, dtype: str | None = None, requires_grad: bool = False):
        if dtype is not None and dtype not in _DTYPES:
            raise UsageError(f"unknown dtype {dtype!r}; expected 'f32' or 'f64'")
        keep = isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64)
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(_DTYPES[dtype], copy=False)
        elif not keep:
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        _ensure_finite("tensor", self.data)

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        t = object.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> str:
        return _DTYPE_NAMES[self.data.dtype]

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def astype(self, dtype: str) -> "Tensor":
        """Dtype cast; not differentiable (use at graph boundaries only)."""
        if dtype not in _DTYPES:
            raise UsageError(f"unknown dtype {dtype!r}")
        return Tensor(self.data.astype(_DTYPES[dtype]), requires_grad=self.requires_grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other, self))

    def __radd__(self, other):
        return add(_as_tensor(other, self), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)


class _Node:
    __slots__ = ("op", "inputs", "out", "backward")

    def __init__(self, op, inputs, out, backward):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.backward = backward


class Tape:
    """Ordered record of one forward pass, consumed by one backward pass."""

    def __init__(self):
        self._nodes: list[_Node] = []
        self._spent = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise UsageError("tape context exited out of order")
        stack.pop()

    def __len__(self) -> int:
        return len(self._nodes)

    def reset(self) -> None:
        """Discard recorded nodes so the tape can serve a new forward pass."""
        self._nodes.clear()
        self._spent = False

    def backward(self, loss: Tensor) -> None:
        """Reverse sweep from ``loss``; gradients sum over all paths."""
        if loss.data.size != 1:
            raise UsageError(f"backward requires a scalar loss, got shape {loss.shape}")
        if self._spent:
            raise UsageError("tape already consumed by a backward pass; reset() to reuse")
        produced = {id(n.out) for n in self._nodes}
        if id(loss) not in produced:
            raise UsageError("loss tensor was not produced on this tape")
        self._spent = True

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        holders: dict[int, Tensor] = {id(loss): loss}
        for node in reversed(self._nodes):
            g = grads.pop(id(node.out), None)
            holders.pop(id(node.out), None)
            if g is None:
                continue
            if node.out.requires_grad:
                node.out.grad = g
            for t, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                    holders[key] = t
        for key, t in holders.items():
            t.grad = grads[key]


def backward(loss: Tensor, tape: Tape) -> None:
    """Functional alias for :meth:`Tape.backward`."""
    tape.backward(loss)


_TLS = threading.local()


def _tape_stack() -> list:
    stack = getattr(_TLS, "stack", None)
    if stack is None:
        stack = []
        _TLS.stack = stack
    return stack


def _current_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def _ensure_finite(op: str, arr: np.ndarray) -> None:
    # cheap one-pass probe: NaN/Inf in the data always poisons the f64 sum
    if math.isfinite(float(arr.sum(dtype=np.float64))):
        return
    finite = np.isfinite(arr)
    n_bad = int(arr.size - finite.sum())
    raise NumericsError(
        f"{op}: {n_bad} non-finite value(s) in output of shape {tuple(arr.shape)}"
    )


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _check_dtypes(op: str, *tensors: Tensor) -> None:
    dtypes = {t.data.dtype for t in tensors}
    if len(dtypes) > 1:
        names = [t.dtype for t in tensors]
        raise UsageError(f"{op}: mixed dtypes {names}")


def _apply(op: str, out_data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn,
           check: bool = True) -> Tensor:
    # pure data-movement ops cannot create non-finite values from checked inputs
    if check:
        _ensure_finite(op, out_data)
    rg = any(t.requires_grad for t in inputs)
    out = Tensor._wrap(out_data, rg)
    tape = _current_tape()
    if tape is not None and rg:
        tape._nodes.append(_Node(op, inputs, out, backward_fn))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise / structural ops


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_dtypes("add", a, b)
    na, nb = a.requires_grad, b.requires_grad

    def bwd(g):
        return (_unbroadcast(g, a.shape) if na else None,
                _unbroadcast(g, b.shape) if nb else None)

    return _apply("add", a.data + b.data, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_dtypes("sub", a, b)
    na, nb = a.requires_grad, b.requires_grad

    def bwd(g):
        return (_unbroadcast(g, a.shape) if na else None,
                _unbroadcast(-g, b.shape) if nb else None)

    return _apply("sub", a.data - b.data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_dtypes("mul", a, b)
    da, db = a.data, b.data
    na, nb = a.requires_grad, b.requires_grad

    def bwd(g):
        return (_unbroadcast(g * db, a.shape) if na else None,
                _unbroadcast(g * da, b.shape) if nb else None)

    return _apply("mul", da * db, (a, b), bwd)


def neg(a: Tensor) -> Tensor:
    return _apply("neg", -a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return _apply("scale", a.data * c, (a,), lambda g: (g * c,))


def abs_(a: Tensor) -> Tensor:
    sign = np.sign(a.data)
    return _apply("abs", np.abs(a.data), (a,), lambda g: (g * sign,))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    old = a.shape
    return _apply("reshape", a.data.reshape(shape), (a,),
                  lambda g: (g.reshape(old),), check=False)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _apply("transpose", a.data.transpose(axes), (a,),
                  lambda g: (g.transpose(inv),), check=False)


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    old = a.shape
    out = np.broadcast_to(a.data, shape).copy()
    return _apply("broadcast_to", out, (a,), lambda g: (_unbroadcast(g, old),), check=False)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    _check_dtypes("concat", *tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _apply("concat", np.concatenate([t.data for t in tensors], axis=axis),
                  tensors, bwd, check=False)


def slice_(a: Tensor, key) -> Tensor:
    out = a.data[key]
    if np.isscalar(out) or out.ndim == 0:
        out = np.asarray(out, dtype=a.data.dtype)
    shape = a.shape

    def bwd(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[key] = g
        return (full,)

    return _apply("slice", np.ascontiguousarray(out), (a,), bwd, check=False)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _apply("sum", a.data.sum(axis=axis, keepdims=keepdims), (a,), bwd)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    if axis is None:
        count = a.size
    else:
        ax = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([shape[i] for i in ax]))
    inv = 1.0 / count

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g * g.dtype.type(inv), shape).copy(),)

    return _apply("mean", a.data.mean(axis=axis, keepdims=keepdims), (a,), bwd)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_dtypes("matmul", a, b)
    da, db = a.data, b.data
    if da.ndim < 2 or db.ndim < 2:
        raise ShapeError(f"matmul: operands must be >=2-D, got {a.shape} x {b.shape}")
    if da.shape[-1] != db.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ: {a.shape} x {b.shape}")
    if da.ndim != db.ndim or da.shape[:-2] != db.shape[:-2]:
        raise ShapeError(f"matmul: batch dimensions differ: {a.shape} x {b.shape}")
    na, nb = a.requires_grad, b.requires_grad

    def bwd(g):
        return (g @ db.swapaxes(-1, -2) if na else None,
                da.swapaxes(-1, -2) @ g if nb else None)

    return _apply("matmul", da @ db, (a, b), bwd)


# ---------------------------------------------------------------------------
# activations


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _apply("relu", np.where(mask, a.data, 0), (a,), lambda g: (g * mask,))


def gelu(a: Tensor) -> Tensor:
    """Exact Gaussian-CDF form x * Phi(x), not the tanh approximation."""
    x = a.data
    phi_cdf = 0.5 * (1.0 + erf(x * x.dtype.type(_INV_SQRT2)))
    pdf = np.exp(-0.5 * x * x) * x.dtype.type(_INV_SQRT2PI)
    local = phi_cdf + x * pdf
    return _apply("gelu", x * phi_cdf, (a,), lambda g: (g * local,))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        return ((g - (g * out).sum(axis=axis, keepdims=True)) * out,)

    return _apply("softmax", out, (a,), bwd)


# ---------------------------------------------------------------------------
# normalization


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-token normalization over the last axis, then affine."""
    if eps <= 0:
        raise UsageError(f"layernorm: eps must be > 0, got {eps}")
    _check_dtypes("layernorm", x, gamma, beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(
            f"layernorm: gamma/beta must have shape ({d},), got {gamma.shape}/{beta.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.data.dtype.type(eps))
    xhat = (x.data - mu) * inv
    out = xhat * gamma.data + beta.data

    def bwd(g):
        gct = g * gamma.data
        gx = inv * (gct - gct.mean(axis=-1, keepdims=True)
                    - xhat * (gct * xhat).mean(axis=-1, keepdims=True))
        axes = tuple(range(x.data.ndim - 1))
        return gx.astype(x.data.dtype), (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _apply("layernorm", out, (x, gamma, beta), bwd)


def instance_norm2d(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization over each instance's spatial dims.

    Batch-statistics-free, so batches of 1 behave identically to larger
    batches; used in place of batch norm throughout the CNN branch.
    """
    if eps <= 0:
        raise UsageError(f"instance_norm2d: eps must be > 0, got {eps}")
    _check_dtypes("instance_norm2d", x, gamma, beta)
    if x.ndim != 4:
        raise ShapeError(f"instance_norm2d: expected 4-D input, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(
            f"instance_norm2d: gamma/beta must have shape ({c},), got {gamma.shape}/{beta.shape}"
        )
    g4 = gamma.data.reshape(1, c, 1, 1)
    b4 = beta.data.reshape(1, c, 1, 1)
    mu = x.data.mean(axis=(2, 3), keepdims=True)
    var = x.data.var(axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + x.data.dtype.type(eps))
    xhat = (x.data - mu) * inv
    out = xhat * g4 + b4

    def bwd(g):
        gct = g * g4
        gx = inv * (gct - gct.mean(axis=(2, 3), keepdims=True)
                    - xhat * (gct * xhat).mean(axis=(2, 3), keepdims=True))
        return (gx.astype(x.data.dtype),
                (g * xhat).sum(axis=(0, 2, 3)),
                g.sum(axis=(0, 2, 3)))

    return _apply("instance_norm2d", out, (x, gamma, beta), bwd)


# ---------------------------------------------------------------------------
# convolution / pooling


def conv_out_extent(extent: int, k: int, stride: int, pad: int) -> int:
    return (extent + 2 * pad - k) // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    n = xp.shape[0]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, -1)


def _col2im(gcols: np.ndarray, n: int, c: int, h: int, w: int,
            kh: int, kw: int, stride: int, pad: int, oh: int, ow: int) -> np.ndarray:
    gwin = gcols.reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
    gxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=gcols.dtype)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += gwin[:, :, :, :, i, j]
    if pad:
        return gxp[:, :, pad:pad + h, pad:pad + w]
    return gxp


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None,
           stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding, NCHW layout."""
    tensors = (x, w) if bias is None else (x, w, bias)
    _check_dtypes("conv2d", *tensors)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and weight, got {x.shape}, {w.shape}")
    n, c, h, wd = x.shape
    o, cw, kh, kw = w.shape
    if cw != c:
        raise ShapeError(f"conv2d: input channels {c} != weight channels {cw}")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"conv2d: bias must have shape ({o},), got {bias.shape}")
    oh = conv_out_extent(h, kh, stride, pad)
    ow = conv_out_extent(wd, kw, stride, pad)
    if oh <= 0 or ow <= 0:
        raise ShapeError(
            f"conv2d: non-positive output extent {oh}x{ow} for input {h}x{wd}, "
            f"kernel {kh}x{kw}, stride {stride}, pad {pad}"
        )
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _im2col(xp, kh, kw, stride, oh, ow)
    wmat = w.data.reshape(o, -1)
    out2 = cols @ wmat.T
    if bias is not None:
        out2 = out2 + bias.data
    out = out2.reshape(n, oh, ow, o).transpose(0, 3, 1, 2)
    assert out.shape[2] == conv_out_extent(h, kh, stride, pad)
    assert out.shape[3] == conv_out_extent(wd, kw, stride, pad)

    nx, nw = x.requires_grad, w.requires_grad

    def bwd(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (g2.T @ cols).reshape(w.shape) if nw else None
        gx = None
        if nx:
            gcols = g2 @ wmat
            gx = _col2im(gcols, n, c, h, wd, kh, kw, stride, pad, oh, ow)
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _apply("conv2d", np.ascontiguousarray(out), tensors, bwd)


def maxpool2d(x: Tensor, k: int, stride: int | None = None, pad: int = 0) -> Tensor:
    """Max pooling; padding uses a -inf sentinel so padded cells never win."""
    if stride is None:
        stride = k
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d: expected 4-D input, got {x.shape}")
    if pad >= k:
        raise UsageError(f"maxpool2d: pad {pad} must be < kernel {k}")
    n, c, h, w = x.shape
    oh = conv_out_extent(h, k, stride, pad)
    ow = conv_out_extent(w, k, stride, pad)
    if oh <= 0 or ow <= 0:
        raise ShapeError(
            f"maxpool2d: non-positive output extent {oh}x{ow} for input {h}x{w}, "
            f"kernel {k}, stride {stride}, pad {pad}"
        )
    if pad:
        xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)),
                    constant_values=-np.inf)
    else:
        xp = x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride].reshape(n, c, oh, ow, k * k)
    am = win.argmax(axis=-1)
    out = np.take_along_axis(win, am[..., None], axis=-1)[..., 0]
    assert out.shape == (n, c, oh, ow)

    def bwd(g):
        # route each window's gradient to its argmax cell, one (i, j) offset
        # of the window at a time so every scatter is a strided add
        gxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                sel = am == i * k + j
                if sel.any():
                    gxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += g * sel
        if pad:
            return (gxp[:, :, pad:pad + h, pad:pad + w],)
        return (gxp,)

    return _apply("maxpool2d", np.ascontiguousarray(out), (x,), bwd)


# ---------------------------------------------------------------------------
# loss


def cross_entropy(logits: Tensor, labels, class_weights: np.ndarray | None = None) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy: expected [batch, classes] logits, got {logits.shape}")
    b, k = logits.shape
    y = np.asarray(labels, dtype=np.int64)
    if y.shape != (b,):
        raise UsageError(f"cross_entropy: expected {b} labels, got shape {y.shape}")
    if y.size and (y.min() < 0 or y.max() >= k):
        raise UsageError(f"cross_entropy: label out of range [0, {k})")
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    se = e.sum(axis=1, keepdims=True)
    logp = (z - m) - np.log(se)
    per_sample = -logp[np.arange(b), y]
    if class_weights is not None:
        cw = np.asarray(class_weights, dtype=z.dtype)
        if cw.shape != (k,):
            raise UsageError(f"cross_entropy: class_weights must have shape ({k},)")
        wts = cw[y]
        denom = wts.sum()
        loss = (per_sample * wts).sum() / denom
    else:
        wts = None
        denom = float(b)
        loss = per_sample.mean()

    probs = e / se

    def bwd(g):
        gl = probs.copy()
        gl[np.arange(b), y] -= 1.0
        if wts is not None:
            gl *= (wts / denom)[:, None]
        else:
            gl /= denom
        return (gl * g,)

    return _apply("cross_entropy", np.asarray(loss, dtype=z.dtype), (logits,), bwd)


# ---------------------------------------------------------------------------
# verification


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must be a scalar-valued function of ``x`` alone (other tensors it
    closes over are held fixed).  Relative error per element is
    ``|analytic - cd| / max(|analytic|, |cd|, 1e-8)``.
    """
    if h is None:
        h = 1e-5 if x.dtype == "f64" else 1e-3
    x.requires_grad = True
    with Tape() as tape:
        out = f(x)
    if out.size != 1:
        raise UsageError(f"grad_check: f must be scalar-valued, got shape {out.shape}")
    tape.backward(out)
    analytic = x.grad.reshape(x.data.shape).copy()

    cd = np.zeros_like(x.data, dtype=np.float64)
    flat = x.data.reshape(-1)
    cdf = cd.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x).item()
        flat[i] = orig - h
        fm = f(x).item()
        flat[i] = orig
        cdf[i] = (fp - fm) / (2.0 * h)

    num = np.abs(analytic.astype(np.float64) - cd)
    den = np.maximum(np.maximum(np.abs(analytic), np.abs(cd)), 1e-8)
    return float((num / den).max())
