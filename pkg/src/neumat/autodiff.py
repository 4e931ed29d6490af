"""Reverse-mode automatic differentiation over dense numpy arrays.

A dynamic tape records every differentiable operation as it executes;
``backward`` replays the tape in reverse, accumulating gradients into
each tensor that requires them.  Only the operations the material model
and its losses need are implemented.  Binary operations require equal
shapes; the single broadcasting rule is scalar-vs-tensor.

Storage is float32 by default (pass float64 arrays for shadow-precision
gradient checking); reductions and convolutions accumulate in float64
regardless of storage dtype.
"""
from __future__ import annotations

import threading

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_DTYPE = np.float32

_FLOAT_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Operands with incompatible extents."""


class NonFiniteError(FloatingPointError):
    """A forward or backward pass produced NaN or Inf."""


_CHECK_FINITE = False


def set_debug_checks(enabled: bool) -> None:
    """Toggle per-operation NaN/Inf checks (off by default: they cost a
    full pass over every op output)."""
    global _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)


# ---------------------------------------------------------------------------
# tape

class _Node:
    __slots__ = ("out", "inputs", "backward_fn")

    def __init__(self, out, inputs, backward_fn):
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of executed operations.

    Inputs of every node precede it, so a single reverse sweep is a valid
    backpropagation order.  A tape may be backwarded once.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._consumed = False

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        popped = _tape_stack().pop()
        assert popped is self
        return False


_TLS = threading.local()


def _tape_stack() -> list:
    # per-thread stacks: worker threads record onto independent tapes
    stack = getattr(_TLS, "stack", None)
    if stack is None:
        stack = _TLS.stack = []
    return stack


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


# ---------------------------------------------------------------------------
# tensor

class Tensor:
    """Dense multi-dimensional value, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        """The underlying array. Treat it as read-only."""
        return self.data

    def zero_grad(self):
        self.grad = None

    # -- operators ---------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_coerce(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return pow_const(self, p)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"


def _coerce(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def record(out_data: np.ndarray, inputs, backward_fn) -> Tensor:
    """Wrap an op result, registering a backward node on the active tape.

    ``backward_fn(grad_out)`` must return one gradient array (or None) per
    input, each with that input's exact shape.  Also the extension point
    for fused ops defined outside this module.
    """
    out = Tensor(out_data)
    if _CHECK_FINITE and not np.all(np.isfinite(out.data)):
        raise NonFiniteError("operation produced a non-finite value")
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._tape = tape
        tape.nodes.append(_Node(out, tuple(inputs), backward_fn))
    return out


def backward(loss: Tensor, grad_sink: dict | None = None) -> None:
    """Accumulate d(loss)/d(tensor) into every requires_grad tensor.

    Gradients add across multiple uses of a tensor.  The loss must be a
    scalar recorded on an active-at-the-time tape.

    With ``grad_sink`` (an id(tensor) -> array dict), leaf gradients go
    into the sink instead of Tensor.grad, so several worker threads can
    backward through shared parameters concurrently; intermediates of
    this tape still use their own grad slots.
    """
    if loss.data.ndim != 0:
        raise ShapeError(
            f"backward expects a scalar loss, got shape {loss.data.shape}")
    tape = loss._tape
    if tape is None:
        raise ValueError("loss was not recorded on a tape "
                         "(no active Tape, or no input required gradients)")
    if tape._consumed:
        raise RuntimeError("tape already backwarded; build a fresh one per pass")
    tape._consumed = True

    produced = None
    if grad_sink is not None:
        produced = {id(node.out) for node in tape.nodes}

    def accumulate(t: Tensor, g: np.ndarray):
        if grad_sink is not None and id(t) not in produced:
            prev = grad_sink.get(id(t))
            grad_sink[id(t)] = np.array(g, dtype=t.data.dtype) if prev is None \
                else prev + g
            return
        if t.grad is None:
            # copy: g may alias gout or a view of it
            t.grad = np.array(g, dtype=t.data.dtype)
        else:
            t.grad += g

    loss.grad = np.ones((), dtype=loss.data.dtype)
    for node in reversed(tape.nodes):
        gout = node.out.grad
        if gout is None:
            continue
        grads = node.backward_fn(gout)
        for t, g in zip(node.inputs, grads):
            if g is None or not t.requires_grad:
                continue
            if _CHECK_FINITE and not np.all(np.isfinite(g)):
                raise NonFiniteError("backward produced a non-finite gradient")
            accumulate(t, g)


# ---------------------------------------------------------------------------
# elementwise

def _binary_shapes(a: Tensor, b: Tensor, opname: str):
    if a.data.shape != b.data.shape and a.data.ndim != 0 and b.data.ndim != 0:
        raise ShapeError(
            f"{opname}: operand shapes {a.data.shape} and {b.data.shape} differ "
            "(only scalar-tensor broadcasting is supported)")


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    # counterpart of scalar-tensor broadcasting: reduce back to 0-d
    if g.shape == tuple(shape):
        return g
    return np.asarray(g.sum(dtype=np.float64)).reshape(shape)


def add(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    _binary_shapes(a, b, "add")
    return record(a.data + b.data, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    _binary_shapes(a, b, "sub")
    return record(a.data - b.data, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    _binary_shapes(a, b, "mul")
    return record(a.data * b.data, (a, b),
                  lambda g: (_unbroadcast(g * b.data, a.shape),
                             _unbroadcast(g * a.data, b.shape)))


def relu(x: Tensor) -> Tensor:
    # derivative at 0 is 0
    return record(np.maximum(x.data, 0), (x,),
                  lambda g: (g * (x.data > 0),))


def sin(x: Tensor) -> Tensor:
    return record(np.sin(x.data), (x,), lambda g: (g * np.cos(x.data),))


def cos(x: Tensor) -> Tensor:
    return record(np.cos(x.data), (x,), lambda g: (-g * np.sin(x.data),))


def square(x: Tensor) -> Tensor:
    return record(x.data * x.data, (x,), lambda g: (2.0 * x.data * g,))


def abs_(x: Tensor) -> Tensor:
    # sign(0) == 0, so the subgradient at the kink is 0
    return record(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def pow_const(x: Tensor, p: float) -> Tensor:
    p = float(p)
    fractional = p != int(p)
    if fractional and np.any(x.data < 0):
        raise ValueError(
            f"pow({p}) on a negative operand; clamp inputs first")

    def bwd(g):
        if p >= 1 or not fractional:
            d = p * x.data ** (p - 1)
        else:
            # x^(p-1) diverges at 0 for p < 1: clamped subgradient 0 there
            pos = x.data > 0
            safe = np.where(pos, x.data, 1.0)
            d = np.where(pos, p * safe ** np.float64(p - 1), 0.0)
        return (g * d.astype(x.data.dtype),)

    return record(x.data ** p, (x,), bwd)


def clamp_min(x: Tensor, lo: float = 0.0) -> Tensor:
    # gradient is 0 at and below the clamp point
    return record(np.maximum(x.data, lo), (x,),
                  lambda g: (g * (x.data > lo),))


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(
            f"matmul needs 2-D operands, got {a.data.shape} and {b.data.shape}")
    m, k = a.data.shape
    k2, n = b.data.shape
    if k != k2:
        raise ShapeError(
            f"matmul: inner extents differ, {m}x{k} cannot multiply {k2}x{n}")
    return record(a.data @ b.data, (a, b),
                  lambda g: (g @ b.data.T, a.data.T @ g))


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b with the bias broadcast over rows (one fused op, so the
    row broadcast does not need a general broadcasting rule)."""
    if x.data.ndim != 2 or w.data.ndim != 2 or b.data.ndim != 1:
        raise ShapeError(
            f"affine needs (n,din) @ (din,dout) + (dout,), got "
            f"{x.data.shape}, {w.data.shape}, {b.data.shape}")
    if x.data.shape[1] != w.data.shape[0] or w.data.shape[1] != b.data.shape[0]:
        raise ShapeError(
            f"affine: extents do not chain, {x.data.shape} @ {w.data.shape} + {b.data.shape}")

    def bwd(g):
        db = g.sum(axis=0, dtype=np.float64).astype(b.data.dtype)
        return (g @ w.data.T, x.data.T @ g, db)

    return record(x.data @ w.data + b.data[None, :], (x, w, b), bwd)


# ---------------------------------------------------------------------------
# spatial ops

def _as_batched(x: np.ndarray):
    if x.ndim == 3:
        return x[None], False
    if x.ndim == 4:
        return x, True
    raise ShapeError(f"expected (C,H,W) or (N,C,H,W), got shape {x.shape}")


def _im2col(xp: np.ndarray, kh: int, kw: int) -> np.ndarray:
    # (N, C, Hp, Wp) -> matrix (N*Ho*Wo, C*kh*kw); copies for BLAS
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    n, c, ho, wo = win.shape[:4]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw), ho, wo


def conv2d(x: Tensor, kernel: Tensor, padding: int, bias: Tensor | None = None) -> Tensor:
    """Cross-correlation with zero padding, stride 1.

    Accepts (C,H,W) or batched (N,C,H,W) input; kernel is
    (C_out, C_in, kh, kw) with odd kh, kw.  Accumulates in float64.
    """
    xd, batched = _as_batched(x.data)
    if kernel.data.ndim != 4:
        raise ShapeError(f"kernel must be 4-D, got shape {kernel.data.shape}")
    n, c_in, h, w = xd.shape
    c_out, ck, kh, kw = kernel.data.shape
    if ck != c_in:
        raise ShapeError(f"kernel expects {ck} input channels, input has {c_in}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"kernel extents must be odd, got {kh}x{kw}")
    if padding < 0:
        raise ShapeError("padding must be >= 0")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ShapeError(
            f"kernel {kh}x{kw} larger than padded input "
            f"{h + 2 * padding}x{w + 2 * padding}")

    dtype = xd.dtype
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols, ho, wo = _im2col(xp, kh, kw)
    cols64 = cols.astype(np.float64, copy=False)
    kmat64 = kernel.data.reshape(c_out, c_in * kh * kw).astype(np.float64, copy=False)
    out = (cols64 @ kmat64.T).reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2)
    out = out.astype(dtype)
    if bias is not None:
        if bias.data.shape != (c_out,):
            raise ShapeError(f"bias must have shape ({c_out},), got {bias.data.shape}")
        out = out + bias.data[None, :, None, None]

    def bwd(g):
        g4 = g if g.ndim == 4 else g[None]
        gflat64 = g4.transpose(0, 2, 3, 1).reshape(-1, c_out).astype(np.float64, copy=False)
        dk = (gflat64.T @ cols64).reshape(c_out, c_in, kh, kw).astype(kernel.data.dtype)
        # dX: full correlation of g with the spatially flipped, channel-swapped kernel
        pg = kh - 1
        gp = np.pad(g4, ((0, 0), (0, 0), (pg, pg), (kw - 1, kw - 1)))
        gcols, gh, gw = _im2col(gp, kh, kw)
        kt = kernel.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
        kt64 = kt.reshape(c_in, c_out * kh * kw).astype(np.float64, copy=False)
        gcols64 = gcols.astype(np.float64, copy=False)
        dxp = (gcols64 @ kt64.T).reshape(n, gh, gw, c_in).transpose(0, 3, 1, 2)
        dx = dxp[:, :, padding:padding + h, padding:padding + w].astype(dtype)
        if not batched:
            dx = dx[0]
        db = None
        if bias is not None:
            db = g4.sum(axis=(0, 2, 3), dtype=np.float64).astype(bias.data.dtype)
        return (dx, dk, db)

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    out_final = out if batched else out[0]
    return record(out_final, inputs, bwd)


def maxpool2d(x: Tensor, window: int = 3, stride: int = 1, padding: int = 1) -> Tensor:
    """Per-channel sliding-window maximum; gradient routes to the argmax
    (first index in scan order on ties).  Padding uses -inf so border
    maxima come only from in-bounds texels."""
    if stride != 1:
        raise ShapeError("maxpool2d supports stride 1 only")
    xd, batched = _as_batched(x.data)
    if xd.size == 0:
        raise ShapeError("maxpool2d on empty input")
    n, c, h, w = xd.shape
    if h + 2 * padding < window or w + 2 * padding < window:
        raise ShapeError(f"window {window} larger than padded input")
    dtype = xd.dtype
    hp, wp = h + 2 * padding, w + 2 * padding
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                constant_values=-np.inf)
    win = sliding_window_view(xp, (window, window), axis=(2, 3))
    ho, wo = win.shape[2], win.shape[3]
    flat = win.reshape(n, c, ho, wo, window * window)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def bwd(g):
        g4 = g if g.ndim == 4 else g[None]
        ni, ci, oy, ox = np.indices((n, c, ho, wo), sparse=True)
        iy = oy + idx // window
        ix = ox + idx % window
        lin = ((ni * c + ci) * hp + iy) * wp + ix
        dxp = np.bincount(lin.ravel(), weights=g4.ravel().astype(np.float64),
                          minlength=n * c * hp * wp)
        dxp = dxp.reshape(n, c, hp, wp)
        dx = dxp[:, :, padding:padding + h, padding:padding + w].astype(dtype)
        return (dx if batched else dx[0],)

    return record(out if batched else out[0], (x,), bwd)


# ---------------------------------------------------------------------------
# reductions & reshaping

def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(dtype=np.float64)).astype(x.data.dtype)
    return record(out, (x,),
                  lambda g: (np.full(x.data.shape, float(g), dtype=x.data.dtype),))


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    out = np.asarray(x.data.mean(dtype=np.float64)).astype(x.data.dtype)
    return record(out, (x,),
                  lambda g: (np.full(x.data.shape, float(g) / n, dtype=x.data.dtype),))


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        gm = np.moveaxis(g, axis, 0)
        return tuple(np.moveaxis(gm[offsets[i]:offsets[i + 1]], 0, axis)
                     for i in range(len(tensors)))

    return record(out, tuple(tensors), bwd)


def reshape(x: Tensor, shape) -> Tensor:
    return record(x.data.reshape(shape), (x,),
                  lambda g: (g.reshape(x.data.shape),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return record(np.transpose(x.data, axes), (x,),
                  lambda g: (np.transpose(g, inv),))
