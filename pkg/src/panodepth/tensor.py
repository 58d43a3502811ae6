"""Dense tensors with a fixed catalog of differentiable primitives.

The engine is deliberately small: a :class:`Tensor` wraps a numpy array,
every primitive records its inputs and a backward closure on a global
:class:`Tape`, and :func:`backward` replays the tape in reverse to fill in
``.grad`` arrays.  Forward math runs in float32 by default; gradient audits
are expected to run in float64 (see :func:`finite_diff_gradcheck`).

Only the primitives below exist -- this is not a general autodiff system.
Structural ops (reshape, permute, concat, gather_rows, broadcast_to) carry
trivial gradients; the heavy lifting is matmul, conv2d, softmax_lastdim and
bilinear_resize.  Every primitive validates shapes eagerly and checks its
output for NaN/Inf, so wiring mistakes surface at the op that caused them.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "UsageError",
    "NumericError",
    "GradCheckReport",
    "no_grad",
    "fresh_tape",
    "active_tape",
    "backward",
    "add",
    "sub",
    "mul",
    "neg",
    "exp",
    "absolute",
    "sigmoid",
    "relu",
    "tensor_sum",
    "tensor_max",
    "reshape",
    "permute",
    "broadcast_to",
    "concat",
    "gather_rows",
    "matmul",
    "softmax_lastdim",
    "conv2d",
    "bilinear_resize",
    "finite_diff_gradcheck",
]


class ShapeError(ValueError):
    """Operand shapes are inconsistent with the primitive's contract."""


class UsageError(ValueError):
    """A primitive was called outside its precondition."""


class NumericError(ArithmeticError):
    """A primitive produced NaN or Inf (always an error state here)."""


# ---------------------------------------------------------------------------
# Tape


@dataclass
class TapeRecord:
    op: str
    inputs: tuple
    output: "Tensor"
    backward_fn: Callable[[np.ndarray], tuple]


class Tape:
    """Ordered record of primitive applications.

    Creation order is a topological order of the computation graph, so
    replaying the records in reverse propagates gradients correctly and
    visits each record exactly once.
    """

    __slots__ = ("records", "enabled")

    def __init__(self):
        self.records: list[TapeRecord] = []
        self.enabled = True

    def clear(self):
        self.records.clear()

    def __len__(self):
        return len(self.records)


_TAPE = Tape()


def active_tape() -> Tape:
    return _TAPE


@contextmanager
def no_grad():
    """Disable tape recording within the block (forward-only evaluation)."""
    prev = _TAPE.enabled
    _TAPE.enabled = False
    try:
        yield
    finally:
        _TAPE.enabled = prev


@contextmanager
def fresh_tape():
    """Run the block on a private tape, restoring the previous one after."""
    global _TAPE
    prev = _TAPE
    _TAPE = Tape()
    try:
        yield _TAPE
    finally:
        _TAPE = prev


def _check_finite(op: str, arr: np.ndarray):
    if arr.size == 0:
        return
    # min/max propagate NaN and expose Inf without a boolean temporary
    lo, hi = arr.min(), arr.max()
    if not (math.isfinite(lo) and math.isfinite(hi)):
        bad = int(np.count_nonzero(~np.isfinite(arr)))
        raise NumericError(f"{op}: produced {bad} non-finite value(s)")


# ---------------------------------------------------------------------------
# Tensor


class Tensor:
    """N-dimensional array of IEEE-754 values with an optional gradient.

    ``data`` is row-major (C order).  Tensors are immutable once created;
    the only sanctioned mutation is gradient accumulation during
    :func:`backward` (and parameter updates by an optimizer between tapes).
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            raise UsageError("wrap raw array data, not another Tensor")
        arr = np.array(data, dtype=dtype, copy=True, order="C")
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        _check_finite("Tensor()", arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        # Internal: take ownership of arr without copying.
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        return t

    # -- introspection ------------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError("item() requires a single-element tensor")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        """Read-only view of the underlying array."""
        v = self.data.view()
        v.flags.writeable = False
        return v

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, False)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data, requires_grad=self.requires_grad, dtype=dtype)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}{flag})"

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, _coerce(other, self))

    def __radd__(self, other):
        return add(_coerce(other, self), self)

    def __sub__(self, other):
        return sub(self, _coerce(other, self))

    def __rsub__(self, other):
        return sub(_coerce(other, self), self)

    def __mul__(self, other):
        return mul(self, _coerce(other, self))

    def __rmul__(self, other):
        return mul(_coerce(other, self), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _coerce(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.data.dtype))


def _record(op: str, inputs: Sequence[Tensor], out_data: np.ndarray,
            backward_fn: Callable[[np.ndarray], tuple]) -> Tensor:
    _check_finite(op, out_data)
    needs = _TAPE.enabled and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(np.ascontiguousarray(out_data), needs)
    if needs:
        _TAPE.records.append(TapeRecord(op, tuple(inputs), out, backward_fn))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape))
                 if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_check(op: str, a: Tensor, b: Tensor):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as e:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} "
                         f"do not broadcast") from e


# ---------------------------------------------------------------------------
# Elementwise primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check("add", a, b)
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record("add", (a, b), out, bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check("sub", a, b)
    out = a.data - b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record("sub", (a, b), out, bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check("mul", a, b)
    out = a.data * b.data
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return _record("mul", (a, b), out, bw)


def neg(x: Tensor) -> Tensor:
    return _record("neg", (x,), -x.data, lambda g: (-g,))


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # inf is caught by the finiteness check
        out = np.exp(x.data)

    def bw(g):
        return (g * out,)

    return _record("exp", (x,), out, bw)


def absolute(x: Tensor) -> Tensor:
    # Subgradient 0 at exactly 0.
    sign = np.sign(x.data)

    def bw(g):
        return (g * sign,)

    return _record("abs", (x,), np.abs(x.data), bw)


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    out[~pos] = ex / (1.0 + ex)

    def bw(g):
        return (g * out * (1.0 - out),)

    return _record("sigmoid", (x,), out, bw)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bw(g):
        return (g * mask,)

    return _record("relu", (x,), np.where(mask, x.data, 0.0), bw)


def tensor_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)
    shape = x.shape

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, shape).copy(),)

    return _record("sum", (x,), np.asarray(out), bw)


def tensor_max(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    """Max along one axis; gradient routes to the first maximal element."""
    if x.shape[axis] < 1:
        raise ShapeError("max: empty axis")
    idx = np.argmax(x.data, axis=axis)
    out = np.max(x.data, axis=axis, keepdims=keepdims)
    shape = x.shape

    def bw(g):
        gg = g if keepdims else np.expand_dims(g, axis)
        dx = np.zeros(shape, dtype=g.dtype)
        np.put_along_axis(dx, np.expand_dims(idx, axis), gg, axis)
        return (dx,)

    return _record("max", (x,), out, bw)


# ---------------------------------------------------------------------------
# Structural primitives


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape, dtype=np.int64)) != x.size and -1 not in shape:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")
    old = x.shape
    out = x.data.reshape(shape)

    def bw(g):
        return (g.reshape(old),)

    return _record("reshape", (x,), out, bw)


def permute(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"permute: {axes} is not a permutation of {x.ndim} axes")
    inv = np.argsort(axes)

    def bw(g):
        return (np.transpose(g, inv),)

    return _record("permute", (x,), np.transpose(x.data, axes), bw)


def broadcast_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError as e:
        raise ShapeError(f"broadcast_to: {x.shape} -> {shape}") from e
    xshape = x.shape

    def bw(g):
        return (_unbroadcast(g, xshape),)

    return _record("broadcast", (x,), np.ascontiguousarray(out), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise UsageError("concat: need at least one tensor")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _record("concat", tensors, out, bw)


def gather_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """Select rows of `x` (axis 0) by an integer index array.

    Backward scatter-adds, so repeated indices accumulate correctly.
    """
    index = np.asarray(index)
    if index.ndim != 1 or not np.issubdtype(index.dtype, np.integer):
        raise UsageError("gather_rows: index must be a 1-D integer array")
    if index.size and (index.min() < 0 or index.max() >= x.shape[0]):
        raise UsageError("gather_rows: index out of range")
    shape = x.shape

    def bw(g):
        dx = np.zeros(shape, dtype=g.dtype)
        np.add.at(dx, index, g)
        return (dx,)

    return _record("gather_rows", (x,), x.data[index], bw)


# ---------------------------------------------------------------------------
# Linear-algebra primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product with gradients da = g @ b^T, db = a^T @ g."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul: expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        return g @ bd.T, ad.T @ g

    return _record("matmul", (a, b), ad @ bd, bw)


def softmax_lastdim(x: Tensor) -> Tensor:
    """Numerically stabilized softmax over the last axis."""
    if x.shape[-1] < 1:
        raise ShapeError("softmax: empty last axis")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return ((g - dot) * out,)

    return _record("softmax", (x,), out, bw)


def _conv_geometry(h: int, w: int, kh: int, kw: int, stride: int, padding: int):
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel dims must be odd, got {kh}x{kw}")
    if stride < 1 or padding < 0:
        raise UsageError("conv2d: stride >= 1 and padding >= 0 required")
    num_h = h + 2 * padding - kh
    num_w = w + 2 * padding - kw
    if num_h < 0 or num_w < 0 or num_h % stride or num_w % stride:
        raise ShapeError(
            f"conv2d: non-integral output for input {h}x{w}, kernel {kh}x{kw}, "
            f"stride {stride}, padding {padding}")
    return num_h // stride + 1, num_w // stride + 1


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of a CxHxW input with a (Cout,Cin,kh,kw) kernel.

    Implemented as im2col + matmul; the direct 6-loop form is kept as a
    test oracle, not here.
    """
    if x.ndim != 3 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected CxHxW and OxCxKhxKw, got {x.shape}, {w.shape}")
    cin, h, wid = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d: input channels {cin} != kernel channels {cin_w}")
    ho, wo = _conv_geometry(h, wid, kh, kw, stride, padding)

    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding)))
    col = np.empty((cin, kh, kw, ho, wo), dtype=x.data.dtype)
    for ki in range(kh):
        for kj in range(kw):
            col[:, ki, kj] = xp[:, ki:ki + stride * ho:stride,
                                kj:kj + stride * wo:stride]
    col2 = col.reshape(cin * kh * kw, ho * wo)
    wmat = w.data.reshape(cout, cin * kh * kw)
    out = (wmat @ col2).reshape(cout, ho, wo)

    xshape, pad = x.shape, padding

    def bw(g):
        gm = g.reshape(cout, ho * wo)
        dw = (gm @ col2.T).reshape(w.shape)
        dcol = (wmat.T @ gm).reshape(cin, kh, kw, ho, wo)
        dxp = np.zeros((cin, h + 2 * pad, wid + 2 * pad), dtype=g.dtype)
        for ki in range(kh):
            for kj in range(kw):
                dxp[:, ki:ki + stride * ho:stride,
                    kj:kj + stride * wo:stride] += dcol[:, ki, kj]
        dx = dxp[:, pad:pad + h, pad:pad + wid] if pad else dxp
        return np.ascontiguousarray(dx), dw

    return _record("conv2d", (x, w), out, bw)


def _resize_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    """(n_out, n_in) interpolation weights, align_corners=False, clamped."""
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    i0 = np.minimum(np.floor(src).astype(np.int64), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    mat = np.zeros((n_out, n_in), dtype=dtype)
    rows = np.arange(n_out)
    np.add.at(mat, (rows, i0), 1.0 - frac)
    np.add.at(mat, (rows, i1), frac)
    return mat


def bilinear_resize(x: Tensor, h2: int, w2: int) -> Tensor:
    """Bilinear resample of a CxHxW tensor to Cxh2xw2 (align_corners=False).

    The interpolation is separable, so it runs as two small matrix products
    per channel; the backward pass is the transposed pair.
    """
    if x.ndim != 3:
        raise ShapeError(f"bilinear_resize: expected CxHxW, got {x.shape}")
    if h2 < 1 or w2 < 1:
        raise UsageError("bilinear_resize: target dims must be >= 1")
    c, h, w = x.shape
    rmat = _resize_matrix(h, h2, x.data.dtype)     # (h2, h)
    cmat = _resize_matrix(w, w2, x.data.dtype)     # (w2, w)
    out = np.matmul(np.matmul(rmat, x.data), cmat.T)

    def bw(g):
        return (np.matmul(np.matmul(rmat.T, g), cmat),)

    return _record("bilinear_resize", (x,), out, bw)


# ---------------------------------------------------------------------------
# Backward pass


def backward(loss: Tensor, clear: bool = True):
    """Reverse-accumulate d(loss)/d(leaf) into every requires_grad leaf.

    The loss must be a scalar produced on the active tape.  With
    ``clear=True`` (default) the tape and all intermediate gradients are
    dropped afterwards; leaf gradients are kept.
    """
    if loss.size != 1:
        raise UsageError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise UsageError("backward: loss does not depend on any tracked tensor")
    loss.grad = np.ones_like(loss.data)
    records = _TAPE.records
    for rec in reversed(records):
        g = rec.output.grad
        if g is None:
            continue
        grads = rec.backward_fn(g)
        for t, gt in zip(rec.inputs, grads):
            if gt is None or not t.requires_grad:
                continue
            if gt.shape != t.shape:
                raise ShapeError(
                    f"{rec.op}: backward produced grad {gt.shape} for input {t.shape}")
            if t.grad is None:
                t.grad = gt.astype(t.data.dtype, copy=True)
            else:
                t.grad += gt.astype(t.data.dtype, copy=False)
    if clear:
        outputs = {id(rec.output): rec.output for rec in records}
        for out in outputs.values():
            out.grad = None
        _TAPE.clear()


# ---------------------------------------------------------------------------
# Finite-difference gradient audit


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_err: float
    tol: float
    checked: int
    failures: list = field(default_factory=list)  # (tensor_idx, flat_idx, err)
    note: str = ""

    def __str__(self):
        state = "PASS" if self.passed else "FAIL"
        msg = (f"gradcheck {state}: max_rel_err={self.max_rel_err:.3e} "
               f"tol={self.tol:.1e} coords={self.checked}")
        if self.note:
            msg += f" ({self.note})"
        return msg


def finite_diff_gradcheck(f, xs, h: float = 1e-6, tol: float = 1e-4,
                          max_failures: int = 16) -> GradCheckReport:
    """Audit reverse-mode gradients of ``f`` against central differences.

    ``f`` maps one or more Tensors to a scalar Tensor and must be evaluated
    in float64 (the headroom matters: central differences at h=1e-6 leave
    only ~1e-10 of slack).  The relative error per coordinate is
    |analytic - numeric| / max(1, |analytic|, |numeric|); the report passes
    iff the max over all coordinates is <= tol.

    A coordinate that disagrees at step h is re-probed at h/16 and h/256:
    a probe that happened to straddle a subgradient kink (relu, abs, max)
    recovers at a smaller step, while a genuinely wrong gradient rule keeps
    disagreeing at every step size.
    """
    if isinstance(xs, Tensor):
        xs = [xs]
    for t in xs:
        if t.data.dtype != np.float64:
            raise UsageError("gradcheck requires float64 inputs")
    xs = [Tensor(t.data, requires_grad=True, dtype=np.float64) for t in xs]

    with fresh_tape():
        y = f(*xs)
        if not isinstance(y, Tensor) or y.size != 1:
            raise UsageError("gradcheck: f must return a scalar Tensor")
        if not np.isfinite(y.data).all():
            return GradCheckReport(False, math.inf, tol, 0, note="non-finite f(x)")
        backward(y)
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in xs]

    max_err = 0.0
    checked = 0
    failures = []
    non_finite = False
    with no_grad():
        for ti, t in enumerate(xs):
            flat = t.data.reshape(-1)
            for k in range(flat.size):
                ana = float(analytic[ti].reshape(-1)[k])
                orig = flat[k]
                err = math.inf
                for step in (h, h / 16.0, h / 256.0):
                    flat[k] = orig + step
                    yp = f(*xs).item()
                    flat[k] = orig - step
                    ym = f(*xs).item()
                    flat[k] = orig
                    if not (math.isfinite(yp) and math.isfinite(ym)):
                        non_finite = True
                        break
                    num = (yp - ym) / (2.0 * step)
                    err = abs(ana - num) / max(1.0, abs(ana), abs(num))
                    if err <= tol:
                        break
                checked += 1
                if err > max_err:
                    max_err = err
                if err > tol and len(failures) < max_failures:
                    failures.append((ti, k, err))

    return GradCheckReport(max_err <= tol and not failures and not non_finite,
                           max_err, tol, checked, failures,
                           note="non-finite probe" if non_finite else "")
