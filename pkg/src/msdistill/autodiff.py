"""Minimal dense reverse-mode differentiation on top of numpy.

A :class:`Tape` records every primitive applied while it is active. Each
record keeps the inputs, the output and a closure mapping the output cotangent
to input cotangents. :func:`backward` walks the tape in reverse, which is a
valid topological order because records are appended as values are computed.

Broadcasting is deliberately narrow: binary elementwise ops accept equal
shapes, a scalar operand, or a row-vector bias matching the last axis. Any
other pairing must go through :func:`expand` so that every reduction in the
backward pass is explicit.
"""

from __future__ import annotations

import contextlib
import math
from types import MappingProxyType
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.linalg import solve_triangular

from .errors import ContractError, NotSPDError, ShapeError

_TAPES: list["Tape"] = []
_FAULTS: set[str] = set()

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


class Tensor:
    """Dense array plus the bookkeeping needed for reverse-mode gradients.

    Tensors hash by identity so they can key gradient maps; ``==`` is left as
    identity comparison too (no elementwise overloading).
    """

    __slots__ = ("data", "requires_grad", "name", "_is_leaf")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self._is_leaf = True

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
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._is_leaf

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{tag})"

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

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only defined by a python scalar")
        return scale(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


class _Record:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered log of primitive applications.

    Use as a context manager; nested tapes shadow outer ones.
    """

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _TAPES.pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self.records)


def active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


@contextlib.contextmanager
def no_record():
    """Temporarily evaluate without any tape (used for stop-gradient passes)."""
    saved = list(_TAPES)
    _TAPES.clear()
    try:
        yield
    finally:
        _TAPES.extend(saved)


@contextlib.contextmanager
def inject_fault(name: str):
    """Enable a named, deliberately wrong backward rule (negative controls only)."""
    _FAULTS.add(name)
    try:
        yield
    finally:
        _FAULTS.discard(name)


def _emit(data: np.ndarray, inputs: tuple[Tensor, ...], backward: Callable) -> Tensor:
    out = Tensor(data)
    tape = _TAPES[-1] if _TAPES else None
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._is_leaf = False
        tape.records.append(_Record(out, inputs, backward))
    return out


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def const(x, dtype=None) -> Tensor:
    return Tensor(x, requires_grad=False, dtype=dtype)


# ---------------------------------------------------------------------------
# elementwise binary ops
# ---------------------------------------------------------------------------


def _binary_kind(a: Tensor, b: Tensor) -> str:
    if a.shape == b.shape:
        return "same"
    if b.ndim == 0 or b.shape == (1,):
        return "b_scalar"
    if a.ndim == 0 or a.shape == (1,):
        return "a_scalar"
    if b.ndim == 1 and a.ndim >= 1 and b.shape[0] == a.shape[-1]:
        return "b_row"
    if a.ndim == 1 and b.ndim >= 1 and a.shape[0] == b.shape[-1]:
        return "a_row"
    raise ShapeError(f"incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0 or shape == (1,):
        return np.asarray(g.sum()).reshape(shape)
    # row vector
    return g.reshape(-1, shape[0]).sum(axis=0)


def add(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _binary_kind(a, b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _reduce_to(g, sa), _reduce_to(g, sb)

    return _emit(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _binary_kind(a, b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _reduce_to(g, sa), -_reduce_to(g, sb)

    return _emit(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _binary_kind(a, b)
    ad, bd = a.data, b.data
    sa, sb = a.shape, b.shape

    def backward(g):
        ga = _reduce_to(g * bd, sa) if a.requires_grad else None
        gb = _reduce_to(g * ad, sb) if b.requires_grad else None
        return ga, gb

    return _emit(ad * bd, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar constant."""
    c = float(c)

    def backward(g):
        return (g * np.asarray(c, dtype=g.dtype),)

    return _emit(a.data * np.asarray(c, dtype=a.dtype), (a,), backward)


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product.

    Supported layouts: ``(..., n, k) @ (..., k, m)`` with identical leading
    axes, and ``(..., k) @ (k, m)`` (a shared weight applied to every row).
    """
    a = as_tensor(a)
    b = as_tensor(b, a)
    if a.ndim < 1 or b.ndim < 2:
        raise ShapeError(f"matmul needs a matrix right operand, got {a.shape} @ {b.shape}")
    if b.ndim == 2:
        if a.shape[-1] != b.shape[0]:
            raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
        ad, bd = a.data, b.data
        k, m = bd.shape
        lead = a.shape[:-1]
        # one flat GEMM; numpy would otherwise loop over the leading axes
        a2 = ad.reshape(-1, k)

        def backward(g):
            g2 = g.reshape(-1, m)
            ga = (g2 @ bd.T).reshape(lead + (k,)) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return _emit((a2 @ bd).reshape(lead + (m,)), (a, b), backward)
    if a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"batched matmul shapes differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return _emit(ad @ bd, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` over the last axis of ``x`` as one primitive."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    k, m = weight.shape
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, k)
    w = weight.data
    out = x2 @ w
    if bias is not None:
        out += bias.data

    def backward(g):
        g2 = g.reshape(-1, m)
        gx = (g2 @ w.T).reshape(lead + (k,)) if x.requires_grad else None
        gw = x2.T @ g2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        gb = np.ones(g2.shape[0], dtype=g2.dtype) @ g2 if bias.requires_grad else None
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _emit(out.reshape(lead + (m,)), inputs, backward)


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    shape = a.shape
    kept = tuple(1 if i in axes else n for i, n in enumerate(shape))

    def backward(g):
        return (np.broadcast_to(g.reshape(kept), shape).copy(),)

    return _emit(a.data.sum(axis=axes, keepdims=keepdims), (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    return scale(sum_(a, axes, keepdims), 1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None

    def backward(g):
        return (g.reshape(old),)

    return _emit(out, (a,), backward)


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"invalid permutation {axes} for shape {a.shape}")
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inverse),)

    return _emit(np.transpose(a.data, axes), (a,), backward)


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def expand(a: Tensor, shape) -> Tensor:
    """Broadcast ``a`` over new leading axes; ``a.shape`` must be a suffix of ``shape``."""
    shape = tuple(shape)
    if a.ndim > len(shape) or shape[len(shape) - a.ndim:] != a.shape:
        raise ShapeError(f"cannot expand {a.shape} to {shape}")
    lead = tuple(range(len(shape) - a.ndim))

    def backward(g):
        return (g.sum(axis=lead),)

    return _emit(np.broadcast_to(a.data, shape).copy(), (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    if not tensors:
        raise ShapeError("concat of an empty sequence")
    nd = tensors[0].ndim
    axis = axis % nd
    for t in tensors[1:]:
        if t.ndim != nd or t.shape[:axis] + t.shape[axis + 1:] != tensors[0].shape[:axis] + tensors[0].shape[axis + 1:]:
            raise ShapeError(f"concat shapes differ off-axis: {[t.shape for t in tensors]}")
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        idx = [slice(None)] * g.ndim
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[axis] = slice(lo, hi)
            parts.append(g[tuple(idx)])
        return tuple(parts)

    return _emit(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def take(a: Tensor, start: int, stop: int, axis: int = 0) -> Tensor:
    """Contiguous slice ``[start, stop)`` along ``axis``."""
    axis = axis % a.ndim
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    shape, dtype = a.shape, a.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        full[idx] = g
        return (full,)

    return _emit(a.data[idx], (a,), backward)


def split(a: Tensor, sizes: Sequence[int], axis: int = 0) -> list[Tensor]:
    """Split along ``axis`` into consecutive pieces of the given sizes."""
    axis = axis % a.ndim
    if int(np.sum(sizes)) != a.shape[axis]:
        raise ShapeError(f"split sizes {list(sizes)} do not cover axis of length {a.shape[axis]}")
    out, lo = [], 0
    for n in sizes:
        out.append(take(a, lo, lo + n, axis))
        lo += n
    return out


# ---------------------------------------------------------------------------
# nonlinearities and normalizations
# ---------------------------------------------------------------------------


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)

    def backward(g):
        return (g * y,)

    return _emit(y, (a,), backward)


def log(a: Tensor) -> Tensor:
    x = a.data

    def backward(g):
        return (g / x,)

    return _emit(np.log(x), (a,), backward)


_CHUNK = 1 << 15  # elements per cache-resident block in fused elementwise kernels


def _row_blocks(n_rows: int, width: int):
    step = max(1, _CHUNK // max(width, 1))
    for lo in range(0, n_rows, step):
        yield slice(lo, min(lo + step, n_rows))


def gelu(a: Tensor) -> Tensor:
    """GELU in its tanh form, ``0.5 x (1 + tanh(c (x + 0.044715 x^3)))``.

    Evaluated in cache-sized row blocks with in-place updates; the tanh values
    are kept for the backward pass.
    """
    x = a.data.reshape(-1, a.shape[-1]) if a.ndim else a.data.reshape(1, 1)
    dtype = x.dtype
    c = dtype.type(_SQRT_2_OVER_PI)
    k = dtype.type(0.044715)
    y = np.empty_like(x)
    t = np.empty_like(x)
    for rows in _row_blocks(*x.shape):
        xb, tb = x[rows], t[rows]
        np.multiply(xb, xb, out=tb)
        tb *= k
        tb += 1
        tb *= xb
        tb *= c
        np.tanh(tb, out=tb)
        yb = y[rows]
        np.add(tb, 1, out=yb)
        yb *= xb
        yb *= 0.5

    def backward(g):
        g2 = g.reshape(x.shape)
        out = np.empty_like(x)
        for rows in _row_blocks(*x.shape):
            xb, tb, ob = x[rows], t[rows], out[rows]
            tmp = xb * xb
            tmp *= 3 * k
            tmp += 1
            tmp *= c
            tmp *= xb
            sq = tb * tb
            np.subtract(1, sq, out=sq)
            tmp *= sq
            tmp += tb
            tmp += 1
            tmp *= 0.5
            np.multiply(tmp, g2[rows], out=ob)
        return (out.reshape(a.shape),)

    return _emit(y.reshape(a.shape), (a,), backward)


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis.

    Rows are shifted by the maximum of their leading-axis slice rather than
    their own maximum (any per-row constant is exact); if a row underflows
    the per-row maximum is used instead. Row sums go through a matrix-vector
    product, which is much faster than a short-axis reduction.
    """
    x = a.data
    ones = np.ones(x.shape[-1], dtype=x.dtype)
    lead = x.reshape(x.shape[0], -1) if x.ndim > 1 else x.reshape(1, -1)
    shift = lead.max(axis=1).reshape((-1,) + (1,) * (x.ndim - 1))
    e = np.exp(x - shift)
    tot = e @ ones
    if not np.all(tot > 0):
        e = np.exp(x - x.max(axis=-1, keepdims=True))
        tot = e @ ones
    e /= tot[..., None]
    y = e

    def backward(g):
        gy = g * y
        return (gy - y * (gy @ ones)[..., None],)

    return _emit(y, (a,), backward)


def layer_norm(x: Tensor, weight: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Per-token normalization over the last axis with a learned affine map.

    Row reductions are matrix-vector products against a ones vector, which
    numpy runs far faster than a reduction over a short trailing axis.
    """
    d = x.shape[-1]
    if weight.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm affine shapes {weight.shape}, {bias.shape} do not match width {d}")
    x2 = x.data.reshape(-1, d)
    dtype = x2.dtype
    w, b = weight.data, bias.data
    ones = np.full(d, 1.0 / d, dtype=dtype)
    eps_t = dtype.type(eps)
    xhat = np.empty_like(x2)
    rstd = np.empty((x2.shape[0], 1), dtype=dtype)
    y = np.empty_like(x2)
    for rows in _row_blocks(*x2.shape):
        xb, hb, rb, yb = x2[rows], xhat[rows], rstd[rows], y[rows]
        mu = xb @ ones
        np.subtract(xb, mu[:, None], out=hb)
        np.multiply(hb, hb, out=yb)
        var = yb @ ones
        var += eps_t
        np.sqrt(var, out=var)
        np.divide(1, var[:, None], out=rb)
        hb *= rb
        np.multiply(hb, w, out=yb)
        yb += b

    def backward(g):
        g2 = g.reshape(-1, d)
        gx = gw = gb = None
        need_w = weight.requires_grad
        if need_w:
            gw = np.zeros(d, dtype=dtype)
        for rows in _row_blocks(*x2.shape):
            hb, gb_ = xhat[rows], g2[rows]
            gh = gb_ * w
            if x.requires_grad:
                if gx is None:
                    gx = np.empty_like(x2)
                ob = gx[rows]
                m1 = gh @ ones
                np.multiply(gh, hb, out=ob)
                m2 = ob @ ones
                np.multiply(hb, m2[:, None], out=ob)
                np.subtract(gh, ob, out=ob)
                ob -= m1[:, None]
                ob *= rstd[rows]
            if need_w:
                np.multiply(gb_, hb, out=gh)
                gw += np.ones(gh.shape[0], dtype=dtype) @ gh
        if gx is not None:
            gx = gx.reshape(x.shape)
        if bias.requires_grad:
            gb = np.ones(g2.shape[0], dtype=dtype) @ g2
        return gx, gw, gb

    return _emit(y.reshape(x.shape), (x, weight, bias), backward)


def l2_normalize(a: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each vector along the last axis to unit Euclidean norm."""
    x = a.data
    norm = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    denom = np.maximum(norm, np.asarray(eps, dtype=x.dtype))
    y = x / denom

    def backward(g):
        proj = (g * y).sum(axis=-1, keepdims=True)
        live = norm > eps
        return (np.where(live, (g - y * proj) / denom, g / denom),)

    return _emit(y, (a,), backward)


# ---------------------------------------------------------------------------
# log-determinant through a Cholesky factor
# ---------------------------------------------------------------------------


def cholesky_lower(a: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor by the column-oriented recurrence.

    Raises :class:`NotSPDError` with the index of the first non-positive pivot.
    """
    a = np.asarray(a, dtype=np.float64)
    n = a.shape[0]
    low = np.zeros_like(a)
    for j in range(n):
        row = low[j, :j]
        pivot = a[j, j] - row @ row
        if not pivot > 0.0:
            raise NotSPDError(j, float(pivot))
        d = math.sqrt(pivot)
        low[j, j] = d
        if j + 1 < n:
            low[j + 1:, j] = (a[j + 1:, j] - low[j + 1:, :j] @ row) / d
    return low


def spd_logdet_cholesky(a: Tensor) -> Tensor:
    """``log det(A) = 2 * sum(log(diag(L)))`` with ``L L^T = (A + A^T) / 2``.

    The backward rule is ``dlogdet/dA = A^{-1}`` of the symmetrized matrix.
    Factorization runs in float64 regardless of the input dtype.
    """
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"logdet needs a square matrix, got {a.shape}")
    sym = 0.5 * (a.data.astype(np.float64) + a.data.T.astype(np.float64))
    low = cholesky_lower(sym)
    value = 2.0 * np.log(np.diag(low)).sum()
    dtype = a.dtype

    def backward(g):
        linv = solve_triangular(low, np.eye(low.shape[0]), lower=True)
        inv = linv.T @ linv
        if "cholesky_backward" in _FAULTS:
            inv = np.tril(inv)
        return ((float(g) * inv).astype(dtype),)

    return _emit(np.asarray(value, dtype=dtype), (a,), backward)


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------


def backward(tape: Tape, loss: Tensor, wrt: Iterable[Tensor] | None = None) -> Mapping[Tensor, np.ndarray]:
    """Reverse sweep over ``tape`` from a scalar ``loss``.

    Returns a read-only map from every ``requires_grad`` leaf reached by the
    sweep to its gradient. Leaves listed in ``wrt`` but not on any path from
    the loss are mapped to zeros.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    if loss.requires_grad and loss.is_leaf:
        leaves[id(loss)] = loss
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.out), None)
        if g is None:
            continue
        for t, gi in zip(rec.inputs, rec.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            prev = grads.get(key)
            grads[key] = gi if prev is None else prev + gi
            if t.is_leaf:
                leaves[key] = t
    out = {t: grads[key] for key, t in leaves.items()}
    if wrt is not None:
        for t in wrt:
            if t not in out:
                out[t] = np.zeros_like(t.data)
    return MappingProxyType(out)


def grad(fn: Callable[[], Tensor], params: Sequence[Tensor]) -> tuple[float, list[np.ndarray]]:
    """Evaluate ``fn`` under a fresh tape and return (value, gradients in ``params`` order)."""
    with Tape() as tape:
        loss = fn()
    gmap = backward(tape, loss, wrt=params)
    return loss.item(), [gmap[p] for p in params]


def finite_diff_check(
    fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
    floor: float = 1e-6,
    stencil: int = 2,
) -> float:
    """Max relative error between backward gradients and central differences.

    ``fn`` must rebuild its value from the current ``params[i].data`` on every
    call; coordinates are perturbed in place and restored. The relative error
    of a coordinate is ``|a - n| / max(|a|, |n|, floor)``; the floor keeps
    exactly-zero gradients (softmax shift invariance, say) from turning
    rounding noise into unit relative error. With
    ``max_coords`` set, at most that many coordinates per parameter are
    sampled (without replacement) using ``rng``. ``stencil=4`` switches to
    the fourth-order five-point rule, which tolerates a wider step.
    """
    if stencil not in (2, 4):
        raise ValueError("stencil must be 2 or 4")
    _, analytic = grad(fn, params)
    rng = rng if rng is not None else np.random.default_rng(0)
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        ga_flat = ga.reshape(-1)
        for i in coords:
            orig = flat[i]

            def at(delta):
                flat[i] = orig + delta
                return fn().item()

            if stencil == 2:
                num = (at(h) - at(-h)) / (2.0 * h)
            else:
                num = (8.0 * (at(h) - at(-h)) - (at(2 * h) - at(-2 * h))) / (12.0 * h)
            flat[i] = orig
            ana = float(ga_flat[i])
            err = abs(ana - num) / max(abs(ana), abs(num), floor)
            worst = max(worst, err)
    return worst


sum = sum_  # noqa: A001  (public alias mirrors numpy naming)
