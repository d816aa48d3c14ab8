"""Dense 2-D tensor arithmetic with reverse-mode differentiation.

Everything learnable in the package runs through this module: a small
tape-based autodiff over row-major 2-D numpy arrays. Batching is row
stacking; scalars are 1x1 tensors. Two precision modes exist: float32
(training default) and float64 (gradient checks and oracles), switched
with `using_dtype`.

Reductions over sets whose order must not matter (column sums used by
pooling and slice aggregation) are computed over column-sorted copies so
that permuting rows produces bit-identical results in either precision.
"""

from __future__ import annotations

import contextlib
import math
import zlib

import numpy as np
from scipy.special import erf

from .errors import (
    EmptyInputError,
    InvalidArgumentError,
    NumericError,
    ShapeError,
)

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise InvalidArgumentError(f"unsupported dtype {dtype!r}")
    _DEFAULT_DTYPE = dtype


def default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def using_dtype(dtype):
    """Temporarily switch the dtype used for newly created tensors."""
    global _DEFAULT_DTYPE
    prev = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _DEFAULT_DTYPE = prev


@contextlib.contextmanager
def no_grad():
    """Disable graph construction (used by finite differences and eval)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """A 2-D array plus an optional gradient accumulator and tape node."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None, _parents=(), _backward=None):
        if isinstance(data, Tensor):
            raise InvalidArgumentError("wrap raw arrays, not tensors")
        arr = np.asarray(data)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ShapeError(f"tensors are 2-D, got shape {arr.shape}")
        if dtype is not None:
            arr = arr.astype(dtype)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        """Reverse sweep from a 1x1 tensor, accumulating into `.grad`."""
        if self.data.size != 1:
            raise ShapeError("backward() starts from a scalar (1x1) tensor")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    # Operator sugar; mixing with python floats treats them as constants.
    def __add__(self, other):
        return add(self, _coerce(other, self.dtype))

    def __radd__(self, other):
        return add(_coerce(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _coerce(other, self.dtype))

    def __rsub__(self, other):
        return sub(_coerce(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _coerce(other, self.dtype))

    def __rmul__(self, other):
        return mul(_coerce(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, _coerce(other, self.dtype))

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, grad={self.requires_grad})"


def _coerce(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _fast_tensor(data: np.ndarray) -> Tensor:
    """Wrap an op output known to be a 2-D float array; skips validation."""
    t = object.__new__(Tensor)
    t.data = data
    t.requires_grad = False
    t.grad = None
    t._parents = ()
    t._backward = None
    return t


def _node(data, parents, backward) -> Tensor:
    t = _fast_tensor(data)
    if _GRAD_ENABLED:
        for p in parents:
            if p.requires_grad:
                t.requires_grad = True
                t._parents = tuple(parents)
                t._backward = backward
                break
    return t


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum `g` back down to `shape` after numpy broadcasting."""
    if g.shape == shape:
        return g
    out = g
    if shape[0] == 1 and g.shape[0] != 1:
        out = out.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        out = out.sum(axis=1, keepdims=True)
    return out


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    for da, db in zip(a.data.shape, b.data.shape):
        if da != db and da != 1 and db != 1:
            raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} do not broadcast")


# ---------------------------------------------------------------------------
# Elementwise and linear-algebra primitives
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _node(out_data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    out_data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _node(out_data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _node(out_data, (a, b), backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "div")
    out_data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _node(out_data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    def backward(g):
        a._accumulate(-g)

    return _node(-a.data, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: inner dims differ, {a.data.shape} @ {b.data.shape}")
    out_data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _node(out_data, (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    def backward(g):
        a._accumulate(g.T)

    return _node(a.data.T.copy(), (a,), backward)


def sum_all(a: Tensor) -> Tensor:
    out_data = np.array([[a.data.sum()]], dtype=a.dtype)

    def backward(g):
        a._accumulate(np.full_like(a.data, g[0, 0]))

    return _node(out_data, (a,), backward)


def abs_(a: Tensor) -> Tensor:
    out_data = np.abs(a.data)

    def backward(g):
        a._accumulate(g * np.sign(a.data))

    return _node(out_data, (a,), backward)


# ---------------------------------------------------------------------------
# Nonlinearities
# ---------------------------------------------------------------------------


def relu(a: Tensor) -> Tensor:
    out_data = np.maximum(a.data, 0)

    def backward(g):
        a._accumulate(g * (a.data > 0))

    return _node(out_data, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    e = np.exp(-np.abs(x))
    out_data = (np.where(x >= 0, 1.0, e) / (1.0 + e)).astype(x.dtype)

    def backward(g):
        a._accumulate(g * out_data * (1.0 - out_data))

    return _node(out_data, (a,), backward)


def gelu(a: Tensor) -> Tensor:
    """Exact gelu, 0.5 * x * (1 + erf(x / sqrt(2)))."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out_data = (x * cdf).astype(x.dtype)

    def backward(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
        a._accumulate(g * (cdf + x * pdf))

    return _node(out_data, (a,), backward)


def identity(a: Tensor) -> Tensor:
    return a


ACTIVATIONS = {"gelu": gelu, "relu": relu, "identity": identity, "sigmoid": sigmoid}


def row_softmax(a: Tensor) -> Tensor:
    """Numerically stable softmax over each row."""
    x = a.data
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        dot = (g * out_data).sum(axis=1, keepdims=True)
        a._accumulate(out_data * (g - dot))

    return _node(out_data, (a,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalization followed by a learned affine map."""
    d = x.shape[1]
    if d < 1:
        raise ShapeError("layer_norm needs at least one column")
    if gamma.shape != (1, d) or beta.shape != (1, d):
        raise ShapeError(f"layer_norm affine params must be 1x{d}")
    if eps <= 0:
        raise InvalidArgumentError("layer_norm eps must be positive")
    if not math.isfinite(float(x.data.sum())):
        raise NumericError("layer_norm input contains non-finite values")
    inv_d = 1.0 / d
    mu = x.data.sum(axis=1, keepdims=True) * inv_d
    centered = x.data - mu
    var = (centered * centered).sum(axis=1, keepdims=True) * inv_d
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out_data = gamma.data * xhat + beta.data

    def backward(g):
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=0, keepdims=True))
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=0, keepdims=True))
        if x.requires_grad:
            gh = g * gamma.data
            term1 = gh
            term2 = gh.mean(axis=1, keepdims=True)
            term3 = xhat * (gh * xhat).mean(axis=1, keepdims=True)
            x._accumulate(inv * (term1 - term2 - term3))

    return _node(out_data, (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# Order-canonical reductions
# ---------------------------------------------------------------------------


def _canonical_colsum(arr: np.ndarray) -> np.ndarray:
    """Column sums over a sorted copy: permuting rows cannot change bits."""
    if arr.shape[0] <= 1:
        return arr.sum(axis=0)
    return np.sort(arr, axis=0).sum(axis=0)


def mean_rows(a: Tensor) -> Tensor:
    """Mean over rows -> 1 x d, invariant to row order."""
    n = a.data.shape[0]
    if n == 0:
        raise EmptyInputError("mean over zero rows")
    out_data = (_canonical_colsum(a.data) / n).reshape(1, -1)

    def backward(g):
        a._accumulate(np.repeat(g / n, n, axis=0))

    return _node(out_data, (a,), backward)


def max_rows(a: Tensor) -> Tensor:
    """Max over rows -> 1 x d; gradient routes to the first maximum."""
    n = a.shape[0]
    if n == 0:
        raise EmptyInputError("max over zero rows")
    idx = a.data.argmax(axis=0)
    out_data = a.data[idx, np.arange(a.shape[1])].reshape(1, -1)

    def backward(g):
        gx = np.zeros_like(a.data)
        gx[idx, np.arange(a.shape[1])] = g[0]
        a._accumulate(gx)

    return _node(out_data, (a,), backward)


def concat_rows(tensors) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise EmptyInputError("concat of zero tensors")
    cols = tensors[0].shape[1]
    for t in tensors:
        if t.shape[1] != cols:
            raise ShapeError("concat_rows: column counts differ")
    out_data = np.concatenate([t.data for t in tensors], axis=0)
    splits = np.cumsum([t.shape[0] for t in tensors])[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=0)):
            if t.requires_grad:
                t._accumulate(piece)

    return _node(out_data, tuple(tensors), backward)


def concat_cols(tensors) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise EmptyInputError("concat of zero tensors")
    rows = tensors[0].data.shape[0]
    for t in tensors:
        if t.data.shape[0] != rows:
            raise ShapeError("concat_cols: row counts differ")
    out_data = np.concatenate([t.data for t in tensors], axis=1)
    splits = np.cumsum([t.data.shape[1] for t in tensors])[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=1)):
            if t.requires_grad:
                t._accumulate(piece)

    return _node(out_data, tuple(tensors), backward)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    if not (0 <= start < stop <= a.shape[1]):
        raise ShapeError(f"slice_cols [{start}:{stop}] out of range for {a.shape}")
    out_data = a.data[:, start:stop].copy()

    def backward(g):
        gx = np.zeros_like(a.data)
        gx[:, start:stop] = g
        a._accumulate(gx)

    return _node(out_data, (a,), backward)


class Segments:
    """Row-segment structure for segment_mean, precomputable per sample.

    Segment i covers rows [starts[i], starts[i] + counts[i]) of the packed
    matrix; segments tile the rows in order and may be empty.
    """

    __slots__ = ("starts", "counts", "n_out", "total", "nonempty", "ne_starts", "inv_counts")

    def __init__(self, starts, counts, n_out: int):
        self.starts = np.asarray(starts, dtype=np.int64)
        self.counts = np.asarray(counts, dtype=np.int64)
        self.n_out = int(n_out)
        if len(self.starts) != self.n_out or len(self.counts) != self.n_out:
            raise ShapeError("segment structure: starts/counts length must equal n_out")
        self.total = int(self.counts.sum())
        self.nonempty = np.nonzero(self.counts > 0)[0]
        self.ne_starts = self.starts[self.nonempty]
        self.inv_counts = 1.0 / self.counts[self.nonempty, None]


def segment_mean(x: Tensor, seg: Segments) -> Tensor:
    """Mean of consecutive row segments of `x`; empty segments yield zeros.

    Each segment is reduced independently, so results do not depend on
    where a segment sits in the packed matrix.
    """
    if seg.total != x.data.shape[0]:
        raise ShapeError("segment_mean: segments must cover all rows exactly")
    out_data = np.zeros((seg.n_out, x.data.shape[1]), dtype=x.dtype)
    if len(seg.nonempty) and seg.total:
        sums = np.add.reduceat(x.data, seg.ne_starts, axis=0)
        out_data[seg.nonempty] = sums * seg.inv_counts

    def backward(g):
        scaled = np.zeros_like(g)
        scaled[seg.nonempty] = g[seg.nonempty] * seg.inv_counts
        x._accumulate(np.repeat(scaled, seg.counts, axis=0))

    return _node(out_data, (x,), backward)


def slice_aggregate(w: Tensor, h: Tensor, eps: float = 1e-8) -> Tensor:
    """Weight-normalized aggregation of token rows into state rows.

    Z[k] = sum_i w[i,k] * h[i] / (sum_i w[i,k] + eps). The sums over tokens
    are computed over sorted copies so any row permutation of (w, h) gives
    bit-identical output.
    """
    if w.shape[0] != h.shape[0]:
        raise ShapeError(f"slice_aggregate: {w.shape} vs {h.shape} token counts differ")
    n, m = w.shape
    d = h.shape[1]
    prod = w.data[:, :, None] * h.data[:, None, :]
    num = np.sort(prod.reshape(n, m * d), axis=0).sum(axis=0).reshape(m, d)
    den = (_canonical_colsum(w.data) + eps).reshape(m, 1)
    out_data = (num / den).astype(h.dtype)

    def backward(g):
        g_num = g / den
        g_den = -(g * out_data / den).sum(axis=1, keepdims=True)
        if h.requires_grad:
            h._accumulate(w.data @ g_num)
        if w.requires_grad:
            w._accumulate(h.data @ g_num.T + g_den.T)

    return _node(out_data, (w, h), backward)


# ---------------------------------------------------------------------------
# Attention
# ---------------------------------------------------------------------------


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(Q K^T / sqrt(d_k)) V with row-stochastic weights."""
    d_k = q.data.shape[1]
    if d_k == 0:
        raise InvalidArgumentError("attention key width d_k must be >= 1")
    if k.data.shape[1] != d_k:
        raise ShapeError(f"attention: Q width {d_k} != K width {k.data.shape[1]}")
    if v.data.shape[0] != k.data.shape[0]:
        raise ShapeError(f"attention: K rows {k.data.shape[0]} != V rows {v.data.shape[0]}")
    inv_scale = 1.0 / math.sqrt(d_k)
    scores = (q.data @ k.data.T) * inv_scale
    shifted = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    weights = e / e.sum(axis=1, keepdims=True)
    out_data = weights @ v.data

    def backward(g):
        if v.requires_grad:
            v._accumulate(weights.T @ g)
        if q.requires_grad or k.requires_grad:
            d_weights = g @ v.data.T
            d_scores = weights * (d_weights - (d_weights * weights).sum(axis=1, keepdims=True))
            if q.requires_grad:
                q._accumulate((d_scores @ k.data) * inv_scale)
            if k.requires_grad:
                k._accumulate((d_scores.T @ q.data) * inv_scale)

    return _node(out_data, (q, k, v), backward)


def attention_weights(q: Tensor, k: Tensor) -> np.ndarray:
    """The row-stochastic weight matrix of scaled_dot_attention (no tape)."""
    scores = (q.data @ k.data.T) / math.sqrt(q.shape[1])
    shifted = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, heads: int = 1) -> Tensor:
    """Split columns into `heads` blocks, attend per block, re-concatenate."""
    if heads < 1:
        raise InvalidArgumentError("heads must be >= 1")
    if heads == 1:
        return scaled_dot_attention(q, k, v)
    d_k, d_v = q.shape[1], v.shape[1]
    if d_k % heads or d_v % heads or k.shape[1] != d_k:
        raise ShapeError(f"head count {heads} does not divide widths {d_k}/{d_v}")
    wk, wv = d_k // heads, d_v // heads
    outs = []
    for i in range(heads):
        outs.append(
            scaled_dot_attention(
                slice_cols(q, i * wk, (i + 1) * wk),
                slice_cols(k, i * wk, (i + 1) * wk),
                slice_cols(v, i * wv, (i + 1) * wv),
            )
        )
    return concat_cols(outs)


def mean_concat(a: Tensor, b: Tensor) -> Tensor:
    """[row-mean of a, row-mean of b] as one 1 x (da+db) row (order-canonical)."""
    na, nb = a.data.shape[0], b.data.shape[0]
    if na == 0 or nb == 0:
        raise EmptyInputError("mean over zero rows")
    out_data = np.concatenate(
        [_canonical_colsum(a.data) / na, _canonical_colsum(b.data) / nb]
    ).reshape(1, -1)

    def backward(g):
        da = a.data.shape[1]
        if a.requires_grad:
            a._accumulate(np.repeat(g[:, :da] / na, na, axis=0))
        if b.requires_grad:
            b._accumulate(np.repeat(g[:, da:] / nb, nb, axis=0))

    return _node(out_data, (a, b), backward)


def state_attention(h: Tensor, w_slice: Tensor, wq: Tensor, wk: Tensor, wv: Tensor, eps: float) -> Tensor:
    """Fused slice -> attend-over-states -> de-slice (single head).

    Equals deslice(w, Attn(Z Wq, Z Wk, Z Wv)) for (w, Z) = slice_project(h);
    kept as one tape node so the linear-cost path stays cheap. Token sums
    use order-canonical reduction.
    """
    if h.data.shape[1] != w_slice.data.shape[0]:
        raise ShapeError(f"slice projection expects width {w_slice.data.shape[0]}, got {h.data.shape[1]}")
    n, m = h.data.shape[0], w_slice.data.shape[1]
    d = h.data.shape[1]
    logits = h.data @ w_slice.data
    shifted = logits - logits.max(axis=1, keepdims=True)
    ew = np.exp(shifted)
    w = ew / ew.sum(axis=1, keepdims=True)
    prod = w[:, :, None] * h.data[:, None, :]
    num = np.sort(prod.reshape(n, m * d), axis=0).sum(axis=0).reshape(m, d)
    den = (_canonical_colsum(w) + eps).reshape(m, 1)
    z = num / den
    q, k, v = z @ wq.data, z @ wk.data, z @ wv.data
    inv_scale = 1.0 / math.sqrt(d)
    scores = (q @ k.T) * inv_scale
    ea = np.exp(scores - scores.max(axis=1, keepdims=True))
    attn = ea / ea.sum(axis=1, keepdims=True)
    attended = attn @ v
    out_data = w @ attended

    def backward(g):
        dw = g @ attended.T
        d_att = w.T @ g
        d_attn = d_att @ v.T
        dv = attn.T @ d_att
        d_scores = attn * (d_attn - (d_attn * attn).sum(axis=1, keepdims=True))
        dq = (d_scores @ k) * inv_scale
        dk = (d_scores.T @ q) * inv_scale
        if wq.requires_grad:
            wq._accumulate(z.T @ dq)
        if wk.requires_grad:
            wk._accumulate(z.T @ dk)
        if wv.requires_grad:
            wv._accumulate(z.T @ dv)
        dz = dq @ wq.data.T + dk @ wk.data.T + dv @ wv.data.T
        d_num = dz / den
        d_den = -(dz * z / den).sum(axis=1, keepdims=True)
        dh = w @ d_num
        dw += h.data @ d_num.T + d_den.T
        d_logits = w * (dw - (dw * w).sum(axis=1, keepdims=True))
        if w_slice.requires_grad:
            w_slice._accumulate(h.data.T @ d_logits)
        if h.requires_grad:
            h._accumulate(dh + d_logits @ w_slice.data.T)

    return _node(out_data, (h, w_slice, wq, wk, wv), backward)


def projected_cross_attention(h: Tensor, c: Tensor, wq: Tensor, wk: Tensor, wv: Tensor) -> Tensor:
    """Fused Attn(h Wq, c Wk, c Wv) over a short key/value sequence (single head)."""
    q = h.data @ wq.data
    k = c.data @ wk.data
    v = c.data @ wv.data
    d_k = q.shape[1]
    inv_scale = 1.0 / math.sqrt(d_k)
    scores = (q @ k.T) * inv_scale
    ea = np.exp(scores - scores.max(axis=1, keepdims=True))
    attn = ea / ea.sum(axis=1, keepdims=True)
    out_data = attn @ v

    def backward(g):
        dv = attn.T @ g
        d_attn = g @ v.T
        d_scores = attn * (d_attn - (d_attn * attn).sum(axis=1, keepdims=True))
        dq = (d_scores @ k) * inv_scale
        dk = (d_scores.T @ q) * inv_scale
        if wq.requires_grad:
            wq._accumulate(h.data.T @ dq)
        if wk.requires_grad:
            wk._accumulate(c.data.T @ dk)
        if wv.requires_grad:
            wv._accumulate(c.data.T @ dv)
        if h.requires_grad:
            h._accumulate(dq @ wq.data.T)
        if c.requires_grad:
            c._accumulate(dk @ wk.data.T + dv @ wv.data.T)

    return _node(out_data, (h, c, wq, wk, wv), backward)


def convex_mix(alpha: Tensor, a: Tensor, b: Tensor) -> Tensor:
    """(1 - alpha) * a + alpha * b with a scalar (1x1) gate."""
    if alpha.data.shape != (1, 1):
        raise ShapeError(f"mix gate must be 1x1, got {alpha.data.shape}")
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mix operands differ: {a.data.shape} vs {b.data.shape}")
    w = alpha.data[0, 0]
    out_data = (1.0 - w) * a.data + w * b.data

    def backward(g):
        if alpha.requires_grad:
            alpha._accumulate(np.array([[(g * (b.data - a.data)).sum()]], dtype=g.dtype))
        if a.requires_grad:
            a._accumulate((1.0 - w) * g)
        if b.requires_grad:
            b._accumulate(w * g)

    return _node(out_data, (alpha, a, b), backward)


# ---------------------------------------------------------------------------
# Parameters, MLPs, gradient checking
# ---------------------------------------------------------------------------


class ParamStore:
    """Named map of trainable tensors with deterministic iteration order."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, tensor: Tensor) -> Tensor:
        if name in self._params:
            raise InvalidArgumentError(f"duplicate parameter id {name!r}")
        tensor.requires_grad = True
        self._params[name] = tensor
        return tensor

    def create(self, name: str, shape, seed: int, init: str = "fan_in") -> Tensor:
        """Create and register a parameter; values depend only on (seed, name)."""
        rng = np.random.default_rng((seed, zlib.crc32(name.encode())))
        rows, cols = shape
        if init == "fan_in":
            bound = 1.0 / math.sqrt(max(rows, 1))
            data = rng.uniform(-bound, bound, size=(rows, cols))
        elif init == "zeros":
            data = np.zeros(shape)
        elif init == "ones":
            data = np.ones(shape)
        else:
            raise InvalidArgumentError(f"unknown init {init!r}")
        return self.add(name, Tensor(data.astype(default_dtype())))

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return sorted(self._params)

    def items(self):
        for name in self.names():
            yield name, self._params[name]

    def n_scalars(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def zero_grads(self) -> None:
        for t in self._params.values():
            t.grad = None

    def astype(self, dtype) -> "ParamStore":
        out = ParamStore()
        for name in self.names():
            out.add(name, Tensor(self._params[name].data.astype(dtype)))
        return out

    def copy_values_from(self, other: "ParamStore") -> None:
        for name, t in self.items():
            t.data = other[name].data.astype(t.dtype).reshape(t.shape)


class Mlp:
    """Stack of (weight, optional bias, activation) layers over row batches."""

    def __init__(self, layers):
        self.layers = list(layers)
        for w, b, act in self.layers:
            if act not in ACTIVATIONS:
                raise InvalidArgumentError(f"unknown activation {act!r}")
            if b is not None and b.shape != (1, w.shape[1]):
                raise ShapeError("bias shape must be 1 x out_width")

    @property
    def in_width(self) -> int:
        return self.layers[0][0].shape[0]

    @property
    def out_width(self) -> int:
        return self.layers[-1][0].shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        return mlp_forward(x, self.layers)


def linear_act(x: Tensor, w: Tensor, b, act: str) -> Tensor:
    """One fused MLP layer: activation(x @ w + b)."""
    if x.data.shape[1] != w.data.shape[0]:
        raise ShapeError(f"mlp layer expects width {w.data.shape[0]}, got {x.data.shape[1]}")
    z = x.data @ w.data
    if b is not None:
        z = z + b.data
    cdf = None
    if act == "identity":
        y = z
    elif act == "relu":
        y = np.maximum(z, 0)
    elif act == "sigmoid":
        e = np.exp(-np.abs(z))
        y = (np.where(z >= 0, 1.0, e) / (1.0 + e)).astype(z.dtype)
    elif act == "gelu":
        cdf = 0.5 * (1.0 + erf(z * _INV_SQRT2))
        y = z * cdf
    else:
        raise InvalidArgumentError(f"unknown activation {act!r}")

    def backward(g):
        if act == "identity":
            dz = g
        elif act == "relu":
            dz = g * (z > 0)
        elif act == "sigmoid":
            dz = g * y * (1.0 - y)
        else:
            dz = g * (cdf + z * (_INV_SQRT2PI * np.exp(-0.5 * z * z)))
        if x.requires_grad:
            x._accumulate(dz @ w.data.T)
        if w.requires_grad:
            w._accumulate(x.data.T @ dz)
        if b is not None and b.requires_grad:
            b._accumulate(dz.sum(axis=0, keepdims=True))

    parents = (x, w) if b is None else (x, w, b)
    return _node(y, parents, backward)


def mlp_forward(x: Tensor, layers) -> Tensor:
    out = x
    for w, b, act in layers:
        out = linear_act(out, w, b, act)
    return out


def gradcheck(f, params: ParamStore, h: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    `f` maps the store to a scalar Tensor. Runs in the store's own dtype;
    callers wanting the documented tolerances should pass float64 params.
    """
    params.zero_grads()
    loss = f(params)
    if not np.isfinite(loss.data).all():
        raise NumericError("gradcheck objective is not finite")
    loss.backward()
    analytic = {name: (np.zeros_like(t.data) if t.grad is None else t.grad.copy()) for name, t in params.items()}

    worst = 0.0
    with no_grad():
        for name, t in params.items():
            flat = t.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                up = f(params).item()
                flat[i] = orig - h
                down = f(params).item()
                flat[i] = orig
                if not (math.isfinite(up) and math.isfinite(down)):
                    raise NumericError(f"gradcheck: non-finite objective near {name}[{i}]")
                fd = (up - down) / (2.0 * h)
                ad = analytic[name].reshape(-1)[i]
                err = abs(ad - fd) / max(1.0, abs(fd))
                if err > worst:
                    worst = err
    return worst
