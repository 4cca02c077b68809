"""Minimal tensor substrate with reverse-mode gradient propagation.

Every differentiable operation used by the model lives here as a function
that builds a node in a dynamically constructed graph. Backward passes are
hand-written per op and validated against the central finite-difference
oracle (`finite_difference_grad`). Double precision is the default; single
precision arrays pass through untouched for benchmark use.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

NORM_EPS = 1e-5


def single_thread_blas():
    """Pin BLAS pools to one thread; multi-threaded BLAS loses on small gemms."""
    try:
        from threadpoolctl import threadpool_limits
        return threadpool_limits(limits=1)
    except ImportError:
        return contextlib.nullcontext()


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """Raised when a computation produces or receives non-finite values."""


def _as_array(data) -> np.ndarray:
    arr = np.asarray(data)
    if arr.dtype == np.float32:
        return arr
    return np.asarray(arr, dtype=np.float64)


class Tensor:
    """Dense n-d array with optional gradient accumulation."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def backward(self, grad: Optional[np.ndarray] = None):
        """Reverse-mode sweep from this node; grads accumulate into leaves."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(
                    f"backward() without explicit grad needs a scalar, got shape {self.data.shape}"
                )
            grad = np.ones_like(self.data)
        _accumulate(self, np.asarray(grad, dtype=self.data.dtype))

        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))

        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


class Parameter:
    """Named leaf tensor that always accumulates gradients."""

    __slots__ = ("name", "tensor")

    def __init__(self, name: str, data):
        self.name = name
        self.tensor = Tensor(data, requires_grad=True)

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def grad(self) -> Optional[np.ndarray]:
        return self.tensor.grad

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.tensor.shape})"


class ParameterStore:
    """Flat registry of uniquely named parameters."""

    def __init__(self):
        self._params: dict[str, Parameter] = {}

    def create(self, name: str, data) -> Parameter:
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name}")
        p = Parameter(name, data)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self):
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params.keys())

    def zero_grad(self):
        for p in self._params.values():
            p.tensor.grad = None


def _accumulate(t: Tensor, g: np.ndarray):
    if t.grad is None:
        t.grad = g
    else:
        t.grad = t.grad + g


def make_node(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    """Wrap an op result; backward receives the output grad array."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def check_finite(arr: np.ndarray, what: str = "value"):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite {what} encountered")


# ---------------------------------------------------------------------------
# elementwise / arithmetic

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data + b.data

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g, b.data.shape))

    return make_node(out, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data - b.data

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g, b.data.shape))

    return make_node(out, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data * b.data

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return make_node(out, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data / b.data

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return make_node(out, (a, b), bw)


def neg(a) -> Tensor:
    a = _wrap(a)

    def bw(g):
        _accumulate(a, -g)

    return make_node(-a.data, (a,), bw)


def square(a) -> Tensor:
    a = _wrap(a)

    def bw(g):
        _accumulate(a, g * (2.0 * a.data))

    return make_node(a.data * a.data, (a,), bw)


def exp(a) -> Tensor:
    a = _wrap(a)
    out = np.exp(a.data)

    def bw(g):
        _accumulate(a, g * out)

    return make_node(out, (a,), bw)


def log(a) -> Tensor:
    a = _wrap(a)

    def bw(g):
        _accumulate(a, g / a.data)

    return make_node(np.log(a.data), (a,), bw)


def sqrt(a) -> Tensor:
    a = _wrap(a)
    out = np.sqrt(a.data)

    def bw(g):
        _accumulate(a, g * (0.5 / out))

    return make_node(out, (a,), bw)


def tanh(a) -> Tensor:
    a = _wrap(a)
    out = np.tanh(a.data)

    def bw(g):
        _accumulate(a, g * (1.0 - out * out))

    return make_node(out, (a,), bw)


def sigmoid(a) -> Tensor:
    a = _wrap(a)
    out = 1.0 / (1.0 + np.exp(-a.data))

    def bw(g):
        _accumulate(a, g * out * (1.0 - out))

    return make_node(out, (a,), bw)


_kink_margins: Optional[list] = None


def track_kink_margins(sink: list):
    """Record each relu/leaky input's distance to its kink (for gradcheck probes)."""
    global _kink_margins
    _kink_margins = sink


def stop_kink_tracking():
    global _kink_margins
    _kink_margins = None


def relu(a) -> Tensor:
    a = _wrap(a)
    mask = a.data > 0
    if _kink_margins is not None and a.data.size:
        _kink_margins.append(float(np.min(np.abs(a.data))))

    def bw(g):
        _accumulate(a, g * mask)

    return make_node(np.where(mask, a.data, 0.0), (a,), bw)


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = _wrap(a)
    mask = a.data > 0
    if _kink_margins is not None and a.data.size:
        _kink_margins.append(float(np.min(np.abs(a.data))))

    def bw(g):
        _accumulate(a, g * np.where(mask, 1.0, slope))

    return make_node(np.where(mask, a.data, slope * a.data), (a,), bw)


# ---------------------------------------------------------------------------
# shape manipulation

def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    orig = a.data.shape

    def bw(g):
        _accumulate(a, g.reshape(orig))

    return make_node(a.data.reshape(shape), (a,), bw)


def transpose(a, axes=None) -> Tensor:
    a = _wrap(a)

    def bw(g):
        inv = None if axes is None else np.argsort(axes)
        _accumulate(a, np.transpose(g, inv))

    return make_node(np.transpose(a.data, axes), (a,), bw)


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [_wrap(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in ts]
    out = np.concatenate([t.data for t in ts], axis=axis)
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                _accumulate(t, g[tuple(idx)].copy())

    return make_node(out, tuple(ts), bw)


def channel_concat(tensors: Iterable) -> Tensor:
    """Concatenate [C, H, W] maps along the channel axis."""
    ts = [_wrap(t) for t in tensors]
    hw = ts[0].data.shape[1:]
    for t in ts[1:]:
        if t.data.shape[1:] != hw:
            raise ShapeError(
                f"channel_concat spatial mismatch: {ts[0].data.shape} vs {t.data.shape}"
            )
    return concat(ts, axis=0)


# ---------------------------------------------------------------------------
# reductions

def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    shape = a.data.shape

    def bw(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g, shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, shape).copy())

    return make_node(out, (a,), bw)


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    shape = a.data.shape
    n = a.data.size if axis is None else np.prod(
        [shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]
    )

    def bw(g):
        gg = g / n
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        _accumulate(a, np.broadcast_to(gg, shape).copy())

    return make_node(out, (a,), bw)


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul shapes incompatible: {a.data.shape} vs {b.data.shape}")
    out = a.data @ b.data

    def bw(g):
        if a.requires_grad:
            _accumulate(a, g @ b.data.T)
        if b.requires_grad:
            _accumulate(b, a.data.T @ g)

    return make_node(out, (a, b), bw)


# ---------------------------------------------------------------------------
# convolution

def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    """Channels-first column matrix [Cin*kh*kw, Ho*Wo], row order (cin, ky, kx)."""
    c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    cols = np.empty((c, kh * kw, ho * wo), dtype=x.dtype)
    for ky in range(kh):
        for kx in range(kw):
            tile = x[:, ky:ky + (ho - 1) * stride + 1:stride,
                     kx:kx + (wo - 1) * stride + 1:stride]
            cols[:, ky * kw + kx, :] = tile.reshape(c, ho * wo)
    return cols.reshape(c * kh * kw, ho * wo), ho, wo


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d convolution on [Cin, H, W] with kernel [Cout, Cin, kh, kw]."""
    x, w = _wrap(x), _wrap(w)
    bt = _wrap(b) if b is not None else None
    cout, cin, kh, kw = w.data.shape
    if x.data.ndim != 3 or x.data.shape[0] != cin:
        raise ShapeError(f"conv2d input/kernel mismatch: {x.data.shape} vs {w.data.shape}")
    c, h, wdt = x.data.shape

    if kh == 1 and kw == 1 and stride == 1 and padding == 0:
        return _conv1x1(x, w, bt, cout, cin, h, wdt)

    cols, ho, wo = _im2col(x.data, kh, kw, stride, padding)
    wmat = w.data.reshape(cout, cin * kh * kw)
    out2d = wmat @ cols
    if bt is not None:
        out2d = out2d + bt.data[:, None]
    out = out2d.reshape(cout, ho, wo)

    def bw(g):
        g2d = g.reshape(cout, ho * wo)
        if w.requires_grad:
            _accumulate(w, (g2d @ cols.T).reshape(w.data.shape))
        if bt is not None and bt.requires_grad:
            _accumulate(bt, g2d.sum(axis=1))
        if x.requires_grad:
            if stride == 1 and cin <= cout:
                # per-tap products in one gemm, folded back by shifted adds
                wtap = w.data.transpose(1, 2, 3, 0).reshape(cin * kh * kw, cout)
                taps = (wtap @ g2d).reshape(cin, kh, kw, ho, wo)
                dx = np.zeros((cin, h, wdt), dtype=g.dtype)
                for ky in range(kh):
                    ylo = max(0, ky - padding)
                    yhi = min(h, ho + ky - padding)
                    for kx in range(kw):
                        xlo = max(0, kx - padding)
                        xhi = min(wdt, wo + kx - padding)
                        dx[:, ylo:yhi, xlo:xhi] += taps[
                            :, ky, kx,
                            ylo - ky + padding:yhi - ky + padding,
                            xlo - kx + padding:xhi - kx + padding,
                        ]
            else:
                # transposed conv: zero-stuff grad by stride, correlate with the
                # flipped kernel; extra right/bottom padding absorbs the strip
                # a non-unit stride leaves uncovered
                lh = (ho - 1) * stride + 1
                lw = (wo - 1) * stride + 1
                top = kh - 1 - padding
                left = kw - 1 - padding
                bot = h + padding - lh
                right = wdt + padding - lw
                gup = np.zeros((cout, top + lh + bot, left + lw + right), dtype=g.dtype)
                gup[:, top:top + lh:stride, left:left + lw:stride] = g
                wflip = w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
                gcols, gh, gw = _im2col(gup, kh, kw, 1, 0)
                dx = (wflip.reshape(cin, cout * kh * kw) @ gcols).reshape(cin, gh, gw)
            _accumulate(x, dx)

    parents = (x, w) if bt is None else (x, w, bt)
    return make_node(out, parents, bw)


def _conv1x1(x: Tensor, w: Tensor, bt: Optional[Tensor], cout, cin, h, wdt) -> Tensor:
    xflat = x.data.reshape(cin, h * wdt)
    wmat = w.data.reshape(cout, cin)
    out2d = wmat @ xflat
    if bt is not None:
        out2d = out2d + bt.data[:, None]

    def bw(g):
        g2d = g.reshape(cout, h * wdt)
        if w.requires_grad:
            _accumulate(w, (g2d @ xflat.T).reshape(w.data.shape))
        if bt is not None and bt.requires_grad:
            _accumulate(bt, g2d.sum(axis=1))
        if x.requires_grad:
            _accumulate(x, (wmat.T @ g2d).reshape(cin, h, wdt))

    parents = (x, w) if bt is None else (x, w, bt)
    return make_node(out2d.reshape(cout, h, wdt), parents, bw)


# ---------------------------------------------------------------------------
# normalization

def instance_norm(x) -> Tensor:
    """Per-channel spatial standardization of [C, H, W] (population variance)."""
    x = _wrap(x)
    c, h, w = x.data.shape
    if h * w < 2:
        raise ShapeError(f"instance_norm needs >=2 spatial points, got {x.data.shape}")
    mean = x.data.mean(axis=(1, 2), keepdims=True)
    var = x.data.var(axis=(1, 2), keepdims=True)
    inv = 1.0 / np.sqrt(var + NORM_EPS)
    xhat = (x.data - mean) * inv

    def bw(g):
        gm = g.mean(axis=(1, 2), keepdims=True)
        gx = (g * xhat).mean(axis=(1, 2), keepdims=True)
        _accumulate(x, inv * (g - gm - xhat * gx))

    return make_node(xhat, (x,), bw)


def layer_norm(x, gain, bias) -> Tensor:
    """Normalize the channel vector at each spatial position, then affine."""
    x, gain, bias = _wrap(x), _wrap(gain), _wrap(bias)
    c = x.data.shape[0]
    mean = x.data.mean(axis=0, keepdims=True)
    var = x.data.var(axis=0, keepdims=True)
    inv = 1.0 / np.sqrt(var + NORM_EPS)
    xhat = (x.data - mean) * inv
    gcol = gain.data.reshape(c, 1, 1)
    out = xhat * gcol + bias.data.reshape(c, 1, 1)

    def bw(g):
        if gain.requires_grad:
            _accumulate(gain, (g * xhat).sum(axis=(1, 2)))
        if bias.requires_grad:
            _accumulate(bias, g.sum(axis=(1, 2)))
        if x.requires_grad:
            gg = g * gcol
            gm = gg.mean(axis=0, keepdims=True)
            gx = (gg * xhat).mean(axis=0, keepdims=True)
            _accumulate(x, inv * (gg - gm - xhat * gx))

    return make_node(out, (x, gain, bias), bw)


# ---------------------------------------------------------------------------
# softmax

def softmax_rows(logits, mask: Optional[np.ndarray] = None, return_degenerate: bool = False):
    """Row softmax with max-subtraction; masked entries are exactly zero.

    A fully masked row yields all zeros and is flagged degenerate.
    """
    t = _wrap(logits)
    z = t.data
    if z.ndim != 2 or z.shape[1] < 1:
        raise ShapeError(f"softmax_rows expects [rows, cols>=1], got {z.shape}")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != z.shape:
            raise ShapeError(f"softmax mask shape {mask.shape} vs logits {z.shape}")
        neg = np.where(mask, z, -np.inf)
        rowmax = np.max(neg, axis=1, keepdims=True)
        degenerate = ~mask.any(axis=1)
        rowmax = np.where(np.isfinite(rowmax), rowmax, 0.0)
        e = np.exp(neg - rowmax)
        e = np.where(mask, e, 0.0)
    else:
        degenerate = np.zeros(z.shape[0], dtype=bool)
        rowmax = z.max(axis=1, keepdims=True)
        e = np.exp(z - rowmax)
    denom = e.sum(axis=1, keepdims=True)
    safe = np.where(denom > 0, denom, 1.0)
    a = e / safe

    def bw(g):
        dot = (g * a).sum(axis=1, keepdims=True)
        _accumulate(t, a * (g - dot))

    out = make_node(a, (t,), bw)
    if return_degenerate:
        return out, degenerate
    return out


# ---------------------------------------------------------------------------
# bilinear resize (align-corners)

def _resize_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    m = np.zeros((n_out, n_in), dtype=dtype)
    if n_out == 1 or n_in == 1:
        m[:, 0] = 1.0
        return m
    scale = (n_in - 1) / (n_out - 1)
    pos = np.arange(n_out) * scale
    lo = np.floor(pos).astype(int)
    lo = np.minimum(lo, n_in - 2)
    frac = pos - lo
    m[np.arange(n_out), lo] = 1.0 - frac
    m[np.arange(n_out), lo + 1] = frac
    return m


def bilinear_resize(x, new_h: int, new_w: int) -> Tensor:
    """Align-corners bilinear resize of [C, H, W]; corners are preserved exactly."""
    x = _wrap(x)
    c, h, w = x.data.shape
    if (h, w) == (new_h, new_w):
        def bw_id(g):
            _accumulate(x, g)
        return make_node(x.data, (x,), bw_id)
    rr = _resize_matrix(h, new_h, x.data.dtype)
    rc = _resize_matrix(w, new_w, x.data.dtype)
    # separable resize: rows then columns, as batched matmuls
    out = np.matmul(rr[None], np.matmul(x.data, rc.T))

    def bw(g):
        _accumulate(x, np.matmul(rr.T[None], np.matmul(g, rc)))

    return make_node(out, (x,), bw)


# ---------------------------------------------------------------------------
# sparse gather primitives (per-query candidate slots)

def _scatter_rows(idx: np.ndarray, vals: np.ndarray, n_rows: int) -> np.ndarray:
    """Sum vals[q, s, :] into rows idx[q, s] of an [n_rows, d] array."""
    d = vals.shape[-1]
    flat_idx = (idx[..., None] * d + np.arange(d)).ravel()
    acc = np.bincount(flat_idx, weights=vals.ravel(), minlength=n_rows * d)
    return acc.reshape(n_rows, d).astype(vals.dtype, copy=False)


def gather_rows(mat, idx: np.ndarray) -> Tensor:
    """mat[idx] for mat [N, d] and idx [Q, S] -> [Q, S, d]."""
    mat = _wrap(mat)
    n = mat.data.shape[0]
    out = mat.data[idx]

    def bw(g):
        _accumulate(mat, _scatter_rows(idx, g, n))

    return make_node(out, (mat,), bw)


def rows_dot(q, k) -> Tensor:
    """Per-slot inner products: q [Q, d], k [Q, S, d] -> [Q, S]."""
    q, k = _wrap(q), _wrap(k)
    if q.data.shape[0] != k.data.shape[0] or q.data.shape[1] != k.data.shape[2]:
        raise ShapeError(f"rows_dot shapes incompatible: {q.data.shape} vs {k.data.shape}")
    out = np.matmul(k.data, q.data[:, :, None])[:, :, 0]

    def bw(g):
        if q.requires_grad:
            _accumulate(q, np.matmul(g[:, None, :], k.data)[:, 0, :])
        if k.requires_grad:
            _accumulate(k, g[:, :, None] * q.data[:, None, :])

    return make_node(out, (q, k), bw)


def weighted_gather_sum(weights, mat, idx: np.ndarray) -> Tensor:
    """Sum_s weights[q, s] * mat[idx[q, s], :] -> [Q, d]."""
    weights, mat = _wrap(weights), _wrap(mat)
    n = mat.data.shape[0]
    gathered = mat.data[idx]  # [Q, S, d]
    out = np.matmul(weights.data[:, None, :], gathered)[:, 0, :]

    def bw(g):
        if weights.requires_grad:
            _accumulate(weights, np.matmul(gathered, g[:, :, None])[:, :, 0])
        if mat.requires_grad:
            vals = weights.data[:, :, None] * g[:, None, :]
            _accumulate(mat, _scatter_rows(idx, vals, n))

    return make_node(out, (weights, mat), bw)


# ---------------------------------------------------------------------------
# gradient oracle

def finite_difference_grad(f, x: Tensor, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar f at x, element by element."""
    if not (1e-6 <= step <= 1e-3):
        raise ValueError(f"step {step} outside [1e-6, 1e-3]")
    base = x.data
    grad = np.zeros_like(base)
    for i in range(base.size):
        idx = np.unravel_index(i, base.shape) if base.shape else ()
        orig = base[idx]
        base[idx] = orig + step
        fp = float(_fd_eval(f, x))
        base[idx] = orig - step
        fm = float(_fd_eval(f, x))
        base[idx] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite evaluation while perturbing element {i}")
        grad[idx] = (fp - fm) / (2.0 * step)
    return grad


def _fd_eval(f, x):
    out = f(x)
    return out.data if isinstance(out, Tensor) else out


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Max elementwise |a-b| / max(1e-8, |a|+|b|)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(1e-8, np.abs(a) + np.abs(b))
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


# ---------------------------------------------------------------------------
# deterministic initialization

def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.uint64(seed)))


def uniform_init(rng: np.random.Generator, shape, fan_in: int, scale: float = 1.0) -> np.ndarray:
    s = scale * np.sqrt(1.0 / fan_in)
    return rng.uniform(-s, s, size=shape)


# ---------------------------------------------------------------------------
# tensor dump format for golden tests

_DTYPE_TAGS = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}


def dump_tensor(fh, arr: np.ndarray):
    """Write one record: ASCII header then little-endian row-major payload."""
    tag = _DTYPE_TAGS[np.dtype(arr.dtype)]
    dims = " ".join(str(d) for d in arr.shape)
    header = f"DTNSR v1 {arr.ndim} {dims} {tag}\n" if arr.ndim else f"DTNSR v1 0 {tag}\n"
    fh.write(header.encode("ascii"))
    fh.write(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes())


def load_tensor(fh) -> np.ndarray:
    header = b""
    while not header.endswith(b"\n"):
        ch = fh.read(1)
        if not ch:
            raise ValueError("truncated tensor record header")
        header += ch
    parts = header.decode("ascii").split()
    if parts[:2] != ["DTNSR", "v1"]:
        raise ValueError(f"bad tensor record magic: {parts[:2]}")
    ndim = int(parts[2])
    dims = tuple(int(d) for d in parts[3:3 + ndim])
    tag = parts[3 + ndim]
    dtype = {"f32": "<f4", "f64": "<f8"}[tag]
    count = int(np.prod(dims)) if dims else 1
    payload = fh.read(count * np.dtype(dtype).itemsize)
    arr = np.frombuffer(payload, dtype=dtype, count=count).reshape(dims)
    return arr.astype(np.dtype(dtype).newbyteorder("="))


def save_tensor_file(path, arr: np.ndarray):
    with open(path, "wb") as fh:
        dump_tensor(fh, arr)


def load_tensor_file(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return load_tensor(fh)
