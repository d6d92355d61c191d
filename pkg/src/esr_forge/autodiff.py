"""Dense tensors with reverse-mode differentiation.

numpy arrays do the arithmetic; every operation optionally records a
backward closure so a scalar loss can push gradients into Parameters.
Training runs in float32, gradient verification in float64 (central
differences are meaningless at single precision).
"""

from __future__ import annotations

import struct
import threading
from contextlib import contextmanager

import numpy as np

try:  # optional conv fast path (used on the recording-free branch only)
    import numba as _numba
except ImportError:
    _numba = None


class ShapeError(ValueError):
    pass


_GRAD_ENABLED = [True]


@contextmanager
def no_grad():
    """Disable graph recording (forward evaluation only)."""
    _GRAD_ENABLED.append(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.pop()


class Tensor:
    """N-d real array plus the bookkeeping for reverse traversal."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = False
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def backward(self):
        backward(self)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    __rmul__ = __mul__

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"


class Parameter(Tensor):
    """Leaf tensor that accumulates a gradient across backward passes."""

    def __init__(self, data, dtype=None):
        super().__init__(data, dtype)
        self.requires_grad = True
        self.grad = np.zeros_like(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)


def _tracked(t: Tensor) -> bool:
    return t.requires_grad or t._backward is not None


def _result(data: np.ndarray, parents: tuple, backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = False
    out._parents = ()
    out._backward = None
    if _GRAD_ENABLED[-1]:
        for p in parents:
            if p.requires_grad or p._backward is not None:
                out._parents = parents
                out._backward = backward_fn
                break
    return out


def _accum(t: Tensor, g) -> None:
    if not _tracked(t):
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def backward(loss: Tensor) -> None:
    """Reverse-topological sweep from a scalar; fills Parameter.grad."""
    if loss.data.size != 1:
        raise ShapeError("backward requires a scalar loss")
    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# elementwise / structural ops


def _require_same_shape(a, b, opname):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{opname}: shape {a.data.shape} vs {b.data.shape}")


def add(x: Tensor, y: Tensor) -> Tensor:
    _require_same_shape(x, y, "add")

    def bw(g):
        _accum(x, g)
        _accum(y, g)

    return _result(x.data + y.data, (x, y), bw)


def sub(x: Tensor, y: Tensor) -> Tensor:
    _require_same_shape(x, y, "sub")

    def bw(g):
        _accum(x, g)
        _accum(y, -g)

    return _result(x.data - y.data, (x, y), bw)


def mul(x: Tensor, y: Tensor) -> Tensor:
    _require_same_shape(x, y, "mul")

    def bw(g):
        _accum(x, g * y.data)
        _accum(y, g * x.data)

    return _result(x.data * y.data, (x, y), bw)


def scale(x: Tensor, s: float) -> Tensor:
    s = float(s)

    def bw(g):
        _accum(x, g * s)

    return _result(x.data * np.asarray(s, dtype=x.data.dtype), (x,), bw)


def relu(x: Tensor) -> Tensor:
    d = x.data

    def bw(g):
        _accum(x, g * (d > 0))

    return _result(np.maximum(d, 0), (x,), bw)


def sigmoid(x: Tensor) -> Tensor:
    # tanh form saturates gracefully instead of overflowing exp
    out = 0.5 * np.tanh(0.5 * x.data) + 0.5

    def bw(g):
        _accum(x, g * out * (1.0 - out))

    return _result(out, (x,), bw)


def softmax_lastdim(x: Tensor) -> Tensor:
    d = x.data
    e = np.exp(d - d.max(axis=-1, keepdims=True))
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        _accum(x, out * (g - dot))

    return _result(out, (x,), bw)


def tensor_sum(x: Tensor) -> Tensor:
    def bw(g):
        _accum(x, np.broadcast_to(g, x.data.shape))

    return _result(np.asarray(x.data.sum(), dtype=x.data.dtype), (x,), bw)


def mean_all(x: Tensor) -> Tensor:
    return scale(tensor_sum(x), 1.0 / x.data.size)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)

    def bw(g):
        _accum(x, g.reshape(x.data.shape))

    return _result(x.data.reshape(shape), (x,), bw)


def transpose_last2(x: Tensor) -> Tensor:
    if x.data.ndim < 2:
        raise ShapeError("transpose_last2 needs rank >= 2")

    def bw(g):
        _accum(x, g.swapaxes(-1, -2))

    return _result(x.data.swapaxes(-1, -2), (x,), bw)


def concat_channels(xs: list[Tensor]) -> Tensor:
    if not xs:
        raise ShapeError("concat_channels of empty list")
    lead = xs[0].data.shape
    for t in xs[1:]:
        s = t.data.shape
        if len(s) != len(lead) or s[:1] + s[2:] != lead[:1] + lead[2:]:
            raise ShapeError("concat_channels: non-channel dims must match")

    def bw(g):
        lo = 0
        for t in xs:
            hi = lo + t.data.shape[1]
            _accum(t, g[:, lo:hi])
            lo = hi

    return _result(np.concatenate([t.data for t in xs], axis=1), tuple(xs), bw)


def matmul_batched(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 3 or b.data.ndim != 3:
        raise ShapeError("matmul_batched needs rank-3 inputs")
    if a.data.shape[0] != b.data.shape[0] or a.data.shape[2] != b.data.shape[1]:
        raise ShapeError(f"matmul_batched: {a.data.shape} x {b.data.shape}")

    def bw(g):
        _accum(a, g @ b.data.swapaxes(-1, -2))
        _accum(b, a.data.swapaxes(-1, -2) @ g)

    return _result(a.data @ b.data, (a, b), bw)


# ---------------------------------------------------------------------------
# convolution and pixel shuffle


_COL_IDX_CACHE: dict[tuple, np.ndarray] = {}
_PAD_BUFFERS = threading.local()


def _pad_buffer(shape: tuple, dtype) -> np.ndarray:
    """Reusable zeroed pad buffer; only the interior is ever written."""
    cache = getattr(_PAD_BUFFERS, "bufs", None)
    if cache is None:
        cache = _PAD_BUFFERS.bufs = {}
    key = (shape, np.dtype(dtype).str)
    buf = cache.get(key)
    if buf is None:
        buf = cache[key] = np.zeros(shape, dtype=dtype)
    return buf


def _im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """(B,C,H,W) -> (B, H*W, C*kh*kw) patch matrix, zero same-padding."""
    b, c, h, w = x.shape
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    hp, wp = h + 2 * ph, w + 2 * pw
    if ph or pw:
        xp = _pad_buffer((b, c, hp, wp), x.dtype)
        xp[:, :, ph:ph + h, pw:pw + w] = x
    else:
        xp = x
    key = (c, h, w, kh, kw)
    idx = _COL_IDX_CACHE.get(key)
    if idx is None:
        ci, u, v = np.meshgrid(np.arange(c), np.arange(kh), np.arange(kw), indexing="ij")
        taps = ((ci * hp + u) * wp + v).reshape(1, -1)
        oy, ox = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        pos = (oy * wp + ox).reshape(-1, 1)
        idx = pos + taps
        _COL_IDX_CACHE[key] = idx
    if b == 1:
        return xp.reshape(-1).take(idx)[None]
    return xp.reshape(b, -1)[:, idx]


def _conv2d_fwd(x: np.ndarray, k: np.ndarray) -> tuple[np.ndarray, np.ndarray | None]:
    """Stride-1 same-padding cross-correlation; returns (out, patch matrix)."""
    b, c, h, w = x.shape
    cout, _, kh, kw = k.shape
    if kh == 1 and kw == 1:
        k2 = k.reshape(cout, c)
        if b == 1:
            out = np.matmul(k2, x.reshape(c, h * w)).reshape(1, cout, h, w)
        else:
            out = np.matmul(k2, x.reshape(b, c, h * w)).reshape(b, cout, h, w)
        return out, None
    cols = _im2col(x, kh, kw)
    if b == 1:
        out = np.matmul(cols[0], k.reshape(cout, -1).T)
        return out.T.reshape(1, cout, h, w), cols
    out = np.matmul(cols, k.reshape(cout, -1).T)
    return out.transpose(0, 2, 1).reshape(b, cout, h, w), cols


def _conv2d_raw(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    return _conv2d_fwd(np.ascontiguousarray(x), np.ascontiguousarray(k))[0]


if _numba is not None:

    @_numba.njit(cache=True)
    def _conv_same_nb(x, k, bias):  # pragma: no cover - exercised via conv2d
        bsz, cin, h, w = x.shape
        cout, _, kh, kw = k.shape
        ph = (kh - 1) // 2
        pw = (kw - 1) // 2
        out = np.empty((bsz, cout, h, w), dtype=x.dtype)
        for b in range(bsz):
            for co in range(cout):
                for i in range(h):
                    for j in range(w):
                        acc = bias[co]
                        for ci in range(cin):
                            for u in range(kh):
                                ii = i + u - ph
                                if 0 <= ii < h:
                                    for v in range(kw):
                                        jj = j + v - pw
                                        if 0 <= jj < w:
                                            acc += x[b, ci, ii, jj] * k[co, ci, u, v]
                        out[b, co, i, j] = acc
        return out

else:
    _conv_same_nb = None


def conv2d(x: Tensor, k: Tensor, bias: Tensor) -> Tensor:
    """3x3/1x1-style convolution: odd kernel, stride 1, zero same-padding."""
    if x.data.ndim != 4 or k.data.ndim != 4:
        raise ShapeError("conv2d needs (B,Ci,H,W) input and (Co,Ci,kh,kw) kernel")
    cout, cin, kh, kw = k.data.shape
    if x.data.shape[1] != cin:
        raise ShapeError(f"conv2d: input channels {x.data.shape[1]} != kernel {cin}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError("conv2d kernel dims must be odd")
    if bias.data.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.data.shape} != ({cout},)")
    b, _, h, w = x.data.shape
    if not (_GRAD_ENABLED[-1] and (_tracked(x) or _tracked(k) or _tracked(bias))):
        if _conv_same_nb is not None:
            return _result(_conv_same_nb(x.data, k.data, bias.data), (), None)
        out, _ = _conv2d_fwd(x.data, k.data)
        out += bias.data.reshape(1, cout, 1, 1)
        return _result(out, (), None)
    out, cols = _conv2d_fwd(x.data, k.data)
    out += bias.data.reshape(1, cout, 1, 1)  # fresh array in both conv paths

    def bw(g):
        _accum(bias, g.sum(axis=(0, 2, 3)))
        if cols is None:
            g3 = g.reshape(b, cout, h * w)
            x3 = x.data.reshape(b, cin, h * w)
            _accum(k, np.matmul(g3, x3.transpose(0, 2, 1)).sum(axis=0).reshape(k.data.shape))
            _accum(x, np.matmul(k.data.reshape(cout, cin).T, g3).reshape(x.data.shape))
        else:
            gm = g.reshape(b, cout, h * w)
            _accum(k, np.tensordot(gm, cols, axes=([0, 2], [0, 1])).reshape(k.data.shape))
            k_t = np.ascontiguousarray(k.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            _accum(x, _conv2d_fwd(g, k_t)[0])

    return _result(out, (x, k, bias), bw)


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """(B, r^2*C, H, W) -> (B, C, r*H, r*W); channel index is c*r^2 + dy*r + dx."""
    if x.data.ndim != 4:
        raise ShapeError("pixel_shuffle needs rank-4 input")
    b, c2, h, w = x.data.shape
    if c2 % (r * r):
        raise ShapeError(f"pixel_shuffle: {c2} channels not divisible by r^2={r * r}")
    c = c2 // (r * r)
    out = (
        x.data.reshape(b, c, r, r, h, w)
        .transpose(0, 1, 4, 2, 5, 3)
        .reshape(b, c, h * r, w * r)
    )

    def bw(g):
        _accum(
            x,
            g.reshape(b, c, h, r, w, r).transpose(0, 1, 3, 5, 2, 4).reshape(b, c2, h, w),
        )

    return _result(out, (x,), bw)


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    """Inverse of pixel_shuffle with the same channel ordering."""
    if x.data.ndim != 4:
        raise ShapeError("pixel_unshuffle needs rank-4 input")
    b, c, hh, ww = x.data.shape
    if hh % r or ww % r:
        raise ShapeError(f"pixel_unshuffle: spatial dims {hh}x{ww} not divisible by {r}")
    h, w = hh // r, ww // r
    out = (
        x.data.reshape(b, c, h, r, w, r)
        .transpose(0, 1, 3, 5, 2, 4)
        .reshape(b, c * r * r, h, w)
    )

    def bw(g):
        _accum(
            x,
            g.reshape(b, c, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(b, c, hh, ww),
        )

    return _result(out, (x,), bw)


def layer_norm_channels(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the channel axis at each (b, h, w) location."""
    if x.data.ndim != 4:
        raise ShapeError("layer_norm_channels needs (B,C,H,W)")
    c = x.data.shape[1]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeError("layer_norm_channels: gamma/beta must be (C,)")
    d = x.data
    inv_c = 1.0 / c
    mu = d.sum(axis=1, keepdims=True) * inv_c
    xc = d - mu
    var = (xc * xc).sum(axis=1, keepdims=True) * inv_c
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def bw(g):
        _accum(gamma, (g * xhat).sum(axis=(0, 2, 3)))
        _accum(beta, g.sum(axis=(0, 2, 3)))
        gx = g * gamma.data[None, :, None, None]
        m1 = gx.mean(axis=1, keepdims=True)
        m2 = (gx * xhat).mean(axis=1, keepdims=True)
        _accum(x, inv * (gx - m1 - xhat * m2))

    return _result(out, (x, gamma, beta), bw)


# ---------------------------------------------------------------------------
# verification and serialization


def grad_check(f, params: list[Parameter], h: float = 1e-5) -> float:
    """Max relative error between recorded gradients and central differences.

    f takes no arguments, re-evaluates the computation from the current
    parameter values and returns a scalar Tensor. Parameters must be
    float64.
    """
    for p in params:
        if p.data.dtype != np.float64:
            raise ValueError("grad_check requires float64 parameters")
        p.zero_grad()
    out = f()
    if out.data.size != 1:
        raise ValueError("grad_check target must be scalar-valued")
    backward(out)
    analytic = [p.grad.copy() for p in params]
    max_rel = 0.0
    with no_grad():
        for p, an in zip(params, analytic):
            flat = p.data.reshape(-1)
            an_flat = an.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = float(f().data.reshape(()))
                flat[i] = orig - h
                fm = float(f().data.reshape(()))
                flat[i] = orig
                num = (fp - fm) / (2.0 * h)
                a = an_flat[i]
                rel = abs(a - num) / max(1e-8, abs(a) + abs(num))
                if rel > max_rel:
                    max_rel = rel
    return max_rel


def write_tensor(fh, arr: np.ndarray) -> None:
    """Binary dump: magic TNSR, u32 rank, u32 dims, raw f32/f64 payload (LE)."""
    if arr.dtype == np.float32:
        payload = arr.astype("<f4", copy=False)
    elif arr.dtype == np.float64:
        payload = arr.astype("<f8", copy=False)
    else:
        raise ValueError(f"unsupported dtype {arr.dtype}")
    fh.write(b"TNSR")
    fh.write(struct.pack("<I", arr.ndim))
    if arr.ndim:
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(np.ascontiguousarray(payload).tobytes())


def read_tensor(fh, dtype) -> np.ndarray:
    """Read one write_tensor block; dtype (f32/f64) must be known externally."""
    magic = fh.read(4)
    if magic != b"TNSR":
        raise ValueError(f"bad tensor magic {magic!r}")
    (rank,) = struct.unpack("<I", fh.read(4))
    dims = struct.unpack(f"<{rank}I", fh.read(4 * rank)) if rank else ()
    dtype = np.dtype(dtype)
    wire = "<f4" if dtype == np.float32 else "<f8"
    count = int(np.prod(dims)) if rank else 1
    buf = fh.read(count * np.dtype(wire).itemsize)
    if len(buf) != count * np.dtype(wire).itemsize:
        raise ValueError("truncated tensor payload")
    return np.frombuffer(buf, dtype=wire).reshape(dims).astype(dtype, copy=False).copy()
