"""Dense float32 tensors with tape-based reverse-mode autodiff.

Forward ops run eagerly on numpy buffers. When a Tape is active (``with
Tape() as tape:``) every op touching a differentiable tensor records a
backward rule; ``backward(tape, loss)`` replays the tape in reverse.
Without an active tape the ops are plain numpy at full speed, which is
what inference uses.

Summation order is the single deterministic order numpy uses for the
given shapes; two backward passes over the same tape produce identical
gradients.
"""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np
from scipy.special import erf

from .errors import ContractError, ShapeError

_INV_SQRT2 = np.float32(1.0 / math.sqrt(2.0))
_INV_SQRT2PI = np.float32(1.0 / math.sqrt(2.0 * math.pi))

_TAPES: list["Tape"] = []


class Tensor:
    """Row-major float32 array, optionally participating in a tape."""

    __slots__ = ("data", "requires_grad", "grad", "_in_graph")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float32)
        self.requires_grad = requires_grad
        self.grad = None
        self._in_graph = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; the real work lives in the module-level functions.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


class Tape:
    """Ordered record of ops; inputs of a node always precede it."""

    def __init__(self):
        self._nodes = []  # (output tensor, backward closure)

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.pop()
        return False

    def __len__(self):
        return len(self._nodes)


def _active_tape():
    return _TAPES[-1] if _TAPES else None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tracked(*tensors) -> bool:
    return any(t.requires_grad or t._in_graph for t in tensors)


def record(tape: Tape, out: Tensor, backward_fn):
    """Append one op to the tape. `backward_fn(out_grad)` must accumulate
    into the op's inputs via `accumulate`."""
    out._in_graph = True
    tape._nodes.append((out, backward_fn))


def accumulate(t: Tensor, g: np.ndarray):
    if not (t.requires_grad or t._in_graph):
        return
    if t.grad is None:
        t.grad = g.astype(np.float32, copy=True)
    else:
        t.grad = t.grad + g.astype(np.float32, copy=False)


def backward(tape: Tape, loss: Tensor):
    """Populate grads of every tensor reachable from `loss` on `tape`."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    # Intermediates get fresh grads every pass; leaves keep accumulating.
    for out, _ in tape._nodes:
        if not out.requires_grad:
            out.grad = None
    loss.grad = np.ones_like(loss.data)
    seen = set()
    for out, fn in reversed(tape._nodes):
        if id(out) in seen:
            continue
        seen.add(id(out))
        if out.grad is not None:
            fn(out.grad)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum `g` down to `shape` (inverse of numpy broadcasting)."""
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, (gd, sd) in enumerate(zip(g.shape, shape)) if sd == 1 and gd != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data)
    tape = _active_tape()
    if tape is not None and _tracked(a, b):
        def bwd(g):
            accumulate(a, _unbroadcast(g, a.data.shape))
            accumulate(b, _unbroadcast(g, b.data.shape))
        record(tape, out, bwd)
    return out


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data - b.data)
    tape = _active_tape()
    if tape is not None and _tracked(a, b):
        def bwd(g):
            accumulate(a, _unbroadcast(g, a.data.shape))
            accumulate(b, _unbroadcast(-g, b.data.shape))
        record(tape, out, bwd)
    return out


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data)
    tape = _active_tape()
    if tape is not None and _tracked(a, b):
        ad, bd = a.data, b.data
        def bwd(g):
            accumulate(a, _unbroadcast(g * bd, ad.shape))
            accumulate(b, _unbroadcast(g * ad, bd.shape))
        record(tape, out, bwd)
    return out


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data / b.data)
    tape = _active_tape()
    if tape is not None and _tracked(a, b):
        ad, bd = a.data, b.data
        def bwd(g):
            accumulate(a, _unbroadcast(g / bd, ad.shape))
            accumulate(b, _unbroadcast(-g * ad / (bd * bd), bd.shape))
        record(tape, out, bwd)
    return out


def power(a, p: float):
    a = as_tensor(a)
    out = Tensor(a.data ** np.float32(p))
    tape = _active_tape()
    if tape is not None and _tracked(a):
        ad = a.data
        def bwd(g):
            accumulate(a, g * np.float32(p) * ad ** np.float32(p - 1))
        record(tape, out, bwd)
    return out


def log(a):
    a = as_tensor(a)
    out = Tensor(np.log(a.data))
    tape = _active_tape()
    if tape is not None and _tracked(a):
        ad = a.data
        def bwd(g):
            accumulate(a, g / ad)
        record(tape, out, bwd)
    return out


def exp(a):
    a = as_tensor(a)
    out = Tensor(np.exp(a.data))
    tape = _active_tape()
    if tape is not None and _tracked(a):
        od = out.data
        def bwd(g):
            accumulate(a, g * od)
        record(tape, out, bwd)
    return out


def absolute(a):
    a = as_tensor(a)
    out = Tensor(np.abs(a.data))
    tape = _active_tape()
    if tape is not None and _tracked(a):
        s = np.sign(a.data)
        def bwd(g):
            accumulate(a, g * s)
        record(tape, out, bwd)
    return out


def maximum(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(np.maximum(a.data, b.data))
    tape = _active_tape()
    if tape is not None and _tracked(a, b):
        take_a = a.data >= b.data  # ties route to the first argument
        def bwd(g):
            accumulate(a, _unbroadcast(g * take_a, a.data.shape))
            accumulate(b, _unbroadcast(g * ~take_a, b.data.shape))
        record(tape, out, bwd)
    return out


def minimum(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(np.minimum(a.data, b.data))
    tape = _active_tape()
    if tape is not None and _tracked(a, b):
        take_a = a.data <= b.data
        def bwd(g):
            accumulate(a, _unbroadcast(g * take_a, a.data.shape))
            accumulate(b, _unbroadcast(g * ~take_a, b.data.shape))
        record(tape, out, bwd)
    return out


def sigmoid(a):
    a = as_tensor(a)
    out = Tensor(1.0 / (1.0 + np.exp(-a.data)))
    tape = _active_tape()
    if tape is not None and _tracked(a):
        od = out.data
        def bwd(g):
            accumulate(a, g * od * (1.0 - od))
        record(tape, out, bwd)
    return out


def gelu(a):
    """Exact erf-based GELU."""
    a = as_tensor(a)
    ad = a.data
    e = erf(ad * _INV_SQRT2).astype(np.float32)
    out = Tensor(0.5 * ad * (1.0 + e))
    tape = _active_tape()
    if tape is not None and _tracked(a):
        def bwd(g):
            d = 0.5 * (1.0 + e) + ad * np.exp(-0.5 * ad * ad) * _INV_SQRT2PI
            accumulate(a, g * d)
        record(tape, out, bwd)
    return out


# ------------------------------------------------------------- reductions


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))
    tape = _active_tape()
    if tape is not None and _tracked(a):
        shape = a.data.shape
        def bwd(g):
            if axis is None:
                accumulate(a, np.broadcast_to(g, shape))
            else:
                gg = g if keepdims else np.expand_dims(g, axis)
                accumulate(a, np.broadcast_to(gg, shape))
        record(tape, out, bwd)
    return out


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.size if axis is None else (
        np.prod([a.data.shape[i] for i in np.atleast_1d(axis)]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


# ------------------------------------------------------- shape manipulation


def reshape(a, shape):
    a = as_tensor(a)
    out = Tensor(a.data.reshape(shape))
    tape = _active_tape()
    if tape is not None and _tracked(a):
        orig = a.data.shape
        def bwd(g):
            accumulate(a, g.reshape(orig))
        record(tape, out, bwd)
    return out


def transpose(a, perm):
    a = as_tensor(a)
    if sorted(perm) != list(range(a.ndim)):
        raise ShapeError(f"invalid permutation {perm} for ndim {a.ndim}")
    out = Tensor(a.data.transpose(perm))
    tape = _active_tape()
    if tape is not None and _tracked(a):
        inv = np.argsort(perm)
        def bwd(g):
            accumulate(a, g.transpose(inv))
        record(tape, out, bwd)
    return out


def getitem(a, idx):
    a = as_tensor(a)
    out = Tensor(a.data[idx])
    tape = _active_tape()
    if tape is not None and _tracked(a):
        shape = a.data.shape
        def bwd(g):
            full = np.zeros(shape, dtype=np.float32)
            np.add.at(full, idx, g)
            accumulate(a, full)
        record(tape, out, bwd)
    return out


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    tape = _active_tape()
    if tape is not None and _tracked(*tensors):
        sizes = [t.data.shape[axis] for t in tensors]
        splits = np.cumsum(sizes)[:-1]
        def bwd(g):
            for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
                accumulate(t, piece)
        record(tape, out, bwd)
    return out


# ------------------------------------------------------------- linear algebra


def matmul(a, b):
    """Matrix product. Supports 2D x 2D, batched NxN-dim, and batched @ 2D."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must have ndim >= 2")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(
            f"matmul inner extents differ: {a.data.shape} vs {b.data.shape}")
    out = Tensor(np.matmul(a.data, b.data))
    tape = _active_tape()
    if tape is not None and _tracked(a, b):
        ad, bd = a.data, b.data
        def bwd(g):
            ga = np.matmul(g, bd.swapaxes(-1, -2))
            gb = np.matmul(ad.swapaxes(-1, -2), g)
            if ga.ndim > ad.ndim:
                ga = ga.sum(axis=tuple(range(ga.ndim - ad.ndim)))
            if gb.ndim > bd.ndim:
                gb = gb.sum(axis=tuple(range(gb.ndim - bd.ndim)))
            accumulate(a, ga)
            accumulate(b, gb)
        record(tape, out, bwd)
    return out


def _conv_geometry(h, w, k, stride, pad):
    if stride < 1:
        raise ShapeError("stride must be >= 1")
    if k > h + 2 * pad or k > w + 2 * pad:
        raise ShapeError("kernel larger than padded input")
    if (h + 2 * pad - k) % stride or (w + 2 * pad - k) % stride:
        raise ShapeError(
            f"non-integral conv output extent for h={h}, w={w}, k={k}, "
            f"stride={stride}, pad={pad}")
    return (h + 2 * pad - k) // stride + 1, (w + 2 * pad - k) // stride + 1


def im2col(x: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    """(C,H,W) -> (C*k*k, H'*W') patch matrix (cross-correlation layout)."""
    c, h, w = x.shape
    oh, ow = _conv_geometry(h, w, k, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(1, 2))
    win = win[:, ::stride, ::stride]  # (C, oh, ow, k, k)
    return (win.transpose(0, 3, 4, 1, 2).reshape(c * k * k, oh * ow)
            .astype(np.float32, copy=False))


def col2im(cols: np.ndarray, x_shape, k: int, stride: int, pad: int) -> np.ndarray:
    """Adjoint of im2col: scatter-add (C*k*k, H'*W') back to (C,H,W)."""
    c, h, w = x_shape
    oh, ow = _conv_geometry(h, w, k, stride, pad)
    xp = np.zeros((c, h + 2 * pad, w + 2 * pad), dtype=np.float32)
    cols = cols.reshape(c, k, k, oh, ow)
    for ki in range(k):
        for kj in range(k):
            xp[:, ki:ki + oh * stride:stride, kj:kj + ow * stride:stride] += cols[:, ki, kj]
    if pad:
        xp = xp[:, pad:-pad, pad:-pad]
    return xp


def conv2d(x, w, stride: int = 1, pad: int = 0):
    """Cross-correlation of x:(C,H,W) with w:(O,C,k,k)."""
    x, w = as_tensor(x), as_tensor(w)
    o, c, k, _ = w.data.shape
    if x.data.shape[0] != c:
        raise ShapeError(f"conv2d channel mismatch: {x.data.shape} vs {w.data.shape}")
    oh, ow = _conv_geometry(x.data.shape[1], x.data.shape[2], k, stride, pad)
    cols = im2col(x.data, k, stride, pad)
    w2 = w.data.reshape(o, -1)
    out = Tensor((w2 @ cols).reshape(o, oh, ow))
    tape = _active_tape()
    if tape is not None and _tracked(x, w):
        x_shape = x.data.shape
        def bwd(g):
            g2 = g.reshape(o, -1)
            accumulate(w, (g2 @ cols.T).reshape(w.data.shape))
            accumulate(x, col2im(w2.T @ g2, x_shape, k, stride, pad))
        record(tape, out, bwd)
    return out


# ----------------------------------------------------------- fused activations


def softmax(a, axis: int = -1):
    a = as_tensor(a)
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"softmax axis {axis} out of range for ndim {a.ndim}")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = Tensor(e / e.sum(axis=axis, keepdims=True))
    tape = _active_tape()
    if tape is not None and _tracked(a):
        od = out.data
        def bwd(g):
            dot = (g * od).sum(axis=axis, keepdims=True)
            accumulate(a, od * (g - dot))
        record(tape, out, bwd)
    return out


def layernorm(a, gamma, beta, eps: float = 1e-5):
    """Normalize over the last axis, then affine."""
    a, gamma, beta = as_tensor(a), as_tensor(gamma), as_tensor(beta)
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.float32(eps))
    xhat = xc * inv
    out = Tensor(xhat * gamma.data + beta.data)
    tape = _active_tape()
    if tape is not None and _tracked(a, gamma, beta):
        def bwd(g):
            red = tuple(range(g.ndim - 1))
            accumulate(gamma, (g * xhat).sum(axis=red))
            accumulate(beta, g.sum(axis=red))
            gh = g * gamma.data
            m1 = gh.mean(axis=-1, keepdims=True)
            m2 = (gh * xhat).mean(axis=-1, keepdims=True)
            accumulate(a, inv * (gh - m1 - xhat * m2))
        record(tape, out, bwd)
    return out


# --------------------------------------------------------------- resizing


@lru_cache(maxsize=64)
def _resize_matrix(src: int, dst: int):
    """Bilinear interpolation matrix (dst x src), half-pixel centers."""
    m = np.zeros((dst, src), dtype=np.float32)
    if src == 1:
        m[:, 0] = 1.0
        return m
    pos = (np.arange(dst, dtype=np.float64) + 0.5) * src / dst - 0.5
    pos = np.clip(pos, 0.0, src - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, src - 1)
    frac = (pos - lo).astype(np.float32)
    m[np.arange(dst), lo] += 1.0 - frac
    m[np.arange(dst), hi] += frac
    return m


def bilinear_resize_array(x: np.ndarray, h2: int, w2: int) -> np.ndarray:
    """Plain-numpy bilinear resize of (H,W) or (C,H,W) or (H,W,C)."""
    x = np.asarray(x, dtype=np.float32)
    if x.ndim == 2:
        ah = _resize_matrix(x.shape[0], h2)
        aw = _resize_matrix(x.shape[1], w2)
        return ah @ x @ aw.T
    if x.ndim == 3 and x.shape[0] <= 4:  # channels-first
        ah = _resize_matrix(x.shape[1], h2)
        aw = _resize_matrix(x.shape[2], w2)
        return np.einsum("ij,cjk,lk->cil", ah, x, aw, optimize=True)
    if x.ndim == 3:  # channels-last
        ah = _resize_matrix(x.shape[0], h2)
        aw = _resize_matrix(x.shape[1], w2)
        return np.einsum("ij,jkc,lk->ilc", ah, x, aw, optimize=True)
    raise ShapeError(f"cannot resize array of shape {x.shape}")


def bilinear_resize(a, h2: int, w2: int):
    """Differentiable bilinear resize of (H,W) or (C,H,W), half-pixel centers."""
    a = as_tensor(a)
    if a.ndim not in (2, 3):
        raise ShapeError(f"bilinear_resize expects 2D or 3D, got {a.shape}")
    chan_first = a.ndim == 3
    h, w = a.data.shape[-2], a.data.shape[-1]
    ah = _resize_matrix(h, h2)
    aw = _resize_matrix(w, w2)
    if chan_first:
        out_data = np.einsum("ij,cjk,lk->cil", ah, a.data, aw, optimize=True)
    else:
        out_data = ah @ a.data @ aw.T
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None and _tracked(a):
        def bwd(g):
            if chan_first:
                accumulate(a, np.einsum("ji,cjk,kl->cil", ah, g, aw, optimize=True))
            else:
                accumulate(a, ah.T @ g @ aw)
        record(tape, out, bwd)
    return out


def nearest_resize_array(x: np.ndarray, h2: int, w2: int) -> np.ndarray:
    """Nearest-neighbor resize of a 2D array (used for masks)."""
    h, w = x.shape
    rows = np.minimum(((np.arange(h2) + 0.5) * h / h2).astype(int), h - 1)
    cols = np.minimum(((np.arange(w2) + 0.5) * w / w2).astype(int), w - 1)
    return x[np.ix_(rows, cols)]
