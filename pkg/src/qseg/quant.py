"""8-bit symmetric per-tensor quantization with a learned scale.

The fake-quant forward is quantize-clip-dequantize: y = s * clamp(round(x/s),
-127, 127), rounding half away from zero. Backward uses a straight-through
estimator for x and the learned-step-size rule for s, normalized by
1/sqrt(N * 127).

Quantized matmul/conv are implemented in factored form: the integer grid
values are multiplied first and the combined scale is applied once at the
end. All grid products and partial sums stay below 2**24, so a float32
accumulation is exact and the int8 deployment kernels produce bit-identical
outputs to the fake-quant float path.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractError, ShapeError
from .tensor import Tensor

log = logging.getLogger(__name__)

Q_MAX = 127
SCALE_FLOOR = 1e-8

# float32 accumulation of grid products is exact while k * 127^2 < 2^24.
_EXACT_ACC_MAX_K = (1 << 24) // (Q_MAX * Q_MAX)


@dataclass
class QuantizerState:
    """One fake-quant node: learned scale plus calibration status."""

    name: str
    scale: Tensor = field(default_factory=lambda: Tensor(np.float32(1.0), requires_grad=True))
    bit_width: int = 8
    signed: bool = True
    calibrated: bool = False

    @property
    def q_max(self) -> int:
        return Q_MAX

    @property
    def q_min(self) -> int:
        return -Q_MAX

    def scale_value(self) -> np.float32:
        return np.float32(self.scale.data)


@dataclass
class QuantTensor:
    """int8 grid values plus the scale mapping them back to floats."""

    q: np.ndarray
    scale: np.float32

    @property
    def shape(self):
        return self.q.shape


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.copysign(np.floor(np.abs(x) + np.float32(0.5)), x)


def calibrate(state: QuantizerState, sample) -> QuantizerState:
    """Max-abs scale init; first call wins, later calls are no-ops."""
    if state.calibrated:
        return state
    data = sample.data if isinstance(sample, Tensor) else np.asarray(sample)
    if data.size == 0:
        raise ContractError(f"calibration sample for {state.name!r} is empty")
    m = float(np.max(np.abs(data)))
    if m == 0.0:
        log.warning("all-zero calibration sample for %s; scale floored", state.name)
    state.scale.data = np.float32(max(m / Q_MAX, SCALE_FLOOR))
    state.calibrated = True
    return state


def _require_calibrated(state: QuantizerState):
    if not state.calibrated:
        raise ContractError(f"quantizer {state.name!r} used before calibration")


def _grid(x: np.ndarray, s: np.float32) -> np.ndarray:
    """clamp(round(x/s)) as float32 grid values in [-127, 127]."""
    return np.clip(round_half_away(x / s), -Q_MAX, Q_MAX).astype(np.float32)


def _scale_grad_factor(q: np.ndarray, u: np.ndarray, mask: np.ndarray) -> np.ndarray:
    # in range: round(x/s) - x/s; clipped: the clamp value itself (+-127).
    return q - u * mask


def fake_quant(state: QuantizerState, x) -> Tensor:
    """Quantize-clip-dequantize with STE/learned-scale backward."""
    _require_calibrated(state)
    x = T.as_tensor(x)
    s = state.scale_value()
    u = x.data / s
    q = _grid(x.data, s)
    out = Tensor(q * s)
    tape = T._active_tape()
    if tape is not None and T._tracked(x, state.scale):
        mask = np.abs(u) <= Q_MAX
        norm = np.float32(1.0 / math.sqrt(x.size * Q_MAX))
        scale_t = state.scale
        def bwd(g):
            T.accumulate(x, g * mask)
            gs = np.float32((g * _scale_grad_factor(q, u, mask)).sum() * norm)
            T.accumulate(scale_t, np.asarray(gs, dtype=np.float32))
        T.record(tape, out, bwd)
    return out


def fake_quant_backward(state: QuantizerState, x, upstream):
    """Standalone (grad_x, grad_scale) for a fake-quant node."""
    _require_calibrated(state)
    xd = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float32)
    g = upstream.data if isinstance(upstream, Tensor) else np.asarray(upstream, dtype=np.float32)
    s = state.scale_value()
    u = xd / s
    q = _grid(xd, s)
    mask = np.abs(u) <= Q_MAX
    norm = np.float32(1.0 / math.sqrt(xd.size * Q_MAX))
    grad_x = g * mask
    grad_scale = np.float32((g * _scale_grad_factor(q, u, mask)).sum() * norm)
    return grad_x, grad_scale


def quantize_int(state: QuantizerState, x) -> QuantTensor:
    _require_calibrated(state)
    xd = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float32)
    s = state.scale_value()
    return QuantTensor(q=_grid(xd, s).astype(np.int8), scale=s)


def dequantize(qt: QuantTensor) -> np.ndarray:
    return qt.q.astype(np.float32) * np.float32(qt.scale)


def int8_matmul(a: QuantTensor, b: QuantTensor) -> np.ndarray:
    """Integer matmul with 32-bit accumulation, rescaled to float32."""
    if a.q.shape[-1] != b.q.shape[-2]:
        raise ShapeError(f"int8_matmul inner extents differ: {a.shape} vs {b.shape}")
    k = a.q.shape[-1]
    if k > 1 << 16:
        raise ShapeError(f"int8_matmul accumulator bound requires k <= 65536, got {k}")
    acc = np.matmul(a.q.astype(np.int32), b.q.astype(np.int32))
    return acc.astype(np.float32) * (np.float32(a.scale) * np.float32(b.scale))


# ------------------------------------------------------------ fused QAT ops


def _check_exact_k(k: int, where: str):
    if k > _EXACT_ACC_MAX_K:
        raise ShapeError(
            f"{where}: reduction size {k} breaks exact float32 accumulation "
            f"(max {_EXACT_ACC_MAX_K})")


def quant_matmul(a, b, state_a: QuantizerState, state_b: QuantizerState) -> Tensor:
    """Fake-quant both operands, then matmul.

    Forward equals int8_matmul(quantize(a), quantize(b)) bit for bit.
    Backward composes the matmul rule with each operand's STE/scale rule.
    """
    a, b = T.as_tensor(a), T.as_tensor(b)
    if not state_a.calibrated:
        calibrate(state_a, a)
    if not state_b.calibrated:
        calibrate(state_b, b)
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"quant_matmul inner extents differ: {a.shape} vs {b.shape}")
    _check_exact_k(a.data.shape[-1], "quant_matmul")
    sa, sb = state_a.scale_value(), state_b.scale_value()
    qa, qb = _grid(a.data, sa), _grid(b.data, sb)
    out = Tensor(np.matmul(qa, qb) * (sa * sb))
    tape = T._active_tape()
    if tape is not None and T._tracked(a, b, state_a.scale, state_b.scale):
        ua, ub = a.data / sa, b.data / sb
        mask_a, mask_b = np.abs(ua) <= Q_MAX, np.abs(ub) <= Q_MAX
        fqa, fqb = qa * sa, qb * sb
        norm_a = np.float32(1.0 / math.sqrt(a.size * Q_MAX))
        norm_b = np.float32(1.0 / math.sqrt(b.size * Q_MAX))
        def bwd(g):
            ga = np.matmul(g, fqb.swapaxes(-1, -2))
            gb = np.matmul(fqa.swapaxes(-1, -2), g)
            if ga.ndim > a.ndim:
                ga = ga.sum(axis=tuple(range(ga.ndim - a.ndim)))
            if gb.ndim > b.ndim:
                gb = gb.sum(axis=tuple(range(gb.ndim - b.ndim)))
            T.accumulate(a, ga * mask_a)
            T.accumulate(b, gb * mask_b)
            gsa = np.float32((ga * _scale_grad_factor(qa, ua, mask_a)).sum() * norm_a)
            gsb = np.float32((gb * _scale_grad_factor(qb, ub, mask_b)).sum() * norm_b)
            T.accumulate(state_a.scale, np.asarray(gsa, dtype=np.float32))
            T.accumulate(state_b.scale, np.asarray(gsb, dtype=np.float32))
        T.record(tape, out, bwd)
    return out


def quant_conv2d(x, w, stride: int, pad: int,
                 state_x: QuantizerState, state_w: QuantizerState) -> Tensor:
    """Fake-quant conv via im2col; same factored-scale semantics as
    quant_matmul."""
    x, w = T.as_tensor(x), T.as_tensor(w)
    if not state_x.calibrated:
        calibrate(state_x, x)
    if not state_w.calibrated:
        calibrate(state_w, w)
    o, c, k, _ = w.data.shape
    if x.data.shape[0] != c:
        raise ShapeError(f"quant_conv2d channel mismatch: {x.shape} vs {w.shape}")
    oh, ow = T._conv_geometry(x.data.shape[1], x.data.shape[2], k, stride, pad)
    _check_exact_k(c * k * k, "quant_conv2d")
    sx, sw = state_x.scale_value(), state_w.scale_value()
    qx, qw = _grid(x.data, sx), _grid(w.data, sw)
    cols = T.im2col(qx, k, stride, pad)
    w2 = qw.reshape(o, -1)
    out = Tensor((w2 @ cols).reshape(o, oh, ow) * (sx * sw))
    tape = T._active_tape()
    if tape is not None and T._tracked(x, w, state_x.scale, state_w.scale):
        ux, uw = x.data / sx, w.data / sw
        mask_x, mask_w = np.abs(ux) <= Q_MAX, np.abs(uw) <= Q_MAX
        fq_cols, fq_w2 = cols * sx, w2 * sw
        norm_x = np.float32(1.0 / math.sqrt(x.size * Q_MAX))
        norm_w = np.float32(1.0 / math.sqrt(w.size * Q_MAX))
        x_shape = x.data.shape
        def bwd(g):
            g2 = g.reshape(o, -1)
            gw = (g2 @ fq_cols.T).reshape(w.data.shape)
            gx = T.col2im(fq_w2.T @ g2, x_shape, k, stride, pad)
            T.accumulate(w, gw * mask_w)
            T.accumulate(x, gx * mask_x)
            gsw = np.float32((gw * _scale_grad_factor(qw, uw, mask_w)).sum() * norm_w)
            gsx = np.float32((gx * _scale_grad_factor(qx, ux, mask_x)).sum() * norm_x)
            T.accumulate(state_w.scale, np.asarray(gsw, dtype=np.float32))
            T.accumulate(state_x.scale, np.asarray(gsx, dtype=np.float32))
        T.record(tape, out, bwd)
    return out


def int8_conv2d(x: QuantTensor, w: QuantTensor, stride: int, pad: int) -> np.ndarray:
    """Deployment conv: int8 im2col GEMM with int32 accumulation."""
    o, c, k, _ = w.q.shape
    oh, ow = T._conv_geometry(x.q.shape[1], x.q.shape[2], k, stride, pad)
    cols = T.im2col(x.q.astype(np.float32), k, stride, pad).astype(np.int32)
    acc = w.q.reshape(o, -1).astype(np.int32) @ cols
    return acc.reshape(o, oh, ow).astype(np.float32) * (np.float32(x.scale) * np.float32(w.scale))
