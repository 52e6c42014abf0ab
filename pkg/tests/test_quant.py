import math

import numpy as np
import pytest

import qseg.quant as Q
import qseg.tensor as T
from qseg.errors import ContractError, ShapeError
from qseg.tensor import Tape, Tensor


def make_state(scale, name="t"):
    st = Q.QuantizerState(name)
    st.scale.data = np.float32(scale)
    st.calibrated = True
    return st


class TestRounding:
    def test_half_away_from_zero(self):
        x = np.array([0.5, 1.5, -0.5, -1.5, 2.4, -2.4], dtype=np.float32)
        np.testing.assert_array_equal(Q.round_half_away(x),
                                      [1.0, 2.0, -1.0, -2.0, 2.0, -2.0])

    def test_negation_symmetry(self, rng):
        x = rng.standard_normal(10000).astype(np.float32) * 3
        st = make_state(0.1)
        a = Q.fake_quant(st, Tensor(x)).data
        b = Q.fake_quant(st, Tensor(-x)).data
        np.testing.assert_array_equal(a, -b)


class TestCalibration:
    def test_max_abs_over_127(self):
        st = Q.QuantizerState("c")
        Q.calibrate(st, np.array([-5.08, 2.0]))
        assert st.scale.data == np.float32(5.08 / 127)

    def test_first_call_wins(self):
        st = Q.QuantizerState("c")
        Q.calibrate(st, np.array([1.27]))
        Q.calibrate(st, np.array([127.0]))
        assert st.scale.data == np.float32(0.01)

    def test_zero_sample_floors_scale(self):
        st = Q.QuantizerState("c")
        Q.calibrate(st, np.zeros(4))
        assert st.scale.data == np.float32(Q.SCALE_FLOOR)

    def test_uncalibrated_use_raises(self):
        st = Q.QuantizerState("c")
        with pytest.raises(ContractError):
            Q.fake_quant(st, Tensor(np.ones(2, dtype=np.float32)))


class TestRoundTrip:
    # acceptance criterion territory: error <= scale/2 in range, exact clamp
    # outside, checked densely here on a smaller draw.
    @pytest.mark.parametrize("scale", [0.01, 0.1, 1.0])
    def test_roundtrip_error_bound(self, scale, rng):
        st = make_state(scale)
        x = (rng.random(20000).astype(np.float32) - 0.5) * 2 * 127 * scale
        y = Q.fake_quant(st, Tensor(x)).data
        np.testing.assert_array_less(np.abs(y - x), scale / 2 + 1e-7)

    @pytest.mark.parametrize("scale", [0.01, 1.0])
    def test_exact_clamp_out_of_range(self, scale, rng):
        st = make_state(scale)
        x = (rng.random(1000).astype(np.float32) + 1.01) * 127 * scale
        y = Q.fake_quant(st, Tensor(np.concatenate([x, -x]))).data
        np.testing.assert_array_equal(np.abs(y), np.float32(127 * scale))


class TestGradients:
    """FD oracles for the fake-quant backward.

    grad_x: the STE is exactly verifiable by finite differences when the
    probe step h is an integer multiple of the scale, because then
    round((x+h)/s) = round(x/s) + h/s with no boundary crossing for
    |x| well inside the clip range.

    grad_scale: the learned-step rule equals the true derivative only in
    the clipped region (d/ds of s*(+-127) = +-127); in-range the rule is
    (round(u) - u), which differs from the a.e. derivative round(u) by
    design, so in-range is checked analytically instead.
    """

    def test_grad_x_matches_fd_on_lattice_steps(self, rng):
        for trial in range(20):
            s = float(2.0 ** rng.integers(-6, 0))
            st = make_state(s)
            x = ((rng.random(64) - 0.5) * 126 * s).astype(np.float32)
            g = rng.standard_normal(64).astype(np.float32)
            grad_x, _ = Q.fake_quant_backward(st, x, g)
            h = 8 * s
            fd = np.zeros_like(x)
            for i in range(x.size):
                xp, xm = x.copy(), x.copy()
                xp[i] += h
                xm[i] -= h
                yp = Q.fake_quant(st, Tensor(xp)).data
                ym = Q.fake_quant(st, Tensor(xm)).data
                fd[i] = (g * (yp - ym)).sum() / (2 * h)
            np.testing.assert_allclose(grad_x, fd * (g != 0), rtol=1e-4, atol=1e-6)

    def test_grad_x_zero_outside_range(self):
        st = make_state(0.1)
        x = np.array([100.0, -100.0, 1.0], dtype=np.float32)
        grad_x, _ = Q.fake_quant_backward(st, x, np.ones(3, dtype=np.float32))
        np.testing.assert_array_equal(grad_x, [0.0, 0.0, 1.0])

    def test_grad_scale_matches_fd_in_clipped_regime(self, rng):
        for trial in range(20):
            s = float(rng.random() * 0.5 + 0.05)
            st = make_state(s)
            sign = np.where(rng.random(32) < 0.5, -1.0, 1.0)
            x = (sign * (rng.random(32) + 1.5) * 127 * s).astype(np.float32)
            g = rng.standard_normal(32).astype(np.float32)
            _, grad_s = Q.fake_quant_backward(st, x, g)
            h = s * 1e-3
            yp = Q.fake_quant(make_state(s + h), Tensor(x)).data
            ym = Q.fake_quant(make_state(s - h), Tensor(x)).data
            fd = float((g * (yp - ym)).sum() / (2 * h))
            norm = 1.0 / math.sqrt(x.size * 127)
            assert abs(grad_s - fd * norm) <= 1e-3 * max(1.0, abs(fd * norm))

    def test_grad_scale_in_range_analytic(self, rng):
        s = 0.25
        st = make_state(s)
        x = ((rng.random(50) - 0.5) * 120 * s).astype(np.float32)
        g = rng.standard_normal(50).astype(np.float32)
        _, grad_s = Q.fake_quant_backward(st, x, g)
        u = x / np.float32(s)
        q = Q.round_half_away(u)
        expect = (g * (q - u)).sum() / math.sqrt(50 * 127)
        np.testing.assert_allclose(grad_s, expect, rtol=1e-4)

    def test_tape_route_matches_standalone(self, rng):
        st = make_state(0.2)
        x = Tensor((rng.standard_normal(16) * 3).astype(np.float32),
                   requires_grad=True)
        with Tape() as tape:
            out = Q.fake_quant(st, x)
            T.backward(tape, T.tsum(out))
        gx, gs = Q.fake_quant_backward(st, x, np.ones(16, dtype=np.float32))
        np.testing.assert_array_equal(x.grad, gx)
        np.testing.assert_allclose(st.scale.grad, gs, rtol=1e-6)


class TestIntegerKernels:
    def test_int8_matmul_matches_dequantized_float(self, rng):
        for _ in range(50):
            m, k, n = rng.integers(1, 64, size=3)
            sa, sb = rng.random(2) * 0.2 + 0.01
            a = Q.QuantTensor(rng.integers(-127, 128, (m, k)).astype(np.int8),
                              np.float32(sa))
            b = Q.QuantTensor(rng.integers(-127, 128, (k, n)).astype(np.int8),
                              np.float32(sb))
            got = Q.int8_matmul(a, b)
            ref = Q.dequantize(a).astype(np.float64) @ Q.dequantize(b).astype(np.float64)
            np.testing.assert_allclose(got, ref, atol=1e-5 * max(1, np.abs(ref).max()))

    def test_quant_matmul_equals_int_path_bitwise(self, rng):
        sa_state, sb_state = make_state(0.07, "a"), make_state(0.11, "b")
        a = Tensor((rng.standard_normal((8, 16)) * 5).astype(np.float32))
        b = Tensor((rng.standard_normal((16, 4)) * 5).astype(np.float32))
        fused = Q.quant_matmul(a, b, sa_state, sb_state).data
        qa = Q.quantize_int(sa_state, a)
        qb = Q.quantize_int(sb_state, b)
        np.testing.assert_array_equal(fused, Q.int8_matmul(qa, qb))

    def test_quant_conv_equals_int_conv_bitwise(self, rng):
        sx, sw = make_state(0.05, "x"), make_state(0.03, "w")
        x = Tensor((rng.standard_normal((2, 8, 8)) * 2).astype(np.float32))
        w = Tensor((rng.standard_normal((3, 2, 4, 4))).astype(np.float32))
        fused = Q.quant_conv2d(x, w, 4, 0, sx, sw).data
        got = Q.int8_conv2d(Q.quantize_int(sx, x), Q.quantize_int(sw, w), 4, 0)
        np.testing.assert_array_equal(fused, got)

    def test_exact_accumulation_guard(self):
        k = Q._EXACT_ACC_MAX_K + 1
        st_a, st_b = make_state(1.0, "a"), make_state(1.0, "b")
        a = Tensor(np.ones((1, k), dtype=np.float32))
        b = Tensor(np.ones((k, 1), dtype=np.float32))
        with pytest.raises(ShapeError):
            Q.quant_matmul(a, b, st_a, st_b)

    def test_quant_matmul_autocalibrates(self, rng):
        st_a, st_b = Q.QuantizerState("a"), Q.QuantizerState("b")
        a = Tensor(rng.standard_normal((3, 5)).astype(np.float32))
        b = Tensor(rng.standard_normal((5, 2)).astype(np.float32))
        Q.quant_matmul(a, b, st_a, st_b)
        assert st_a.calibrated and st_b.calibrated
        assert st_a.scale.data == np.float32(np.abs(a.data).max() / 127)

    def test_quant_matmul_grads_vs_composition(self, rng):
        """The fused backward must equal fake-quant operands + plain matmul."""
        st_a, st_b = make_state(0.09, "a"), make_state(0.06, "b")
        a_np = (rng.standard_normal((4, 6)) * 2).astype(np.float32)
        b_np = (rng.standard_normal((6, 3)) * 2).astype(np.float32)
        a1 = Tensor(a_np.copy(), requires_grad=True)
        b1 = Tensor(b_np.copy(), requires_grad=True)
        with Tape() as tape:
            out = Q.quant_matmul(a1, b1, st_a, st_b)
            T.backward(tape, T.tsum(out))
        st_a2, st_b2 = make_state(0.09, "a2"), make_state(0.06, "b2")
        a2 = Tensor(a_np.copy(), requires_grad=True)
        b2 = Tensor(b_np.copy(), requires_grad=True)
        with Tape() as tape:
            out2 = T.matmul(Q.fake_quant(st_a2, a2), Q.fake_quant(st_b2, b2))
            T.backward(tape, T.tsum(out2))
        # the fused path applies sa*sb once at the end, the composed path
        # scales each operand first: same value up to float rounding
        np.testing.assert_allclose(out.data, out2.data, rtol=1e-5, atol=1e-5)
        np.testing.assert_allclose(a1.grad, a2.grad, rtol=1e-5, atol=1e-6)
        np.testing.assert_allclose(b1.grad, b2.grad, rtol=1e-5, atol=1e-6)
        np.testing.assert_allclose(st_a.scale.grad, st_a2.scale.grad, rtol=1e-4)
        np.testing.assert_allclose(st_b.scale.grad, st_b2.scale.grad, rtol=1e-4)
