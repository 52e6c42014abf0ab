import numpy as np
import pytest

import qseg.tensor as T
from qseg.errors import ContractError, ShapeError
from qseg.tensor import Tape, Tensor


def grad_of(op, *arrays, seed=0):
    """Run op on Tensors built from arrays, backprop sum(out), return grads."""
    ts = [Tensor(a.astype(np.float32), requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = op(*ts)
        loss = T.tsum(out)
        T.backward(tape, loss)
    return out.data, [t.grad for t in ts]


def check_against_fd(op, arrays, fd, rtol=2e-2, atol=1e-3):
    _, grads = grad_of(op, *arrays)
    for i, a in enumerate(arrays):
        def scalar(x, i=i):
            args = [b.astype(np.float32) for b in arrays]
            args[i] = x.astype(np.float32)
            ts = [Tensor(v) for v in args]
            return float(op(*ts).data.sum())
        ref = fd(scalar, a)
        np.testing.assert_allclose(grads[i], ref, rtol=rtol, atol=atol)


class TestElementwise:
    def test_add_mul_grads(self, rng, fd):
        a = rng.standard_normal((3, 4))
        b = rng.standard_normal((3, 4))
        check_against_fd(lambda x, y: T.add(T.mul(x, y), x), [a, b], fd)

    def test_div_power_log_exp(self, rng, fd):
        a = rng.random((4, 3)) + 0.5
        b = rng.random((4, 3)) + 0.5
        check_against_fd(lambda x, y: T.div(x, y), [a, b], fd)
        check_against_fd(lambda x: T.power(x, 2.5), [a], fd)
        check_against_fd(lambda x: T.log(x), [a], fd)
        check_against_fd(lambda x: T.exp(x), [a], fd)

    def test_sigmoid_gelu(self, rng, fd):
        a = rng.standard_normal((5, 5))
        check_against_fd(lambda x: T.sigmoid(x), [a], fd)
        check_against_fd(lambda x: T.gelu(x), [a], fd)

    def test_maximum_ties_go_to_first(self):
        a = Tensor(np.array([1.0, 2.0], dtype=np.float32), requires_grad=True)
        b = Tensor(np.array([1.0, 0.0], dtype=np.float32), requires_grad=True)
        with Tape() as tape:
            T.backward(tape, T.tsum(T.maximum(a, b)))
        assert a.grad.tolist() == [1.0, 1.0]
        assert b.grad.tolist() == [0.0, 0.0]

    def test_broadcast_unbroadcast(self, rng):
        a = rng.standard_normal((3, 4)).astype(np.float32)
        b = rng.standard_normal((4,)).astype(np.float32)
        _, (ga, gb) = grad_of(lambda x, y: T.mul(x, y), a, b)
        assert ga.shape == (3, 4) and gb.shape == (4,)
        np.testing.assert_allclose(gb, np.broadcast_to(a, (3, 4)).sum(axis=0),
                                   rtol=1e-5)


class TestReductionsAndShape:
    def test_tsum_tmean_axes(self, rng, fd):
        a = rng.standard_normal((3, 4))
        check_against_fd(lambda x: T.tsum(x, axis=1), [a], fd)
        check_against_fd(lambda x: T.tmean(x, axis=0), [a], fd)

    def test_reshape_transpose_roundtrip(self, rng):
        a = rng.standard_normal((2, 3, 4)).astype(np.float32)
        t = Tensor(a, requires_grad=True)
        with Tape() as tape:
            out = T.transpose(T.reshape(t, (6, 4)), (1, 0))
            T.backward(tape, T.tsum(T.mul(out, out)))
        np.testing.assert_allclose(t.grad, 2 * a, rtol=1e-6)

    def test_getitem_concat(self, rng):
        a = rng.standard_normal((4, 3)).astype(np.float32)
        t = Tensor(a, requires_grad=True)
        with Tape() as tape:
            out = T.concat([t[0:2], t[2:4]], axis=0)
            T.backward(tape, T.tsum(out))
        np.testing.assert_allclose(t.grad, np.ones_like(a))


class TestMatmulConv:
    def test_matmul_grad_2d(self, rng, fd):
        a = rng.standard_normal((3, 5))
        b = rng.standard_normal((5, 2))
        check_against_fd(lambda x, y: T.matmul(x, y), [a, b], fd)

    def test_matmul_batched_against_numpy(self, rng):
        a = rng.standard_normal((2, 3, 4)).astype(np.float32)
        b = rng.standard_normal((2, 4, 5)).astype(np.float32)
        out, _ = grad_of(lambda x, y: T.matmul(x, y), a, b)
        np.testing.assert_allclose(out, np.matmul(a, b), rtol=1e-5)

    def test_batched_times_2d_weight_grad_sums_over_batch(self, rng, fd):
        a = rng.standard_normal((2, 3, 4))
        w = rng.standard_normal((4, 5))
        check_against_fd(lambda x, y: T.matmul(x, y), [a, w], fd)

    def test_conv2d_matches_direct_loop(self, rng):
        x = rng.standard_normal((2, 6, 6)).astype(np.float32)
        w = rng.standard_normal((3, 2, 2, 2)).astype(np.float32)
        out = T.conv2d(Tensor(x), Tensor(w), stride=2).data
        ref = np.zeros((3, 3, 3), dtype=np.float32)
        for o in range(3):
            for i in range(3):
                for j in range(3):
                    ref[o, i, j] = (x[:, 2*i:2*i+2, 2*j:2*j+2] * w[o]).sum()
        np.testing.assert_allclose(out, ref, rtol=1e-5)

    def test_conv2d_grads(self, rng, fd):
        x = rng.standard_normal((1, 4, 4))
        w = rng.standard_normal((2, 1, 2, 2))
        check_against_fd(lambda a, b: T.conv2d(a, b, stride=2), [x, w], fd)

    def test_conv_geometry_rejects_nonintegral(self):
        x = Tensor(np.zeros((1, 5, 5), dtype=np.float32))
        w = Tensor(np.zeros((1, 1, 2, 2), dtype=np.float32))
        with pytest.raises(ShapeError):
            T.conv2d(x, w, stride=2)


class TestSoftmaxLayernorm:
    def test_softmax_rows_sum_to_one(self, rng):
        a = rng.standard_normal((4, 7)).astype(np.float32)
        out = T.softmax(Tensor(a), axis=-1).data
        np.testing.assert_allclose(out.sum(axis=-1), np.ones(4), rtol=1e-6)

    def test_softmax_grad(self, rng, fd):
        a = rng.standard_normal((3, 5))
        check_against_fd(lambda x: T.mul(T.softmax(x, axis=-1),
                                         np.arange(5, dtype=np.float32)),
                         [a], fd)

    def test_layernorm_stats_and_grad(self, rng, fd):
        a = rng.standard_normal((3, 8))
        g = rng.standard_normal((8,))
        b = rng.standard_normal((8,))
        out = T.layernorm(Tensor(a.astype(np.float32)),
                          Tensor(g.astype(np.float32)),
                          Tensor(b.astype(np.float32))).data
        norm = (out - b) / np.where(g == 0, 1, g)
        np.testing.assert_allclose(norm.mean(axis=-1), 0, atol=1e-5)
        check_against_fd(lambda x, gg, bb: T.layernorm(x, gg, bb), [a, g, b], fd)


class TestResize:
    def test_bilinear_resize_constant_preserved(self):
        a = Tensor(np.full((5, 5), 3.25, dtype=np.float32))
        out = T.bilinear_resize(a, 12, 12).data
        np.testing.assert_allclose(out, 3.25, rtol=1e-6)

    def test_bilinear_resize_grad(self, rng, fd):
        a = rng.standard_normal((4, 4))
        check_against_fd(lambda x: T.bilinear_resize(x, 7, 7), [a], fd)

    def test_nearest_resize_preserves_values(self, rng):
        a = (rng.random((5, 7)) > 0.5).astype(np.uint8)
        out = T.nearest_resize_array(a, 15, 21)
        assert set(np.unique(out)) <= set(np.unique(a))
        back = T.nearest_resize_array(out, 5, 7)
        np.testing.assert_array_equal(back, a)


class TestTape:
    def test_backward_requires_scalar(self):
        t = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
        with Tape() as tape:
            out = T.mul(t, 2.0)
            with pytest.raises(ContractError):
                T.backward(tape, out)

    def test_leaf_grads_accumulate_across_backwards(self):
        t = Tensor(np.ones(2, dtype=np.float32), requires_grad=True)
        for _ in range(2):
            with Tape() as tape:
                T.backward(tape, T.tsum(T.mul(t, 3.0)))
        np.testing.assert_allclose(t.grad, [6.0, 6.0])

    def test_no_tape_records_nothing(self):
        t = Tensor(np.ones(2, dtype=np.float32), requires_grad=True)
        out = T.mul(t, 2.0)
        assert not out._in_graph
