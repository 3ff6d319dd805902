"""Forward semantics and contracts of the tensor engine."""

import math

import numpy as np
import pytest

from tomatoseg import tensor as T
from tomatoseg.errors import (
    ConfigError,
    ContractError,
    CorruptIndexError,
    NumericError,
    ShapeError,
)


def t(data, grad=False):
    return T.Tensor(np.asarray(data, dtype=np.float32), requires_grad=grad)


class TestElementwise:
    def test_add(self):
        assert np.array_equal(T.add(t([1, 2]), t([3, 4])).data, [4, 6])

    def test_relu(self):
        assert np.array_equal(T.relu(t([-1, 0, 2])).data, [0, 0, 2])

    def test_mul_scalar_annihilator(self):
        assert np.array_equal(T.mul(t([2, 3]), 0).data, [0, 0])

    def test_dispatcher_matches_functions(self):
        a, b = t([1.0, -2.0]), t([0.5, 4.0])
        assert np.array_equal(T.elementwise("add", a, b).data, T.add(a, b).data)
        assert np.array_equal(T.elementwise("sub", a, b).data, T.sub(a, b).data)
        assert np.array_equal(T.elementwise("mul", a, b).data, T.mul(a, b).data)
        assert np.array_equal(T.elementwise("relu", a).data, T.relu(a).data)
        assert np.array_equal(T.elementwise("scale", a, 2.0).data, T.scale(a, 2.0).data)

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            T.elementwise("frobnicate", t([1.0]))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            T.add(t([1, 2]), t([1, 2, 3]))

    def test_nan_rejected(self):
        with pytest.raises(NumericError):
            T.log(t([0.0]))  # log 0 -> -inf


class TestMatmul:
    def test_identity(self):
        m = t([[5, 6], [7, 8]])
        assert np.array_equal(T.matmul(t(np.eye(2)), m).data, m.data)

    def test_dot_product(self):
        out = T.matmul(t([[1, 2]]), t([[3], [4]]))
        assert np.array_equal(out.data, [[11]])

    def test_inner_dim_mismatch(self):
        with pytest.raises(ShapeError):
            T.matmul(t([[1, 2]]), t([[1, 2]]))


class TestConv2d:
    def test_identity_kernel(self):
        rng = np.random.default_rng(0)
        x = t(rng.uniform(0, 1, (5, 4, 1)))
        w = t(np.ones((1, 1, 1, 1)))
        out = T.conv2d(x, w, stride=1, padding=0)
        assert np.array_equal(out.data, x.data)

    def test_ones_kernel_constant_image(self):
        c = 0.5
        x = t(np.full((6, 6, 1), c))
        w = t(np.ones((3, 3, 1, 1)))
        out = T.conv2d(x, w, stride=1, padding=0)
        assert out.dims == (4, 4, 1)
        assert np.allclose(out.data, 9 * c, atol=1e-6)

    def test_kernel_larger_than_input(self):
        with pytest.raises(ShapeError):
            T.conv2d(t(np.ones((2, 2, 1))), t(np.ones((5, 5, 1, 1))), padding=0)

    def test_even_kernel_needs_padding(self):
        with pytest.raises(ShapeError):
            T.conv2d(t(np.ones((4, 4, 1))), t(np.ones((2, 2, 1, 1))))


class TestBatchnorm:
    def test_already_normalized(self):
        rng = np.random.default_rng(1)
        x = rng.normal(0, 1, (50, 40, 2)).astype(np.float32)
        x -= x.mean(axis=(0, 1))
        x /= x.std(axis=(0, 1))
        out = T.batchnorm(
            t(x), t(np.ones(2)), t(np.zeros(2)),
            np.zeros(2, np.float32), np.ones(2, np.float32), training=True,
        )
        assert np.abs(out.data - x).max() <= 1e-4

    def test_gamma_zero_gives_beta(self):
        rng = np.random.default_rng(2)
        x = t(rng.uniform(-1, 1, (4, 4, 3)))
        beta = np.array([0.5, -1.0, 2.0], np.float32)
        out = T.batchnorm(
            x, t(np.zeros(3)), t(beta),
            np.zeros(3, np.float32), np.ones(3, np.float32), training=True,
        )
        assert np.allclose(out.data, np.broadcast_to(beta, (4, 4, 3)), atol=1e-7)

    def test_eval_uses_running_stats(self):
        x = t(np.full((4, 4, 1), 3.0))
        rm = np.array([1.0], np.float32)
        rv = np.array([4.0], np.float32)
        out = T.batchnorm(x, t(np.ones(1)), t(np.zeros(1)), rm, rv, training=False)
        assert np.allclose(out.data, (3.0 - 1.0) / np.sqrt(4.0 + 1e-5), atol=1e-6)
        # eval never touches the buffers
        assert rm[0] == 1.0 and rv[0] == 4.0

    def test_zero_variance_is_safe(self):
        x = t(np.full((4, 4, 1), 2.0))
        out = T.batchnorm(
            x, t(np.ones(1)), t(np.zeros(1)),
            np.zeros(1, np.float32), np.ones(1, np.float32), training=True,
        )
        assert np.all(np.isfinite(out.data))


class TestLayernorm:
    def test_constant_row(self):
        out = T.layernorm(t([[3.0, 3.0, 3.0]]), t(np.ones(3)), t(np.zeros(3)))
        assert np.allclose(out.data, 0.0, atol=1e-3)

    def test_already_normalized_row(self):
        out = T.layernorm(t([[1.0, -1.0]]), t(np.ones(2)), t(np.zeros(2)))
        assert np.allclose(out.data, [[1.0, -1.0]], atol=1e-2)


class TestSoftmaxTemp:
    def test_symmetry(self):
        for tau in (0.5, 1.0, 3.7):
            out = T.softmax_temp(t([0.0, 0.0]), tau)
            assert np.allclose(out.data, [0.5, 0.5], atol=1e-7)

    def test_closed_form_tau1(self):
        out = T.softmax_temp(t([math.log(2), 0.0]), 1.0)
        assert np.allclose(out.data, [2 / 3, 1 / 3], atol=1e-6)

    def test_closed_form_tau2(self):
        out = T.softmax_temp(t([math.log(2), 0.0]), 2.0)
        r = math.sqrt(2)
        assert np.allclose(out.data, [r / (1 + r), 1 / (1 + r)], atol=1e-5)

    def test_rows_sum_to_one_entries_open_interval(self):
        rng = np.random.default_rng(3)
        x = t(rng.uniform(-5, 5, (100, 7)))
        p = T.softmax_temp(x, 1.5).data
        assert np.abs(p.sum(axis=-1) - 1.0).max() <= 1e-6
        assert p.min() > 0.0 and p.max() < 1.0

    def test_bad_tau(self):
        with pytest.raises(ConfigError):
            T.softmax_temp(t([1.0, 2.0]), 0.0)
        with pytest.raises(ConfigError):
            T.softmax_temp(t([1.0, 2.0]), -1.5)


class TestPooling:
    def test_max_and_index(self):
        x = t(np.array([[1, 2], [3, 4]], np.float32).reshape(2, 2, 1))
        pooled, idx = T.maxpool2x2(x)
        assert pooled.data.reshape(()) == 4
        assert idx.argmax[0] == 3  # flat index of position (1,1)

    def test_tie_break_first_in_scan(self):
        x = t(np.full((2, 2, 1), 7.0))
        pooled, idx = T.maxpool2x2(x)
        assert pooled.data.reshape(()) == 7
        assert idx.argmax[0] == 0

    def test_odd_dims_rejected(self):
        with pytest.raises(ShapeError):
            T.maxpool2x2(t(np.ones((3, 4, 1))))

    def test_unpool_definition(self):
        x = t(np.array([[1, 2], [3, 4]], np.float32).reshape(2, 2, 1))
        pooled, idx = T.maxpool2x2(x)
        up = T.max_unpool2x2(pooled, idx)
        assert np.array_equal(up.data.reshape(2, 2), [[0, 0], [0, 4]])

    def test_unpool_zero(self):
        x = t(np.random.default_rng(0).uniform(0, 1, (4, 4, 2)))
        pooled, idx = T.maxpool2x2(x)
        up = T.max_unpool2x2(T.scale(pooled, 0.0), idx)
        assert np.all(up.data == 0)

    def test_unpool_mass_preservation(self):
        rng = np.random.default_rng(4)
        x = t(rng.uniform(0, 1, (8, 6, 3)))
        pooled, idx = T.maxpool2x2(x)
        up = T.max_unpool2x2(pooled, idx)
        assert np.isclose(up.data.sum(), pooled.data.sum(), atol=1e-5)

    def test_pool_unpool_round_trip_exact(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            x = t(rng.uniform(0, 1, (6, 8, 2)))
            pooled, idx = T.maxpool2x2(x)
            again, _ = T.maxpool2x2(T.max_unpool2x2(pooled, idx))
            assert np.array_equal(pooled.data, again.data)

    def test_corrupt_indices_rejected(self):
        x = t(np.random.default_rng(0).uniform(0, 1, (4, 4, 1)))
        pooled, idx = T.maxpool2x2(x)
        idx.argmax[0] = 999
        with pytest.raises(CorruptIndexError):
            T.max_unpool2x2(pooled, idx)


class TestResizeBilinear:
    def test_same_dims_identity(self):
        rng = np.random.default_rng(6)
        x = t(rng.uniform(0, 1, (5, 7, 3)))
        out = T.resize_bilinear(x, 5, 7)
        assert np.abs(out.data - x.data).max() <= 1e-6

    def test_constant_image(self):
        x = t(np.full((4, 4, 2), 0.3))
        out = T.resize_bilinear(x, 9, 3)
        assert np.allclose(out.data, 0.3, atol=1e-6)

    def test_row_monotone(self):
        x = t(np.array([0.0, 1.0], np.float32).reshape(1, 2, 1))
        out = T.resize_bilinear(x, 1, 4).data.reshape(-1)
        assert np.all(np.diff(out) >= 0)
        assert out.min() >= 0.0 and out.max() <= 1.0


class TestBackward:
    def test_sum_of_squares(self):
        x = t([1, 2, 3], grad=True)
        T.backward(T.sum_all(T.mul(x, x)))
        assert np.allclose(x.grad, [2, 4, 6], atol=1e-6)

    def test_constant_function_zero_grads(self):
        x = t([1.0, -2.0], grad=True)
        T.backward(T.sum_all(T.mul(x, 0.0)))
        assert np.array_equal(x.grad, [0.0, 0.0])

    def test_unreachable_untouched(self):
        x = t([1.0], grad=True)
        y = t([2.0], grad=True)
        T.backward(T.sum_all(T.mul(x, x)))
        assert y.grad is None

    def test_non_scalar_root_rejected(self):
        x = t([1.0, 2.0], grad=True)
        with pytest.raises(ContractError):
            T.backward(T.mul(x, x))

    def test_grad_accumulates_across_calls(self):
        x = t([1.0], grad=True)
        T.backward(T.sum_all(x))
        T.backward(T.sum_all(x))
        assert np.allclose(x.grad, [2.0])


class TestComputeGraph:
    def test_append_order_is_topological(self):
        a = t([1.0, 2.0], grad=True)
        b = T.mul(a, a)
        c = T.add(b, a)
        d = T.sum_all(c)
        graph = T.ComputeGraph.trace(d)
        ids = [n._nid for n in graph.nodes]
        assert ids == sorted(ids)
        for node in graph.nodes:
            for p in node._parents:
                if p._backward is not None:
                    assert p._nid < node._nid

    def test_diamond_visits_once(self):
        # d = b*b with b = a+a: b's backward must run once with both
        # contributions already summed, giving d'(a) = 8a exactly
        a = t([3.0], grad=True)
        b = T.add(a, a)
        d = T.sum_all(T.mul(b, b))
        T.backward(d)
        assert np.allclose(a.grad, [24.0])


class TestDeterminism:
    def test_bit_identical_forwards(self):
        def run():
            rng = np.random.default_rng(42)
            x = t(rng.uniform(-1, 1, (8, 8, 3)))
            w = t(rng.uniform(-1, 1, (3, 3, 3, 4)))
            out = T.conv2d(x, w)
            pooled, _ = T.maxpool2x2(T.relu(out))
            return T.softmax_temp(pooled, 1.5).data

        assert np.array_equal(run(), run())


class TestNoGrad:
    def test_no_graph_recorded(self):
        x = t([1.0, 2.0], grad=True)
        with T.no_grad():
            y = T.mul(x, x)
        assert y._backward is None and not y.requires_grad
