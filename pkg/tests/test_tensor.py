"""Tensor substrate: op contracts, gradients vs finite differences, invariants."""
import numpy as np
import pytest

from rpfem.errors import ContractError, DimensionError
from rpfem.rng import SplitRng
from rpfem.tensor import (
    Tensor,
    add,
    concat,
    gather_rows,
    grad_check,
    layer_norm,
    leaky_relu,
    log_softmax,
    matmul,
    mul,
    neg,
    no_grad,
    normalized,
    reshape,
    scale,
    sigmoid,
    softmax,
    sub,
    sum_all,
    sum_axis,
    transpose,
)


def rand(seed, shape):
    return Tensor(SplitRng(seed).normal(shape))


def square_loss(x):
    return sum_all(mul(x, x))


class TestMatmul:
    def test_identity(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        out = matmul(a, Tensor(np.eye(2)))
        assert np.array_equal(out.data, a.data)

    def test_column_selection(self):
        out = matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[0.0], [1.0]]))
        assert np.array_equal(out.data, [[2.0], [4.0]])

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 2\)"):
            matmul(rand(0, (2, 3)), rand(1, (2, 2)))

    def test_gradient_matches_finite_differences(self):
        a, b = rand(2, (3, 4)), rand(3, (4, 2))
        report = grad_check(lambda u, v: square_loss(matmul(u, v)), [a, b], step=1e-5)
        assert report.max_rel_err <= 1e-6


class TestSoftmax:
    def test_symmetry(self):
        out = softmax(Tensor([0.0, 0.0, 0.0]), axis=0)
        assert np.allclose(out.data, [1 / 3] * 3, atol=1e-15)

    def test_stability_under_large_logits(self):
        out = softmax(Tensor([1000.0, 0.0]), axis=0)
        assert np.all(np.isfinite(out.data))
        assert out.data[0] == pytest.approx(1.0)

    def test_rows_sum_to_one_within_1e12(self):
        for seed in range(5):
            x = rand(seed, (6, 9))
            y = softmax(x, axis=1).data
            assert np.all(y >= 0) and np.all(y <= 1)
            assert np.abs(y.sum(axis=1) - 1).max() <= 1e-12

    def test_gradient(self):
        report = grad_check(lambda x: square_loss(softmax(x, 1)), [rand(4, (3, 5))])
        assert report.max_rel_err <= 1e-6


class TestLeakyRelu:
    def test_positive_passthrough(self):
        assert leaky_relu(Tensor([5.0]), 0.01).data[0] == 5.0

    def test_negative_scaled(self):
        assert leaky_relu(Tensor([-1.0]), 0.01).data[0] == -0.01

    def test_gradient_below_zero_equals_slope(self):
        x = Tensor([-2.0], requires_grad=True)
        leaky_relu(x, 0.01).backward(np.array([1.0]))
        assert x.grad[0] == 0.01

    def test_slope_must_be_positive(self):
        with pytest.raises(ContractError):
            leaky_relu(Tensor([1.0]), 0.0)


class TestLayerNorm:
    def test_constant_row_maps_to_zero(self):
        x = np.full((1, 5), 3.7)
        assert np.array_equal(normalized(x), np.zeros((1, 5)))

    def test_mean_zero_variance_one(self):
        out = normalized(np.array([[1.0, 2.0, 3.0]]))
        assert abs(out.mean()) <= 1e-9
        assert abs(out.var() - 1) <= 1e-6

    def test_affine_applies_gain_and_bias(self):
        x = rand(5, (4, 6))
        gain, bias = rand(6, (6,)), rand(7, (6,))
        out = layer_norm(x, gain, bias)
        assert np.allclose(out.data, normalized(x.data) * gain.data + bias.data)

    def test_gradient(self):
        x, g, b = rand(8, (3, 4)), rand(9, (4,)), rand(10, (4,))
        report = grad_check(lambda *ts: square_loss(layer_norm(*ts)), [x, g, b])
        assert report.max_rel_err <= 1e-5

    def test_invariant_band_for_real_variances(self):
        for seed in range(5):
            x = SplitRng(seed).normal((8, 16)) * 0.05  # row variance ~2.5e-3
            out = normalized(x)
            assert np.abs(out.mean(axis=-1)).max() <= 1e-9
            assert np.abs(out.var(axis=-1) - 1).max() <= 1e-6


class TestConcat:
    def test_basic(self):
        out = concat([Tensor([[1.0]]), Tensor([[2.0]])], axis=1)
        assert np.array_equal(out.data, [[1.0, 2.0]])

    def test_empty_on_axis_is_identity(self):
        x = rand(0, (3, 4))
        out = concat([x, Tensor(np.zeros((3, 0)))], axis=1)
        assert np.array_equal(out.data, x.data)

    def test_adjoint_is_ones_under_sum(self):
        a = Tensor(SplitRng(1).normal((2, 3)), requires_grad=True)
        b = Tensor(SplitRng(2).normal((2, 1)), requires_grad=True)
        sum_all(concat([a, b], axis=1)).backward()
        assert np.array_equal(a.grad, np.ones((2, 3)))
        assert np.array_equal(b.grad, np.ones((2, 1)))

    def test_incompatible_shapes(self):
        with pytest.raises(DimensionError):
            concat([rand(1, (2, 3)), rand(2, (3, 3))], axis=1)


class TestGradCheck:
    def test_quadratic_is_essentially_exact(self):
        report = grad_check(square_loss, [rand(11, (3, 3))], tol=1e-8)
        assert report.passed

    def test_rejects_non_scalar_outputs(self):
        with pytest.raises(ContractError):
            grad_check(lambda x: mul(x, x), [rand(12, (2, 2))])

    def test_rejects_bad_step(self):
        with pytest.raises(ContractError):
            grad_check(square_loss, [rand(13, (2,))], step=0.5)

    @pytest.mark.parametrize("seed", range(20))
    def test_composed_graph_many_seeds(self, seed):
        x = rand(seed, (3, 4))
        w = rand(seed + 100, (4, 3))

        def f(xx, ww):
            h = leaky_relu(matmul(xx, ww), 0.01)
            return sum_all(mul(softmax(h, 1), h))

        assert grad_check(f, [x, w], step=1e-5, tol=1e-4).passed


class TestMiscOps:
    def test_add_trailing_broadcast(self):
        a = Tensor(SplitRng(3).normal((4, 3)), requires_grad=True)
        b = Tensor(SplitRng(4).normal((3,)), requires_grad=True)
        sum_all(add(a, b)).backward()
        assert np.array_equal(b.grad, np.full(3, 4.0))

    def test_add_shape_mismatch(self):
        with pytest.raises(DimensionError):
            add(rand(5, (2, 3)), rand(6, (2, 4)))

    def test_sub_neg_scale(self):
        a, b = Tensor([3.0]), Tensor([1.0])
        assert sub(a, b).data[0] == 2.0
        assert neg(a).data[0] == -3.0
        assert scale(a, 2.0).data[0] == 6.0

    def test_transpose_reshape_roundtrip(self):
        x = rand(7, (3, 4))
        assert np.array_equal(transpose(transpose(x)).data, x.data)
        assert np.array_equal(reshape(reshape(x, (12,)), (3, 4)).data, x.data)

    def test_gather_rows_scatter_adjoint(self):
        x = Tensor(SplitRng(8).normal((3, 2)), requires_grad=True)
        sum_all(gather_rows(x, [0, 0, 2])).backward()
        assert np.array_equal(x.grad, [[2.0, 2.0], [0.0, 0.0], [1.0, 1.0]])

    def test_sum_axis_and_log_softmax_and_sigmoid_grads(self):
        checks = [
            (lambda x: square_loss(sum_axis(x, 1)), rand(9, (2, 3, 2))),
            (lambda x: square_loss(log_softmax(x, 1)), rand(10, (3, 4))),
            (lambda x: square_loss(sigmoid(x)), rand(11, (5,))),
        ]
        for f, x in checks:
            assert grad_check(f, [x]).passed

    def test_no_grad_suppresses_graph(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with no_grad():
            y = mul(x, x)
        assert not y.requires_grad and y._backward is None


class TestDeterminism:
    def test_forward_replay_is_bit_identical(self):
        p = SplitRng(0).normal((6, 5))
        w = SplitRng(1).normal((5, 4))

        def run():
            h = leaky_relu(matmul(Tensor(p), Tensor(w)), 0.01)
            return softmax(h, 1).data

        first, second = run(), run()
        assert np.array_equal(first, second)

    def test_backward_visits_shared_nodes_once(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        y = mul(x, x)
        z = add(y, y)  # diamond: y feeds z twice
        z.backward()
        assert x.grad[0] == pytest.approx(8.0)  # d/dx 2x^2


class TestRng:
    def test_children_are_stable_and_distinct(self):
        a = SplitRng(0).child("weights").normal((4,))
        b = SplitRng(0).child("weights").normal((4,))
        c = SplitRng(0).child("scenes").normal((4,))
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_label_order_independent(self):
        root = SplitRng(5)
        first = root.child("a").normal((3,))
        again = SplitRng(5).child("a").normal((3,))
        assert np.array_equal(first, again)
