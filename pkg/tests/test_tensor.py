import numpy as np
import pytest

import owfs.tensor as T
from owfs.tensor import Parameter, ShapeError, Tensor

from gradcheck import check_op, numeric_grad
from op_inventory import OP_NAMES, op_cases


class TestForwardDefinitions:
    def test_relu(self):
        out = T.relu(Tensor([-1.0, 0.0, 2.0]))
        np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.0])

    def test_leaky_relu(self):
        out = T.leaky_relu(Tensor([-1.0, 0.0, 2.0]), alpha=0.01)
        np.testing.assert_allclose(out.data, [-0.01, 0.0, 2.0], rtol=0, atol=0)

    def test_softmax_symmetry(self):
        out = T.softmax(Tensor([0.0, 0.0]))
        np.testing.assert_array_equal(out.data, [0.5, 0.5])

    def test_softmax_sums_to_one(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            x = rng.uniform(-30, 30, size=rng.integers(2, 9))
            s = T.softmax(Tensor(x)).data
            assert abs(s.sum() - 1.0) <= 1e-12

    def test_softmax_shift_invariance(self):
        rng = np.random.default_rng(8)
        for _ in range(50):
            x = rng.uniform(-5, 5, size=6)
            c = rng.uniform(-100, 100)
            a = T.softmax(Tensor(x)).data
            b = T.softmax(Tensor(x + c)).data
            np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)

    def test_matmul(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        b = Tensor([[1.0, 0.0], [0.0, 1.0]])
        np.testing.assert_array_equal(T.matmul(a, b).data, a.data)

    def test_maxpool_floor_semantics(self):
        # 5x5 -> 2x2: the trailing row/col is dropped.
        x = Tensor(np.arange(25, dtype=float).reshape(1, 1, 5, 5))
        out = T.maxpool2d(x)
        np.testing.assert_array_equal(out.data[0, 0], [[6, 8], [16, 18]])


class TestBackwardBasics:
    def test_square_sum_gradient(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        loss = T.tsum(T.square(x))
        loss.backward()
        np.testing.assert_array_equal(x.grad, [2.0, 4.0])

    def test_relu_subgradient(self):
        x = Tensor([-1.0, 2.0], requires_grad=True)
        loss = T.tsum(T.relu(x))
        loss.backward()
        np.testing.assert_array_equal(x.grad, [0.0, 1.0])

    def test_relu_subgradient_at_zero_is_zero(self):
        x = Tensor([0.0], requires_grad=True)
        T.tsum(T.relu(x)).backward()
        np.testing.assert_array_equal(x.grad, [0.0])

    def test_leaky_subgradient_at_zero_is_alpha(self):
        x = Tensor([0.0], requires_grad=True)
        T.tsum(T.leaky_relu(x, alpha=0.3)).backward()
        np.testing.assert_array_equal(x.grad, [0.3])

    def test_non_scalar_backward_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ValueError, match="scalar"):
            T.square(x).backward()

    def test_repeated_backward_accumulates(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        loss = T.tsum(T.square(x))
        loss.backward()
        loss.backward()
        np.testing.assert_array_equal(x.grad, [4.0, 8.0])

    def test_zero_grad_resets(self):
        x = Tensor([1.0], requires_grad=True)
        T.tsum(T.square(x)).backward()
        x.zero_grad()
        assert x.grad is None

    def test_fanout_accumulates(self):
        # y = x*x + x used twice; dy/dx = 2x + 1
        x = Tensor([3.0], requires_grad=True)
        loss = T.tsum(T.add(T.mul(x, x), x))
        loss.backward()
        np.testing.assert_array_equal(x.grad, [7.0])

    def test_all_reachable_grads_populated(self):
        x = Tensor([1.0, -1.0], requires_grad=True)
        mid = T.relu(x)
        loss = T.tsum(mid)
        loss.backward()
        assert mid.grad is not None and x.grad is not None

    def test_conv2d_matches_finite_differences(self):
        # Tighter than the generic sweep: rtol 1e-4, h 1e-5, 1x1x5x5 input.
        rng = np.random.default_rng(42)
        x = rng.uniform(-1, 1, (1, 1, 5, 5))
        k = rng.uniform(-1, 1, (1, 1, 3, 3))

        def build(t, u):
            return T.tsum(T.square(T.conv2d(t, u, padding="same")))

        def fn(xx, ww):
            from op_inventory import _np_conv2d
            return float(np.sum(_np_conv2d(xx, ww, None, "same") ** 2))

        check_op(build, fn, [x, k], rtol=1e-4, h=1e-5)


@pytest.mark.parametrize("name", OP_NAMES)
def test_gradcheck_all_ops(name):
    """Every op agrees with central finite differences on 20 seeded draws."""
    for seed in range(20):
        rng = np.random.default_rng(1000 + seed)
        for case_name, build, fn, arrays in op_cases(rng):
            if case_name == name:
                check_op(build, fn, arrays, rtol=1e-3, h=1e-5)
                break
        else:
            pytest.fail(f"case {name} missing")


class TestShapeDiscipline:
    def test_add_shape_mismatch(self):
        with pytest.raises(ShapeError, match="add"):
            T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))

    def test_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(3, 2\)"):
            T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))

    def test_no_implicit_broadcasting(self):
        # A (1, 3) row against (2, 3) must fail; only true scalars broadcast.
        with pytest.raises(ShapeError):
            T.add(Tensor(np.zeros((1, 3))), Tensor(np.zeros((2, 3))))

    def test_scalar_broadcast_allowed(self):
        out = T.add(Tensor(np.ones((2, 3))), 1.5)
        np.testing.assert_array_equal(out.data, np.full((2, 3), 2.5))

    def test_matmul_shape_mismatch(self):
        with pytest.raises(ShapeError, match="matmul"):
            T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_reshape_size_mismatch(self):
        with pytest.raises(ShapeError, match="reshape"):
            T.reshape(Tensor(np.zeros(6)), (4,))

    def test_conv2d_channel_mismatch(self):
        with pytest.raises(ShapeError, match="conv2d"):
            T.conv2d(Tensor(np.zeros((1, 2, 5, 5))),
                     Tensor(np.zeros((3, 1, 3, 3))))

    def test_slice_rows_bounds(self):
        with pytest.raises(ShapeError):
            T.slice_rows(Tensor(np.zeros((3, 2))), 2, 5)


class TestDeterminism:
    def test_same_seed_same_graph_bitwise(self):
        def run():
            rng = np.random.default_rng(123)
            x = Tensor(rng.normal(size=(2, 1, 8, 8)), requires_grad=True)
            w = Tensor(rng.normal(size=(4, 1, 3, 3)), requires_grad=True)
            h = T.maxpool2d(T.relu(T.conv2d(x, w, padding="same")))
            loss = T.tsum(T.square(h))
            loss.backward()
            return loss.data.copy(), x.grad.copy(), w.grad.copy()

        l1, xg1, wg1 = run()
        l2, xg2, wg2 = run()
        assert np.array_equal(l1, l2)
        assert np.array_equal(xg1, xg2)
        assert np.array_equal(wg1, wg2)


class TestParameter:
    def test_requires_grad(self):
        p = Parameter("w", np.ones(3))
        assert p.tensor.requires_grad
        T.tsum(T.square(p.tensor)).backward()
        np.testing.assert_array_equal(p.grad, [2.0, 2.0, 2.0])

    def test_numeric_grad_helper_sanity(self):
        # The oracle itself: d/dx of sum(x^2) = 2x.
        x = np.array([1.0, -2.0, 0.5])
        (g,) = numeric_grad(lambda a: float(np.sum(a ** 2)), [x])
        np.testing.assert_allclose(g, 2 * x, rtol=1e-6)
