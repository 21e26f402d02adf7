"""Tape engine: elementwise/matmul/shape ops and backward correctness."""

import numpy as np
import pytest

from ghnq.errors import ShapeError
from ghnq.gradcheck import check_gradients
from ghnq.tensor import (ComputeTape, Tensor, backward, concat, gather_rows,
                         matmul, mean, no_grad, relu, sigmoid, sqrt, sum_,
                         tanh, tile, take, use_dtype)


def rng(seed=0):
    return np.random.default_rng(seed)


class TestTensorBasics:
    def test_shape_matches_data(self):
        t = Tensor(np.arange(6).reshape(2, 3))
        assert t.shape == (2, 3)
        assert t.size == 6
        assert t.dtype == np.float32

    def test_grad_matches_shape_after_backward(self):
        x = Tensor(rng().normal(size=(3, 4)), requires_grad=True)
        backward((x * x).sum())
        assert x.grad.shape == x.shape

    def test_finite_after_ops(self):
        x = Tensor(rng().normal(size=(4, 4)) * 50, requires_grad=True)
        y = tanh(sigmoid(x) * x - 3.0)
        assert np.isfinite(y.data).all()

    def test_no_grad_blocks_recording(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with no_grad():
            y = x * 2.0
        assert y._entry is None

    def test_detach_cuts_graph(self):
        x = Tensor(np.ones(3), requires_grad=True)
        y = (x * 2.0).detach() * 3.0
        assert y._entry is None or x not in y._entry.inputs


class TestBackwardContract:
    def test_sum_gives_ones(self):
        x = Tensor(rng().normal(size=(2, 3, 4)), requires_grad=True)
        backward(x.sum())
        assert np.array_equal(x.grad, np.ones_like(x.data))

    def test_quadratic_gives_identity(self):
        x = Tensor(rng().normal(size=(5, 5)), requires_grad=True)
        backward((x * x).sum() * 0.5)
        np.testing.assert_allclose(x.grad, x.data, rtol=1e-6)

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        with pytest.raises(ShapeError):
            backward(x * 2.0)

    def test_tape_is_topological_and_visits_once(self):
        x = Tensor(np.ones(3), requires_grad=True)
        a = x * 2.0
        b = a + x
        loss = (b * a).sum()
        tape = ComputeTape(loss)
        seen = set()
        for entry in tape.entries:
            for parent in entry.inputs:
                if parent._entry is not None:
                    assert id(parent) in seen, "input used before being produced"
            assert id(entry.output) not in seen, "entry visited twice"
            seen.add(id(entry.output))

    def test_shared_subexpression_accumulates(self):
        x = Tensor(np.array([3.0]), requires_grad=True)
        y = x * x  # reused twice below
        backward((y + y).sum())
        np.testing.assert_allclose(x.grad, [12.0], rtol=1e-6)

    def test_deep_chain_does_not_recurse(self):
        x = Tensor(np.ones(2), requires_grad=True)
        y = x
        for _ in range(3000):
            y = y + 0.001
        backward(y.sum())
        assert np.array_equal(x.grad, np.ones(2))


class TestGradientsAgainstFiniteDifferences:
    """Central-difference oracle: every primitive, small random inputs."""

    def test_arithmetic_chain(self):
        a = rng(1).normal(size=(3, 4))
        b = rng(2).normal(size=(3, 4)) + 3.0

        def fn(leaves):
            x, y = leaves
            return ((x * y - x / y + 2.0 * x) * (x + y)).sum()

        check_gradients(fn, [a, b], min_pass_fraction=1.0)

    def test_broadcasting(self):
        a = rng(3).normal(size=(4, 3))
        b = rng(4).normal(size=(1, 3))
        check_gradients(lambda l: ((l[0] + l[1]) * l[1]).sum(), [a, b])

    def test_matmul(self):
        a = rng(5).normal(size=(3, 4))
        b = rng(6).normal(size=(4, 2))
        check_gradients(lambda l: (matmul(l[0], l[1]) * matmul(l[0], l[1])).sum(), [a, b])

    @pytest.mark.parametrize("op", [relu, sigmoid, tanh])
    def test_activations(self, op):
        a = rng(7).normal(size=(4, 5)) * 2.0 + 0.1  # keep away from relu kink
        check_gradients(lambda l: (op(l[0]) * l[0]).sum(), [a])

    def test_sqrt_and_reductions(self):
        a = np.abs(rng(8).normal(size=(3, 4))) + 0.5
        check_gradients(lambda l: sqrt(mean(l[0], axis=1)).sum(), [a])
        check_gradients(lambda l: sum_(l[0], axis=0, keepdims=True).mean(), [a])

    def test_shape_ops(self):
        a = rng(9).normal(size=(2, 3, 4))

        def fn(leaves):
            x = leaves[0]
            y = x.reshape(6, 4).transpose()
            z = concat([y, y * 2.0], axis=0)
            return (z * z).sum()

        check_gradients(fn, [a])

    def test_slicing(self):
        a = rng(10).normal(size=(5, 4))

        def fn(leaves):
            window = take(leaves[0], (slice(1, 4), slice(0, 2)))
            return (window * window).sum()

        check_gradients(fn, [a])

    def test_tile(self):
        a = rng(11).normal(size=(2, 3))
        check_gradients(lambda l: (tile(l[0], (3, 2)) * tile(l[0], (3, 2))).sum(), [a])

    def test_gather_rows(self):
        table = rng(12).normal(size=(6, 4))
        idx = np.array([0, 2, 2, 5])
        check_gradients(lambda l: (gather_rows(l[0], idx) *
                                   gather_rows(l[0], idx)).sum(), [table])


class TestTileSemantics:
    def test_tile_repeats_blocks(self):
        x = Tensor(np.arange(6, dtype=np.float32).reshape(2, 3))
        t = tile(x, (2, 1))
        assert np.array_equal(t.data[0:2], t.data[2:4])

    def test_gather_rows_values(self):
        table = Tensor(np.arange(12, dtype=np.float32).reshape(4, 3))
        out = gather_rows(table, [3, 0])
        assert np.array_equal(out.data, table.data[[3, 0]])


class TestDtypeSwitch:
    def test_use_dtype_float64(self):
        with use_dtype(np.float64):
            t = Tensor(np.ones(3))
            assert t.dtype == np.float64
        assert Tensor(np.ones(3)).dtype == np.float32
