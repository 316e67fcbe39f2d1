import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sse import tensor as tc
from sse.tensor import Tape, Tensor


def triple_loop(a, b):
    n, k = a.shape
    m = b.shape[1]
    out = np.zeros((n, m))
    for i, j in itertools.product(range(n), range(m)):
        s = 0.0
        for p in range(k):
            s += a[i, p] * b[p, j]
        out[i, j] = s
    return out


class TestMatmul:
    def test_identity(self, rng):
        m = Tensor(rng.normal(size=(3, 3)))
        np.testing.assert_array_equal(tc.matmul(Tensor(np.eye(3)), m).data, m.data)

    def test_hand_arithmetic(self):
        out = tc.matmul(Tensor([[1, 2], [3, 4]]), Tensor([[1], [1]]))
        np.testing.assert_array_equal(out.data, [[3], [7]])

    def test_against_triple_loop(self, rng):
        a, b = rng.normal(size=(5, 4)), rng.normal(size=(4, 3))
        out = tc.matmul(Tensor(a), Tensor(b)).data
        assert np.abs(out - triple_loop(a, b)).max() < 1e-12

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 32), st.integers(1, 32), st.integers(1, 32), st.integers(0, 2**31))
    def test_random_shapes_against_triple_loop(self, n, k, m, seed):
        with tc.precision(64):
            g = np.random.default_rng(seed)
            a, b = g.normal(size=(n, k)), g.normal(size=(k, m))
            out = tc.matmul(Tensor(a), Tensor(b)).data
            assert np.abs(out - triple_loop(a, b)).max() < 1e-12

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(tc.DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            tc.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_gradient_rules(self, rng):
        tape = Tape()
        a = tape.watch(rng.normal(size=(2, 3)))
        b = tape.watch(rng.normal(size=(3, 4)))
        tape.backward(tc.total(tc.matmul(a, b)))
        g = np.ones((2, 4))
        np.testing.assert_allclose(tape.grad(a), g @ b.data.T)
        np.testing.assert_allclose(tape.grad(b), a.data.T @ g)


class TestElementwise:
    def test_sigmoid_zero(self):
        assert tc.sigmoid(Tensor([[0.0]])).item() == 0.5

    def test_tanh_zero(self):
        assert tc.tanh(Tensor([[0.0]])).item() == 0.0

    def test_add_zero_identity(self, rng):
        a = Tensor(rng.normal(size=(3, 2)))
        np.testing.assert_array_equal(tc.add(a, tc.zeros(3, 2)).data, a.data)

    def test_dispatch(self, rng):
        a = Tensor(rng.normal(size=(2, 2)))
        np.testing.assert_array_equal(tc.elementwise("one_minus", a).data, 1 - a.data)
        np.testing.assert_array_equal(tc.elementwise("mul", a, a).data, a.data ** 2)
        with pytest.raises(ValueError):
            tc.elementwise("relu", a)
        with pytest.raises(tc.ContractError):
            tc.elementwise("add", a)

    def test_shape_mismatch(self):
        with pytest.raises(tc.DimensionError):
            tc.add(Tensor(np.ones((2, 2))), Tensor(np.ones((2, 3))))

    def test_sigmoid_local_derivative(self, rng):
        tape = Tape()
        x = tape.watch(rng.normal(size=(3, 3)))
        s = tc.sigmoid(x)
        tape.backward(tc.total(s))
        np.testing.assert_allclose(tape.grad(x), s.data * (1 - s.data))


class TestBackward:
    def test_sum_gradient_all_ones(self, rng):
        tape = Tape()
        x = tape.watch(rng.normal(size=(4, 2)), name="x")
        grads = tape.backward(tc.total(x))
        np.testing.assert_array_equal(grads["x"], np.ones((4, 2)))

    def test_square_gradient(self, rng):
        tape = Tape()
        x = tape.watch(rng.normal(size=(4, 2)))
        tape.backward(tc.total(tc.mul(x, x)))
        np.testing.assert_allclose(tape.grad(x), 2 * x.data)

    def test_unreachable_is_zero(self, rng):
        tape = Tape()
        x = tape.watch(rng.normal(size=(2, 2)))
        y = tape.watch(rng.normal(size=(3, 1)))
        tape.backward(tc.total(x))
        np.testing.assert_array_equal(tape.grad(y), np.zeros((3, 1)))

    def test_non_scalar_loss_rejected(self, rng):
        tape = Tape()
        x = tape.watch(rng.normal(size=(2, 2)))
        with pytest.raises(tc.ContractError):
            tape.backward(tc.mul(x, x))

    def test_topological_order(self, rng):
        tape = Tape()
        x = tape.watch(rng.normal(size=(2, 2)))
        tc.tanh(tc.mul(x, tc.sigmoid(x)))
        for i, (_, inputs, _) in enumerate(tape.nodes):
            assert all(j < i for j in inputs if j is not None)

    def test_linearity(self, rng):
        data = rng.normal(size=(3, 3))

        def run(parts):
            tape = Tape()
            x = tape.watch(data)
            losses = {"a": tc.total(tc.tanh(x)), "b": tc.total(tc.mul(x, tc.sigmoid(x)))}
            loss = losses[parts[0]]
            for p in parts[1:]:
                loss = tc.add(loss, losses[p])
            tape.backward(loss)
            return tape.grad(x)

        np.testing.assert_allclose(run(["a", "b"]), run(["a"]) + run(["b"]), atol=1e-14)

    def test_determinism(self, rng):
        data = rng.normal(size=(4, 3))
        w = rng.normal(size=(3, 5))

        def run():
            tape = Tape()
            x, W = tape.watch(data), tape.watch(w)
            tape.backward(tc.total(tc.sigmoid(tc.matmul(x, W))))
            return tape.grad(x).tobytes() + tape.grad(W).tobytes()

        assert run() == run()

    def test_gather_repeated_rows_accumulate(self):
        tape = Tape()
        table = tape.watch(np.arange(6.0).reshape(3, 2))
        tape.backward(tc.total(tc.gather_rows(table, [0, 2, 0])))
        np.testing.assert_array_equal(tape.grad(table), [[2, 2], [0, 0], [1, 1]])

    def test_gather_out_of_bounds(self):
        with pytest.raises(IndexError):
            tc.gather_rows(Tensor(np.ones((3, 2))), [3])

    def test_slices_and_stacks(self, rng):
        tape = Tape()
        x = tape.watch(rng.normal(size=(4, 6)))
        parts = [tc.slice_rows(x, 0, 2), tc.slice_rows(x, 2, 4)]
        y = tc.concat_cols([tc.slice_cols(tc.stack_rows(parts), 0, 3), tc.slice_cols(x, 3, 6)])
        np.testing.assert_array_equal(y.data, x.data)
        tape.backward(tc.total(tc.mul(y, y)))
        np.testing.assert_allclose(tape.grad(x), 2 * x.data)


class TestTensorInvariants:
    def test_immutable(self):
        t = Tensor([[1.0, 2.0]])
        with pytest.raises(ValueError):
            t.data[0, 0] = 5

    def test_non_finite_rejected(self):
        with pytest.raises(tc.NumericError):
            Tensor([[np.nan]])

    def test_overflow_detected(self):
        with pytest.raises(tc.NumericError), np.errstate(over="ignore"):
            tc.mul(Tensor([[1e200]]), Tensor([[1e200]]))

    def test_not_2d(self):
        with pytest.raises(tc.DimensionError):
            Tensor(np.ones((2, 2, 2)))

    def test_precision_setting(self):
        with tc.precision(32):
            assert Tensor([[1.0]]).data.dtype == np.float32
        assert Tensor([[1.0]]).data.dtype == np.float64


class TestSoftmaxCrossEntropy:
    def test_gradient_against_finite_differences(self, rng):
        z = rng.normal(size=(4, 5))
        targets, weights = [1, 0, 4, 2], [1.0, 0.0, 2.0, 0.5]
        worst, _ = tc.grad_check(
            lambda p: tc.softmax_cross_entropy(p["z"], targets, weights), {"z": z})
        assert worst < 1e-7

    def test_all_masked(self):
        with pytest.raises(tc.ContractError):
            tc.softmax_cross_entropy(Tensor(np.zeros((2, 3))), [0, 1], [0.0, 0.0])


class TestGradCheck:
    def test_square(self):
        worst, _ = tc.grad_check(lambda p: tc.mul(p["x"], p["x"]), {"x": np.array([[3.0]])})
        assert worst < 1e-9

    def test_constant_function_is_zero(self):
        worst, _ = tc.grad_check(lambda p: tc.constant([[2.0]]), {"x": np.array([[3.0]])})
        assert worst == 0.0

    def test_nondeterministic_rejected(self):
        state = np.random.default_rng(0)

        def noisy(p):
            return tc.total(tc.mul(p["x"], tc.constant(state.random((1, 1)))))

        with pytest.raises(tc.ContractError):
            tc.grad_check(noisy, {"x": np.array([[1.0]])})

    def test_bad_epsilon(self):
        with pytest.raises(tc.ContractError):
            tc.grad_check(lambda p: p["x"], {"x": np.ones((1, 1))}, epsilon=0)

    def test_gru_step_loss(self, rng):
        from sse.model import gru_step

        H, D = 4, 3
        params = {"W": rng.normal(size=(D, 3 * H)), "U_zr": rng.normal(size=(H, 2 * H)),
                  "U_n": rng.normal(size=(H, H)), "b": rng.normal(size=(1, 3 * H))}
        x = tc.constant(rng.normal(size=(2, D)))
        h0 = tc.constant(rng.normal(size=(2, H)))

        def loss(p):
            h = gru_step(h0, x, p)
            h = gru_step(h, x, p)
            return tc.total(tc.mul(h, h))

        worst, _ = tc.grad_check(loss, params, epsilon=1e-5)
        assert worst < 1e-6


@pytest.mark.skipif(not tc.extended_available(), reason="no extended long double")
def test_extended_reference_lowers_noise_floor():
    # d/dx of 1e-7 * x * y has a gradient far below the float64 difference noise
    # floor once a large constant offset is added to the loss.
    def f(p):
        big = tc.Tensor(np.full((1, 1), 3.0))
        return tc.add(big, tc.scale(tc.mul(p["x"], p["y"]), 1e-7))

    params = {"x": np.array([[0.7]]), "y": np.array([[1.3]])}
    loose, _ = tc.grad_check(f, params)
    tight, _ = tc.grad_check(f, params, reference_bits=tc.EXTENDED)
    assert tight < 1e-6 and loose > 1e-5
    assert tc.get_precision() == 64


def test_reference_bits_validated():
    with pytest.raises(ValueError):
        tc.grad_check(lambda p: tc.total(p["x"]), {"x": np.ones((1, 1))}, reference_bits=16)
