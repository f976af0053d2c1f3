import numpy as np
import pytest

from pyspil import autodiff as ad
from pyspil.errors import NumericError, UsageError


class TestTape:
    def test_gradient_of_root_with_respect_to_itself(self):
        """Test that d(root)/d(root) is 1."""
        tape = ad.Tape()
        x = tape.variable(3.0)
        assert tape.gradient(x, x) == pytest.approx(1.0)

    def test_product_rule(self):
        """Test a small expression against its hand-derived gradient."""
        tape = ad.Tape()
        x = tape.variable(np.array([1.0, 2.0, 3.0]))
        y = (x * x * 2.0 + x).sum()
        np.testing.assert_allclose(tape.gradient(y, x), 4.0 * np.array([1.0, 2.0, 3.0]) + 1.0)

    def test_gradient_shape_matches_input(self):
        """Test that the gradient has the same shape as the variable it tracks."""
        tape = ad.Tape()
        x = tape.variable(np.ones((3, 4)))
        y = (x * 2.0).mean()
        grad = tape.gradient(y, x)
        assert grad.shape == (3, 4)
        np.testing.assert_allclose(grad, np.full((3, 4), 2.0 / 12.0))

    def test_unused_variable_gets_zero_gradient(self):
        """Test that variables with no path to the root receive zeros."""
        tape = ad.Tape()
        x = tape.variable(np.array([1.0, 2.0]))
        unused = tape.variable(np.array([5.0, 6.0, 7.0]))
        grads = tape.gradient(x.sum(), [x, unused])
        np.testing.assert_allclose(grads[1], np.zeros(3))

    def test_broadcasting_is_summed_back(self):
        """Test that a broadcast bias receives the summed adjoint."""
        tape = ad.Tape()
        x = tape.variable(np.ones((4, 2)))
        b = tape.variable(np.array([0.5, -0.5]))
        y = (x + b).sum()
        np.testing.assert_allclose(tape.gradient(y, b), [4.0, 4.0])

    def test_numpy_on_the_left_defers_to_var(self):
        """Test that ndarray (op) Var stays on the tape."""
        tape = ad.Tape()
        x = tape.variable(np.array([1.0, 2.0]))
        y = np.array([3.0, 4.0]) * x
        assert isinstance(y, ad.Var)
        np.testing.assert_allclose(tape.gradient(y.sum(), x), [3.0, 4.0])

    def test_root_must_be_scalar(self):
        """Test that a non-scalar root is rejected."""
        tape = ad.Tape()
        x = tape.variable(np.ones(3))
        with pytest.raises(UsageError, match="scalar"):
            tape.gradient(x * 2.0, x)

    def test_non_finite_root_names_first_bad_node(self):
        """Test that a non-finite objective raises a NumericError naming the node."""
        tape = ad.Tape()
        x = tape.variable(np.array([0.0, 1.0]))
        y = ad.log(x).sum()
        with pytest.raises(NumericError, match="node") as info:
            tape.gradient(y, x)
        assert info.value.node is not None
        assert tape.nodes[info.value.node].op == "log"

    def test_values_from_other_tape_rejected(self):
        """Test that mixing tapes raises a UsageError."""
        x = ad.Tape().variable(1.0)
        y = ad.Tape().variable(2.0)
        with pytest.raises(UsageError, match="different tapes"):
            x + y


def _random_expression(x, rng, depth=5):
    """Scalar built from a random chain of smooth tape operations on `x`."""
    ops = [
        ad.tanh,
        ad.sin,
        ad.cos,
        ad.sigmoid,
        ad.softplus,
        lambda v: ad.exp(ad.tanh(v)),
        lambda v: v * v,
        lambda v: v * rng.normal() + rng.normal(),
    ]
    value = x
    for _ in range(depth):
        value = ops[rng.integers(len(ops))](value)
        if rng.random() < 0.5:
            value = value + x * rng.normal()
    return (value * rng.normal(size=x.shape)).sum()


class TestLinearity:
    @pytest.mark.parametrize("seed", range(20))
    def test_gradient_of_sum_is_sum_of_gradients(self, seed):
        """Test grad(f + g) = grad f + grad g and grad(c f) = c grad f on random expressions."""
        rng = np.random.default_rng(seed)
        tape = ad.Tape()
        x = tape.variable(rng.normal(size=(3, 4)))
        f = _random_expression(x, rng)
        g = _random_expression(x, rng)
        c = rng.normal()
        grad_f = tape.gradient(f, x)
        grad_g = tape.gradient(g, x)
        np.testing.assert_allclose(tape.gradient(f + g, x), grad_f + grad_g, rtol=1e-10, atol=1e-12)
        np.testing.assert_allclose(tape.gradient(f * c, x), c * grad_f, rtol=1e-10, atol=1e-12)


class TestPrimitives:
    @pytest.mark.parametrize(
        "fn, derivative",
        [
            (ad.exp, np.exp),
            (ad.sin, np.cos),
            (ad.cos, lambda x: -np.sin(x)),
            (ad.tanh, lambda x: 1.0 - np.tanh(x) ** 2),
            (ad.sigmoid, lambda x: np.exp(-x) / (1.0 + np.exp(-x)) ** 2),
            (ad.softplus, lambda x: 1.0 / (1.0 + np.exp(-x))),
        ],
    )
    def test_elementwise_derivatives(self, fn, derivative):
        """Test each smooth primitive against its closed-form derivative."""
        points = np.array([-1.3, -0.2, 0.4, 2.1])
        tape = ad.Tape()
        x = tape.variable(points)
        np.testing.assert_allclose(tape.gradient(fn(x).sum(), x), derivative(points), rtol=1e-12)

    def test_numpy_inputs_return_arrays(self):
        """Test that primitives evaluate plain arrays without a tape."""
        out = ad.tanh(np.array([0.0, 1.0]))
        assert isinstance(out, np.ndarray)
        np.testing.assert_allclose(out, np.tanh([0.0, 1.0]))

    def test_relu_subgradient_at_zero(self):
        """Test that ReLU passes no gradient at exactly zero."""
        tape = ad.Tape()
        x = tape.variable(np.array([-1.0, 0.0, 2.0]))
        np.testing.assert_array_equal(tape.gradient(ad.relu(x).sum(), x), [0.0, 0.0, 1.0])

    def test_sqrt_at_zero_has_zero_slope(self):
        """Test that sqrt at 0 stays finite on the backward pass."""
        tape = ad.Tape()
        x = tape.variable(np.array([0.0, 4.0]))
        np.testing.assert_allclose(tape.gradient(ad.sqrt(x).sum(), x), [0.0, 0.25])

    def test_softplus_large_input_is_stable(self):
        """Test that softplus does not overflow."""
        assert np.isfinite(ad.softplus(np.array([800.0]))).all()

    def test_clip_routes_gradient_inside_bounds_only(self):
        """Test that clipped entries get zero gradient."""
        tape = ad.Tape()
        x = tape.variable(np.array([-2.0, 0.5, 3.0]))
        y = ad.clip(x, -1.0, 1.0).sum()
        np.testing.assert_array_equal(tape.gradient(y, x), [0.0, 1.0, 0.0])

    def test_stack_and_concatenate(self):
        """Test gradients through stack and concatenate."""
        tape = ad.Tape()
        a = tape.variable(np.array([1.0, 2.0]))
        b = tape.variable(np.array([3.0, 4.0]))
        stacked = ad.stack([a, b * 2.0], axis=1)
        joined = ad.concatenate([stacked, stacked * 3.0], axis=1)
        ga, gb = tape.gradient(joined.sum(), [a, b])
        np.testing.assert_allclose(ga, [4.0, 4.0])
        np.testing.assert_allclose(gb, [8.0, 8.0])

    def test_indexing_accumulates(self):
        """Test that repeated indices accumulate their adjoints."""
        tape = ad.Tape()
        x = tape.variable(np.array([1.0, 2.0, 3.0]))
        y = x[np.array([0, 0, 2])].sum()
        np.testing.assert_allclose(tape.gradient(y, x), [2.0, 0.0, 1.0])

    def test_matmul_matches_dense(self):
        """Test that matmul plus bias agrees with the fused dense node."""
        rng = np.random.default_rng(3)
        xv, wv, bv = rng.normal(size=(5, 3)), rng.normal(size=(3, 4)), rng.normal(size=4)

        tape = ad.Tape()
        w = tape.variable(wv)
        composed = ad.tanh(tape.constant(xv) @ w + bv).sum()
        expected = tape.gradient(composed, w)

        tape = ad.Tape()
        w = tape.variable(wv)
        fused = ad.dense(xv, w, bv, "tanh").sum()
        np.testing.assert_allclose(tape.gradient(fused, w), expected, rtol=1e-12)

    def test_matmul_rejects_3d(self):
        """Test that batched matmul beyond 2-D is refused."""
        tape = ad.Tape()
        with pytest.raises(UsageError):
            tape.variable(np.ones((2, 2, 2))) @ np.ones((2, 2))

    def test_dense_unknown_activation(self):
        """Test that dense rejects activations it does not know."""
        with pytest.raises(UsageError, match="activation"):
            ad.dense(np.ones(2), np.ones((2, 2)), np.zeros(2), "gelu")


class TestFiniteDifferenceCheck:
    def test_smooth_function_passes(self):
        """Test that a correct gradient yields a tiny relative error."""

        def f(tape, theta):
            return (ad.sin(theta) * theta).sum() + (theta @ theta) * 0.5

        error = ad.finite_difference_check(f, np.array([0.3, -1.2, 2.0]))
        assert error < 1e-6

    def test_relu_kink_is_skipped(self):
        """Test that coordinates sitting on a ReLU kink are excluded."""

        def f(tape, theta):
            return ad.relu(theta).sum()

        assert ad.finite_difference_check(f, np.array([0.0, 1.0, -1.0])) < 1e-8

    def test_step_must_be_positive(self):
        with pytest.raises(UsageError):
            ad.finite_difference_check(lambda t, x: x.sum(), np.ones(2), step=0.0)
