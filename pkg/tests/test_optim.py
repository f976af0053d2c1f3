import numpy as np
import pytest

from pyspil.models import OptimizerKind
from pyspil.optim import Adam, GradientStep, Optimizer


@pytest.fixture
def reward_grad():
    return np.array([2.0e3, -5.0e2, 1.0e3])


class TestCreate:
    @pytest.mark.parametrize("kind,cls", [(OptimizerKind.ADAM, Adam), (OptimizerKind.SGD, GradientStep)])
    def test_kind_selects_rule(self, kind, cls):
        assert isinstance(Optimizer.create(kind, 0.1), cls)

    def test_accepts_plain_strings(self):
        assert isinstance(Optimizer.create("adam", 0.1), Adam)


class TestGradientStep:
    def test_blend_is_weighted_sum(self, reward_grad):
        grad_phi = np.array([1.0, 2.0, -3.0])
        lam = 4.0
        new = GradientStep(0.01).blend(np.zeros(3), [reward_grad, grad_phi], [1 / (1 + lam), lam / (1 + lam)])
        np.testing.assert_allclose(new, 0.01 * (reward_grad + lam * grad_phi) / (1 + lam), rtol=1e-12)

    def test_descend_moves_against_gradient(self):
        new = GradientStep(0.5).descend(np.array([1.0, 1.0]), np.array([2.0, -2.0]))
        np.testing.assert_allclose(new, [0.0, 2.0])


class TestAdam:
    def test_first_step_has_learning_rate_magnitude(self, reward_grad):
        new = Adam(0.1).ascend(np.zeros(3), reward_grad)
        np.testing.assert_allclose(new, 0.1 * np.sign(reward_grad), rtol=1e-9)

    def test_tiny_safety_gradient_outweighs_large_reward_gradient(self, reward_grad):
        """Test that a large lambda lets a safety gradient far smaller than the reward gradient set the sign."""
        grad_phi = -1e-4 * np.sign(reward_grad)
        lam = 9.0
        new = Adam(0.1).blend(np.zeros(3), [reward_grad, grad_phi], [1 / (1 + lam), lam / (1 + lam)])
        np.testing.assert_array_equal(np.sign(new), -np.sign(reward_grad))
        np.testing.assert_allclose(new, -0.08 * np.sign(reward_grad), rtol=1e-3)

    def test_lambda_scales_the_reward_step(self, reward_grad):
        """Test that with no safety gradient the update shrinks by 1 / (1 + lambda)."""
        lam = 3.0
        new = Adam(0.1).blend(np.zeros(3), [reward_grad, np.zeros(3)], [1 / (1 + lam), lam / (1 + lam)])
        np.testing.assert_allclose(new, 0.1 / (1 + lam) * np.sign(reward_grad), rtol=1e-9)

    def test_terms_keep_separate_moments(self, reward_grad):
        optimizer = Adam(0.1)
        values = np.zeros(3)
        for _ in range(3):
            values = optimizer.blend(values, [reward_grad, np.ones(3)], [0.5, 0.5])
        assert optimizer.t == 3
        assert set(optimizer.m) == {0, 1}
        np.testing.assert_allclose(optimizer.v[1], (1 - 0.999**3) * np.ones(3))

    def test_zero_weight_term_still_tracks_moments(self, reward_grad):
        optimizer = Adam(0.1)
        new = optimizer.blend(np.zeros(3), [reward_grad, np.ones(3)], [1.0, 0.0])
        np.testing.assert_allclose(new, 0.1 * np.sign(reward_grad), rtol=1e-9)
        np.testing.assert_allclose(optimizer.m[1], 0.1 * np.ones(3))
