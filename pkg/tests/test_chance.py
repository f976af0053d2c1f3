import numpy as np
import pytest
from pydantic import ValidationError

from pyspil import autodiff as ad
from pyspil import chance
from pyspil.errors import UsageError
from pyspil.models import SurrogateConfig

CAR_SURROGATE = SurrogateConfig(tau=1e-3, b1=1.0, b2=0.45)
ROBOT_SURROGATE = SurrogateConfig(tau=7e-2, b1=1.0, b2=0.45)


class TestSurrogateConfig:
    @pytest.mark.parametrize(
        "kwargs, message",
        [
            ({"tau": 0.0}, "tau"),
            ({"tau": 1.0}, "tau"),
            ({"b1": -1.0}, "b1"),
            ({"b2": 0.5}, "b2"),
            ({"b2": 0.0}, "b2"),
        ],
    )
    def test_invalid(self, kwargs, message):
        with pytest.raises(ValidationError, match=message):
            SurrogateConfig(**kwargs)


class TestPhi:
    def test_safe_margin_saturates(self):
        assert chance.phi(1.0, CAR_SURROGATE) == pytest.approx(1.001, abs=1e-9)

    def test_zero_margin(self):
        assert chance.phi(0.0, CAR_SURROGATE) == pytest.approx(1.001 / 1.00045, rel=1e-12)

    def test_unsafe_margin_vanishes_without_overflow(self):
        with np.errstate(over="raise"):
            assert chance.phi(-1.0, CAR_SURROGATE) == pytest.approx(0.0, abs=1e-12)

    def test_array_input(self):
        out = chance.phi(np.array([-1.0, 0.0, 1.0]), CAR_SURROGATE)
        assert out.shape == (3,)

    @pytest.mark.parametrize("config", [CAR_SURROGATE, ROBOT_SURROGATE], ids=["car", "robot"])
    def test_monotone_over_random_pairs(self, config):
        rng = np.random.default_rng(0)
        z = rng.uniform(-50 * config.tau, 50 * config.tau, size=(10_000, 2))
        z.sort(axis=1)
        values = chance.phi(z, config)
        assert np.all(values[:, 0] <= values[:, 1])

    @pytest.mark.parametrize("config", [CAR_SURROGATE, ROBOT_SURROGATE], ids=["car", "robot"])
    def test_range(self, config):
        """Test 0 < phi < 1 + b1 tau where the bounds are not reached by rounding."""
        rng = np.random.default_rng(1)
        z = rng.uniform(-20 * config.tau, 20 * config.tau, size=10_000)
        values = chance.phi(z, config)
        assert np.all(values > 0)
        assert np.all(values < 1 + config.b1 * config.tau)
        wide = chance.phi(rng.uniform(-10.0, 10.0, size=10_000), config)
        assert np.all((wide >= 0) & (wide <= 1 + config.b1 * config.tau))

    @pytest.mark.parametrize("z, expected", [(0.5, 1.0), (-0.5, 0.0)])
    def test_tracks_indicator_as_tau_shrinks(self, z, expected):
        errors = [
            abs(chance.phi(z, SurrogateConfig(tau=tau)) - expected) for tau in (1e-1, 1e-2, 1e-3)
        ]
        assert errors[0] > errors[1] > errors[2]
        assert errors[2] < 2e-3


class TestPhiGrad:
    def test_saturates_to_zero(self):
        assert chance.phi_grad(10.0, ROBOT_SURROGATE) == pytest.approx(0.0, abs=1e-12)

    def test_matches_finite_difference(self):
        step = 1e-6
        numeric = (chance.phi(step, ROBOT_SURROGATE) - chance.phi(-step, ROBOT_SURROGATE)) / (2 * step)
        assert chance.phi_grad(0.0, ROBOT_SURROGATE) == pytest.approx(numeric, rel=1e-6)

    def test_deep_unsafe_without_overflow(self):
        with np.errstate(over="raise"):
            assert chance.phi_grad(-10.0, CAR_SURROGATE) == pytest.approx(0.0, abs=1e-12)

    def test_never_negative(self):
        z = np.linspace(-1.0, 1.0, 2001)
        assert np.all(chance.phi_grad(z, CAR_SURROGATE) >= 0)

    def test_log_phi_on_tape_matches(self):
        """Test that the tape form of log phi has derivative phi'/phi."""
        z = np.array([-0.01, 0.0, 0.02])
        tape = ad.Tape()
        var = tape.variable(z)
        grad = tape.gradient(chance.log_phi(var, ROBOT_SURROGATE).sum(), var)
        np.testing.assert_allclose(
            grad, chance.phi_grad(z, ROBOT_SURROGATE) / chance.phi(z, ROBOT_SURROGATE), rtol=1e-10
        )


class TestSurrogateJoint:
    def test_all_safe_is_power(self):
        trace = np.full(40, -100.0)
        assert chance.surrogate_joint(trace, CAR_SURROGATE) == pytest.approx(1.001**40, rel=1e-12)

    def test_one_unsafe_step_vanishes(self):
        trace = np.full(40, -100.0)
        trace[17] = 5.0
        assert chance.surrogate_joint(trace, CAR_SURROGATE) == pytest.approx(0.0, abs=1e-250)

    def test_single_step_is_phi(self):
        assert chance.surrogate_joint(np.array([-0.0004]), CAR_SURROGATE) == pytest.approx(
            chance.phi(0.0004, CAR_SURROGATE)
        )

    def test_rejects_non_finite(self):
        with pytest.raises(UsageError, match="non-finite"):
            chance.surrogate_joint(np.array([0.0, np.inf]), CAR_SURROGATE)

    def test_bounds(self):
        rng = np.random.default_rng(2)
        trace = rng.normal(scale=0.01, size=(500, 10))
        values = chance.surrogate_joint(trace, CAR_SURROGATE)
        assert np.all((values >= 0) & (values <= (1 + CAR_SURROGATE.b1 * CAR_SURROGATE.tau) ** 10 * (1 + 1e-12)))

    def test_tape_mean_matches_direct_product(self):
        rng = np.random.default_rng(3)
        trace = rng.normal(scale=0.1, size=(32, 5))
        direct = chance.surrogate_mean(trace, ROBOT_SURROGATE)
        tape = ad.Tape()
        on_tape = chance.surrogate_mean(tape.variable(trace), ROBOT_SURROGATE)
        assert on_tape.item() == pytest.approx(direct, rel=1e-12)

    def test_tape_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        trace = rng.normal(scale=0.05, size=(8, 5))
        error = ad.finite_difference_check(
            lambda tape, h: chance.surrogate_mean(h, ROBOT_SURROGATE), trace, step=1e-7
        )
        assert error < 1e-4


class TestEstimateSafeProb:
    def test_fraction_of_safe_rows(self):
        trace = -np.ones((4096, 3))
        trace[3686:, 1] = 0.5
        assert chance.estimate_safe_prob(trace) == pytest.approx(3686 / 4096)

    def test_all_safe(self):
        assert chance.estimate_safe_prob(-np.ones((10, 40))) == 1.0

    def test_boundary_counts_unsafe(self):
        assert chance.estimate_safe_prob(np.array([[-1.0, 0.0]])) == 0.0

    def test_permutation_and_duplication_invariant(self):
        rng = np.random.default_rng(5)
        trace = rng.normal(loc=-1.5, size=(200, 4))
        base = chance.estimate_safe_prob(trace)
        assert chance.estimate_safe_prob(trace[rng.permutation(200)]) == base
        assert chance.estimate_safe_prob(np.vstack([trace, trace])) == base

    def test_binomial_concentration(self):
        """Test that 99% of estimates at M = 4096 lie within 0.014 of p = 0.9."""
        rng = np.random.default_rng(6)
        hits = 0
        for _ in range(1000):
            safe = rng.random(4096) < 0.9
            trace = np.where(safe, -1.0, 1.0)[:, None]
            hits += abs(chance.estimate_safe_prob(trace) - 0.9) <= 0.014
        assert hits >= 990

    @pytest.mark.parametrize("trace", [np.zeros((0, 3)), np.zeros(5), np.array([[np.nan]])])
    def test_rejects_bad_traces(self, trace):
        with pytest.raises(UsageError):
            chance.estimate_safe_prob(trace)
