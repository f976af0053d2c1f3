import numpy as np
import pytest
from pydantic import ValidationError

from pyspil.errors import UsageError
from pyspil.models import MultiplierConfig, MultiplierMode, SeparationConfig
from pyspil.multiplier import (
    MultiplierController,
    MultiplierState,
    separation_gain,
    update,
)

SEPARATION = SeparationConfig(beta=0.3, eps1=0.2, eps2=0.05)


def spil(**kwargs):
    kwargs.setdefault("separation", SEPARATION)
    return MultiplierConfig(mode=MultiplierMode.SPIL, **kwargs)


@pytest.fixture
def p_s_sequence():
    return np.random.default_rng(0).uniform(0.0, 1.0, 200)


class TestMultiplierConfig:
    def test_penalty_requires_no_integral(self):
        with pytest.raises(ValidationError, match="penalty"):
            MultiplierConfig(mode="penalty", k_p=12.0, k_i=0.6)

    def test_lagrangian_requires_no_proportional(self):
        with pytest.raises(ValidationError, match="lagrangian"):
            MultiplierConfig(mode="lagrangian", k_p=1.0, k_i=18.0)

    def test_spil_requires_separation(self):
        with pytest.raises(ValidationError, match="separation"):
            MultiplierConfig(mode="spil")

    def test_separation_thresholds_ordered(self):
        with pytest.raises(ValidationError, match="eps1 > eps2"):
            SeparationConfig(eps1=0.05, eps2=0.2)

    def test_negative_gain_rejected(self):
        with pytest.raises(ValidationError):
            MultiplierConfig(mode="pil", k_p=-1.0)


class TestSeparationGain:
    @pytest.mark.parametrize(
        "delta_err, expected",
        [(0.5, 0.0), (0.2, 0.3), (0.1, 0.3), (0.05, 1.0), (-0.001, 1.0)],
    )
    def test_branches(self, delta_err, expected):
        assert separation_gain(delta_err, SEPARATION) == expected


class TestUpdate:
    def test_spil_example(self):
        """Test the hand-evaluated SPIL step from an empty integrator."""
        state = update(MultiplierState(), 0.85, spil(k_p=15.0, k_i=0.6, delta=0.1))
        assert state.delta_err == pytest.approx(0.05, abs=1e-12)
        assert state.integral == pytest.approx(0.05, abs=1e-12)
        assert state.lam == pytest.approx(0.78, abs=1e-12)

    def test_penalty_clamps_at_zero(self):
        config = MultiplierConfig(mode="penalty", k_p=12.0, k_i=0.0, delta=0.1)
        state = update(MultiplierState(), 0.95, config)
        assert state.delta_err == pytest.approx(-0.05, abs=1e-12)
        assert state.lam == 0.0
        assert state.integral == 0.0

    def test_spil_blocks_integrator_when_fully_unsafe(self):
        config = spil(k_p=15.0, k_i=0.6, delta=0.001)
        state = update(MultiplierState(), 0.0, config)
        assert state.delta_err == pytest.approx(0.999, abs=1e-12)
        assert state.integral == 0.0
        assert state.lam == pytest.approx(15.0 * 0.999, abs=1e-12)

    def test_lagrangian_weight_is_integral(self):
        config = MultiplierConfig(mode="lagrangian", k_p=0.0, k_i=18.0, delta=0.1)
        state = update(MultiplierState(), 0.8, config)
        assert state.integral == pytest.approx(1.8, abs=1e-12)
        assert state.lam == state.integral

    @pytest.mark.parametrize("p_s", [-0.01, 1.01, float("nan")])
    def test_rejects_out_of_range(self, p_s):
        with pytest.raises(UsageError, match="safe probability"):
            update(MultiplierState(), p_s, spil())

    @pytest.mark.parametrize("mode", list(MultiplierMode))
    def test_non_negative(self, mode, p_s_sequence):
        kwargs = {"mode": mode, "k_p": 15.0, "k_i": 0.6, "separation": SEPARATION}
        if mode == MultiplierMode.PENALTY:
            kwargs["k_i"] = 0.0
        if mode == MultiplierMode.LAGRANGIAN:
            kwargs["k_p"] = 0.0
        for state in MultiplierController(MultiplierConfig(**kwargs)).run(p_s_sequence):
            assert state.integral >= 0.0
            assert state.lam >= 0.0

    def test_pil_without_integral_is_penalty(self, p_s_sequence):
        pil = MultiplierController(MultiplierConfig(mode="pil", k_p=7.5, k_i=0.0))
        penalty = MultiplierController(MultiplierConfig(mode="penalty", k_p=7.5, k_i=0.0))
        assert [s.lam for s in pil.run(p_s_sequence)] == pytest.approx(
            [s.lam for s in penalty.run(p_s_sequence)], abs=1e-12
        )

    def test_pil_without_proportional_is_lagrangian(self, p_s_sequence):
        """Test that pil(K_P = 0) and lagrangian agree once the integral is rescaled by K_I."""
        pil = MultiplierController(MultiplierConfig(mode="pil", k_p=0.0, k_i=0.6))
        lagrangian = MultiplierController(MultiplierConfig(mode="lagrangian", k_p=0.0, k_i=0.6))
        pil_states = pil.run(p_s_sequence)
        lagrangian_states = lagrangian.run(p_s_sequence)
        assert [s.lam for s in pil_states] == pytest.approx([s.lam for s in lagrangian_states], abs=1e-12)
        assert [0.6 * s.integral for s in pil_states] == pytest.approx(
            [s.integral for s in lagrangian_states], abs=1e-12
        )

    def test_separation_never_exceeds_pil_integral(self, p_s_sequence):
        spil_states = MultiplierController(spil(delta=0.05)).run(p_s_sequence)
        pil_states = MultiplierController(MultiplierConfig(mode="pil", delta=0.05)).run(p_s_sequence)
        for a, b in zip(spil_states, pil_states):
            assert a.integral <= b.integral + 1e-12

    @pytest.mark.parametrize("mode", [MultiplierMode.PIL, MultiplierMode.SPIL])
    def test_steady_state_is_fixed_point(self, mode):
        config = MultiplierConfig(mode=mode, delta=0.25, separation=SEPARATION)
        start = MultiplierState(integral=2.0, lam=config.k_i * 2.0)
        state = update(start, 0.75, config)
        assert state.delta_err == 0.0
        assert state.integral == start.integral
        assert state.lam == pytest.approx(start.lam, abs=1e-15)

    @pytest.mark.parametrize("mode", [MultiplierMode.PIL, MultiplierMode.SPIL])
    def test_anti_windup_recovery(self, mode):
        """Test that an over-safe run drains the integral by delta per step until zero."""
        config = MultiplierConfig(mode=mode, delta=0.001, separation=SEPARATION)
        controller = MultiplierController(config, MultiplierState(integral=0.0035))
        integrals = [s.integral for s in controller.run([1.0] * 6)]
        assert integrals[:3] == pytest.approx([0.0025, 0.0015, 0.0005], abs=1e-12)
        assert integrals[3:] == [0.0, 0.0, 0.0]

    def test_vacuous_constraint_keeps_lambda_zero(self, p_s_sequence):
        for config in (
            spil(delta=1.0),
            MultiplierConfig(mode="pil", delta=1.0),
            MultiplierConfig(mode="penalty", k_i=0.0, delta=1.0),
        ):
            assert all(s.lam == 0.0 for s in MultiplierController(config).run(p_s_sequence))


class TestMultiplierController:
    def test_history_records_every_step(self):
        controller = MultiplierController(spil())
        controller.run([0.5, 0.7, 0.9])
        assert len(controller.history) == 3
        assert controller.state is controller.history[-1]

    def test_is_a_pure_fold(self, p_s_sequence):
        """Test that replaying the same p_s sequence reproduces the states."""
        first = MultiplierController(spil()).run(p_s_sequence)
        second = MultiplierController(spil()).run(p_s_sequence)
        assert first == second
