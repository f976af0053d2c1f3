"""Feedback control of the balancing weight lambda.

The safe probability is the controlled output and 1 - delta its set point:

    penalty     lambda = K_P (Delta)+                      (P control)
    lagrangian  I <- (I + K_I Delta)+, lambda = I          (I control, dual ascent)
    pil         I <- (I + Delta)+,     lambda = (K_P Delta + K_I I)+
    spil        I <- (I + K_S(Delta) Delta)+, lambda as in pil

with Delta = 1 - delta - p_s. K_S is the integral separation gain, which blocks
or slows the integrator while the violation is large.
"""

from dataclasses import dataclass, field
from typing import Iterable, List

from pyspil.errors import UsageError
from pyspil.models import MultiplierConfig, MultiplierMode, SeparationConfig

# Delta = 1 - delta - p_s carries rounding error (0.9 - 0.85 > 0.05 in binary), so the
# thresholds are compared within this tolerance.
THRESHOLD_TOLERANCE = 1e-12


@dataclass(frozen=True)
class MultiplierState:
    integral: float = 0.0
    lam: float = 0.0
    delta_err: float = 0.0


def separation_gain(delta_err: float, separation: SeparationConfig) -> float:
    """K_S: 0 above eps1, beta on (eps2, eps1], 1 at or below eps2."""
    if delta_err > separation.eps1 + THRESHOLD_TOLERANCE:
        return 0.0
    if delta_err > separation.eps2 + THRESHOLD_TOLERANCE:
        return separation.beta
    return 1.0


def update(state: MultiplierState, p_s: float, config: MultiplierConfig) -> MultiplierState:
    """Advance the controller by one iteration given the latest safe probability.

    Raises:
        UsageError: p_s lies outside [0, 1].
    """
    if not 0.0 <= p_s <= 1.0:
        raise UsageError(f"safe probability must lie in [0, 1], got {p_s}")
    delta_err = 1.0 - config.delta - p_s

    if config.mode == MultiplierMode.PENALTY:
        return MultiplierState(0.0, config.k_p * max(delta_err, 0.0), delta_err)

    if config.mode == MultiplierMode.LAGRANGIAN:
        integral = max(state.integral + config.k_i * delta_err, 0.0)
        return MultiplierState(integral, integral, delta_err)

    gain = 1.0
    if config.mode == MultiplierMode.SPIL:
        gain = separation_gain(delta_err, config.separation)
    integral = max(state.integral + gain * delta_err, 0.0)
    lam = max(config.k_p * delta_err + config.k_i * integral, 0.0)
    return MultiplierState(integral, lam, delta_err)


@dataclass
class MultiplierController:
    """Stateful wrapper around `update` for one training run."""

    config: MultiplierConfig
    state: MultiplierState = field(default_factory=MultiplierState)
    history: List[MultiplierState] = field(default_factory=list)

    def step(self, p_s: float) -> MultiplierState:
        self.state = update(self.state, p_s, self.config)
        self.history.append(self.state)
        return self.state

    def run(self, safe_probabilities: Iterable[float]) -> List[MultiplierState]:
        return [self.step(p_s) for p_s in safe_probabilities]
