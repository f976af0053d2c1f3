"""Joint safe probability: Monte-Carlo estimate and its smooth surrogate.

Margins are z = -h, positive on the safe side. The surrogate factor is

    phi(z) = (1 + b1 tau) / (1 + b2 tau exp(-z / tau))

evaluated as (1 + b1 tau) * exp(-softplus(log(b2 tau) - z / tau)), which never
overflows.
"""

import math
from typing import Union

import numpy as np

from pyspil import autodiff as ad
from pyspil.errors import UsageError
from pyspil.models import SurrogateConfig

# Lower clamp on each surrogate factor so deep violations cannot underflow the product.
FACTOR_FLOOR = 1e-300


def _logit(z, config: SurrogateConfig):
    return math.log(config.b2 * config.tau) - z / config.tau


def phi(z: Union[float, np.ndarray], config: SurrogateConfig) -> Union[float, np.ndarray]:
    z = np.asarray(z, dtype=np.float64)
    out = (1.0 + config.b1 * config.tau) * np.exp(-np.logaddexp(0.0, _logit(z, config)))
    return float(out) if out.ndim == 0 else out


def phi_grad(z: Union[float, np.ndarray], config: SurrogateConfig) -> Union[float, np.ndarray]:
    """d phi / d z, never negative."""
    c = _logit(np.asarray(z, dtype=np.float64), config)
    # sigma(c) * (1 - sigma(c)) written with two stable softplus terms
    spread = np.exp(-np.logaddexp(0.0, -c) - np.logaddexp(0.0, c))
    out = (1.0 + config.b1 * config.tau) / config.tau * spread
    return float(out) if out.ndim == 0 else out


def log_phi(z: ad.Operand, config: SurrogateConfig):
    """log phi(z) for arrays or tape variables."""
    return math.log(1.0 + config.b1 * config.tau) - ad.softplus(_logit(z, config))


def _check_trace(trace) -> None:
    values = ad.value_of(trace)
    if values.ndim != 2 or values.shape[0] < 1:
        raise UsageError(f"a safety trace must be (M, N) with M >= 1, got {values.shape}")
    if not np.all(np.isfinite(values)):
        raise UsageError("safety trace contains non-finite values")


def surrogate_joint(trace_row: np.ndarray, config: SurrogateConfig) -> Union[float, np.ndarray]:
    """Product over steps of phi(-h_t); rows of a 2-D trace give one product each."""
    h = np.asarray(trace_row, dtype=np.float64)
    if not np.all(np.isfinite(h)):
        raise UsageError("safety trace contains non-finite values")
    factors = np.maximum(phi(-h, config), FACTOR_FLOOR)
    out = np.prod(factors, axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def surrogate_mean(trace: ad.Operand, config: SurrogateConfig):
    """Batch mean of the per-row surrogate products, differentiable on a tape.

    On a tape the product is taken in log space, exp(sum_t max(log phi, log floor)),
    which equals the clamped direct product.
    """
    _check_trace(trace)
    if not isinstance(trace, ad.Var):
        return float(np.mean(surrogate_joint(trace, config)))
    logs = ad.maximum(log_phi(-trace, config), math.log(FACTOR_FLOOR))
    return ad.exp(logs.sum(axis=1)).mean()


def estimate_safe_prob(trace: np.ndarray) -> float:
    """Fraction of rows with h < 0 at every step (m / M)."""
    _check_trace(trace)
    values = ad.value_of(trace)
    return float(np.mean(np.all(values < 0, axis=1)))
