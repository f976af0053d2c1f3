from abc import ABC, abstractmethod
from typing import Dict, Sequence

import numpy as np

from pyspil.models import OptimizerKind


class Optimizer(ABC):
    """A parameter update rule applied to one or more weighted gradient terms.

    `blend` takes the per-term step of every gradient and mixes them with the
    given weights, so the weights decide each term's share of the update
    whatever the gradients' scales are.
    """

    def __init__(self, lr: float):
        self.lr = lr

    @abstractmethod
    def _term_step(self, term: int, grad: np.ndarray) -> np.ndarray:
        """Step direction contributed by gradient term `term`."""

    def _advance(self) -> None:
        pass

    def blend(
        self, values: np.ndarray, directions: Sequence[np.ndarray], weights: Sequence[float]
    ) -> np.ndarray:
        """New parameters after one ascent step on sum_i weights[i] * step(directions[i])."""
        self._advance()
        step = np.zeros_like(values)
        for term, (direction, weight) in enumerate(zip(directions, weights)):
            step = step + weight * self._term_step(term, direction)
        return values + self.lr * step

    def ascend(self, values: np.ndarray, direction: np.ndarray) -> np.ndarray:
        return self.blend(values, [direction], [1.0])

    def descend(self, values: np.ndarray, grad: np.ndarray) -> np.ndarray:
        return self.ascend(values, -grad)

    @classmethod
    def create(cls, kind: OptimizerKind, lr: float) -> "Optimizer":
        if OptimizerKind(kind) == OptimizerKind.ADAM:
            return Adam(lr)
        return GradientStep(lr)


class GradientStep(Optimizer):
    def _term_step(self, term, grad):
        return grad


class Adam(Optimizer):
    """Adaptive-moment step with bias-corrected first and second moments.

    Each gradient term keeps its own moment estimates, so a term with a tiny
    gradient still moves the parameters by its full weighted share.
    """

    def __init__(self, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        super().__init__(lr)
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m: Dict[int, np.ndarray] = {}
        self.v: Dict[int, np.ndarray] = {}

    def _advance(self):
        self.t += 1

    def _term_step(self, term, grad):
        m = self.m.get(term, np.zeros_like(grad))
        v = self.v.get(term, np.zeros_like(grad))
        self.m[term] = m = self.b1 * m + (1 - self.b1) * grad
        self.v[term] = v = self.b2 * v + (1 - self.b2) * grad * grad
        mhat = m / (1 - self.b1**self.t)
        vhat = v / (1 - self.b2**self.t)
        return mhat / (np.sqrt(vhat) + self.eps)
