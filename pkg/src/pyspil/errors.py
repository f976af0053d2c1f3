from typing import Optional


class SpilError(Exception):
    """Base class for every error raised by pyspil."""


class UsageError(SpilError, ValueError):
    """Raised when a caller passes arguments that violate an operation's preconditions."""


class NumericError(SpilError, ArithmeticError):
    """A non-finite value showed up in a rollout, a tape or a training iteration."""

    def __init__(
        self,
        message: str,
        *,
        iteration: Optional[int] = None,
        trajectory: Optional[int] = None,
        step: Optional[int] = None,
        node: Optional[int] = None,
    ):
        self.iteration = iteration
        self.trajectory = trajectory
        self.step = step
        self.node = node
        if iteration is not None:
            message = f"iteration {iteration}: {message}"
        super().__init__(message)

    def at_iteration(self, iteration: int) -> "NumericError":
        """Copy of this error tagged with the training iteration it occurred in."""
        return NumericError(
            str(self),
            iteration=iteration,
            trajectory=self.trajectory,
            step=self.step,
            node=self.node,
        )
