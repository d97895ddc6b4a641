"""Exception types shared across the package."""


class TaskOedError(Exception):
    """Base class for all package errors."""


class ConfigurationError(TaskOedError):
    """Bad dimensions, invalid constants, or malformed configuration."""


class DivergedRolloutError(TaskOedError):
    """A rollout produced a non-finite or absurdly large state.

    Carries the step index at which divergence was detected so unstable
    controllers can be traced, plus the finite prefix of the episode (when
    available) so live-system budget accounting can keep the partial data.
    """

    def __init__(self, step: int, message: str = "", partial=None):
        self.step = step
        self.partial = partial
        super().__init__(message or f"state diverged at step {step}")


class IllConditionedError(TaskOedError):
    """A linear solve was refused because the system is numerically singular."""


class SingularCovarianceError(TaskOedError):
    """A covariance matrix required to be positive definite is singular."""


class SynthesisFailedError(TaskOedError):
    """Controller synthesis could not produce a usable policy."""


class HessianFailedError(TaskOedError):
    """A finite-difference evaluation diverged.

    Carries the vec(A) coordinate pair being probed when the failure occurred.
    """

    def __init__(self, coords: tuple, message: str = ""):
        self.coords = coords
        super().__init__(message or f"objective evaluation diverged at coordinates {coords}")


class DesignFailedError(TaskOedError):
    """The experiment-design objective produced a non-finite gradient."""


class MinEigTimeoutError(TaskOedError):
    """Minimum-eigenvalue collection hit its episode cap before terminating.

    Carries the best minimum eigenvalue achieved and the partial result so
    callers may degrade gracefully.
    """

    def __init__(self, best_lambda_min: float, partial=None, message: str = ""):
        self.best_lambda_min = best_lambda_min
        self.partial = partial
        super().__init__(
            message or f"episode cap reached with lambda_min={best_lambda_min:.3g}"
        )


class BudgetExhaustedError(TaskOedError):
    """The live-system episode budget has been fully consumed."""
