"""Exception types raised across the package."""


class MfvvError(Exception):
    """Base class for all package errors."""


class RejectedSpec(MfvvError):
    """A problem specification violates one of the structural assumptions."""

    def __init__(self, assumption, detail=""):
        self.assumption = assumption
        msg = f"{assumption} violated"
        if detail:
            msg = f"{msg}: {detail}"
        super().__init__(msg)


class NonFiniteEvaluation(MfvvError, FloatingPointError):
    """A user callback returned NaN or an infinite value."""


class UnknownScenario(MfvvError, KeyError):
    pass


class DimensionMismatch(MfvvError, ValueError):
    pass


class SizeLimit(MfvvError, ValueError):
    pass


class GridMismatch(MfvvError, ValueError):
    pass


class WitnessNotLipschitz(MfvvError, ValueError):
    pass


class BlowUp(MfvvError, FloatingPointError):
    """Particle states left the admissible range during time stepping."""


class CflViolation(MfvvError, ValueError):
    pass


class MassLoss(MfvvError, ArithmeticError):
    pass


class NoConvergence(MfvvError, RuntimeError):
    """An iterative solver hit its iteration cap.

    The partially converged object and the residual history are attached so
    callers can still report on them.
    """

    def __init__(self, msg, history=None, state=None):
        super().__init__(msg)
        self.history = list(history or [])
        self.state = state


class ConfigError(MfvvError, ValueError):
    """Malformed or inconsistent run configuration."""
