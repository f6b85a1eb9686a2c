"""Exception hierarchy shared by all modules."""


class BilliardError(Exception):
    """Base class for every error raised by the package."""


class PreconditionError(BilliardError, ValueError):
    """An argument violates a documented precondition."""


class InvalidConfiguration(BilliardError):
    """Obstacle configuration is malformed, overlapping or too small."""


class TangentHit(BilliardError):
    """A ray meets a boundary (nearly) tangentially."""


class Escape(BilliardError):
    """A ray misses every obstacle."""


class ReflectionAtBoundaryTime(BilliardError):
    """Requested flow time coincides with a reflection time."""


class NonAdmissibleWord(BilliardError):
    """Symbol word has equal adjacent symbols or symbols out of range."""


class MinimizationStalled(BilliardError):
    """Orbit length minimization did not reach the gradient tolerance."""


class ItineraryChanged(BilliardError):
    """A perturbed trajectory followed a different obstacle sequence."""


class InconsistentCurvature(BilliardError):
    """Normal curvature exceeds the norm of the shape operator image."""


class DegenerateCocycle(BilliardError):
    """A cocycle factor is singular."""


class WindowTooShort(BilliardError):
    """Finite window too short for the requested convergence."""


class InsufficientData(BilliardError):
    """Not enough uncensored points to fit a rate."""
