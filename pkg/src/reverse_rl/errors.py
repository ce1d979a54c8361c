"""Exception types raised across the package."""


class ReverseRLError(Exception):
    """Base class for all library errors."""


class NotErgodic(ReverseRLError):
    pass


class SingularSystem(ReverseRLError):
    pass


class AssumptionViolated(ReverseRLError):
    """The chain is not ergodic or ``I - P^T Gamma`` is not invertible."""


class RankDeficientFeatures(ReverseRLError):
    pass


class CoverageViolation(ReverseRLError):
    """The target policy puts mass on an action the behavior policy never takes."""


class SupportExplosion(ReverseRLError):
    pass


class IncompleteGrid(ReverseRLError):
    pass
