"""Exception hierarchy shared by all modules."""


class GhostGameError(Exception):
    """Base class for every error raised by the package."""


class ParameterError(GhostGameError, ValueError):
    """Invalid model or game parameters."""


class NonPositiveSigma(ParameterError):
    pass


class DriftNotBelowRate(ParameterError):
    pass


class NegativeRate(ParameterError):
    pass


class ZeroRate(ParameterError):
    """r = 0 makes the perpetual call value infinite, so it is rejected."""


class InvalidPayoff(ParameterError):
    pass


class InvalidGame(ParameterError):
    pass


class InsufficientHorizon(GhostGameError):
    pass


class InclusionViolated(GhostGameError):
    pass


class OrderingViolated(GhostGameError):
    pass


class NoRoot(GhostGameError):
    pass


class QuadratureFailure(GhostGameError):
    pass


class OutOfRange(GhostGameError, ValueError):
    pass


class FactorOutOfRange(GhostGameError):
    pass


class DenominatorNearZero(GhostGameError):
    pass


class GridMismatch(GhostGameError):
    pass


class HorizonTooShort(GhostGameError):
    pass


class ConfigError(GhostGameError):
    pass
