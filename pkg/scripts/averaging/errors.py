"""
Exception hierarchy for the averaging toolkit
"""


class AveragingError(Exception):
    """Base class for every error raised by the toolkit"""


class ConfigError(AveragingError, ValueError):
    """Experiment configuration is malformed or fails schema validation"""


# Matrix / state construction

class NonSquare(AveragingError, ValueError):
    pass


class NegativeEntry(AveragingError, ValueError):
    pass


class NonFiniteEntry(AveragingError, ValueError):
    pass


class RowSumOutOfTolerance(AveragingError, ValueError):
    pass


class DimensionMismatch(AveragingError, ValueError):
    pass


class GammaOutOfRange(AveragingError, ValueError):
    pass


class IndexOutOfRange(AveragingError, IndexError):
    pass


# Chains

class DisconnectedGraph(AveragingError, ValueError):
    pass


class BaseNotDoublyStochastic(AveragingError, ValueError):
    pass


class POutOfRange(AveragingError, ValueError):
    pass


class ConditionalLawUnavailable(AveragingError):
    """Chain exposes neither an analytic conditional expectation nor resampling"""


# Trajectories

class MissingLogs(AveragingError):
    """An audit needs matrices or inputs that the run did not log"""


# Objectives and schedules

class DeltaNonpositive(AveragingError, ValueError):
    pass


class EmptyPieces(AveragingError, ValueError):
    pass


class UnboundedSubgradient(AveragingError, ValueError):
    pass


class BetaOutOfRange(AveragingError, ValueError):
    pass


class KNonpositive(AveragingError, ValueError):
    pass


class OptimizerOnBoundary(AveragingError):
    """Grid minimum sits on the search box boundary; enlarge the box"""


# Diagnostics

class AllPathsDegenerate(AveragingError):
    """Mean diameter is identically 0 or 1, so no decay rate can be fitted"""


class WindowOrderViolation(AveragingError, ValueError):
    pass


class TooShort(AveragingError, ValueError):
    pass


class NoCrossings(AveragingError):
    pass


class ThetaOutOfRange(AveragingError, ValueError):
    pass


class TooFewRuns(AveragingError, ValueError):
    pass
