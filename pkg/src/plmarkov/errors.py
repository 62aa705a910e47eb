"""Exception types shared across the package."""


class PlmarkovError(Exception):
    """Base class for all errors raised by this package."""


class NonStochasticMatrix(PlmarkovError):
    """A transition matrix has negative entries or rows that do not sum to one."""


class NonUniqueStationary(PlmarkovError):
    """The chain does not have a unique stationary distribution."""


class DimensionMismatch(PlmarkovError):
    """Two objects that must share a dimension do not."""


class MixingTimeNotFound(PlmarkovError):
    """No mixing time could be certified within the search horizon."""


class SingularSystem(PlmarkovError):
    """A linear solve failed to meet its residual tolerance."""


class NotCentered(PlmarkovError):
    """The supplied gradient field is not centered against the stationary law."""


class NonFinite(PlmarkovError):
    """An iterate or statistic became NaN or infinite."""


class HypothesisViolated(PlmarkovError):
    """Inputs do not satisfy the hypothesis a formula requires."""


class DegenerateConstants(PlmarkovError):
    """Base constants are outside their admissible domain."""


class InfeasibleK0(PlmarkovError):
    """The schedule offset K0 is below the certified lower bound."""


class DisconnectedGraph(PlmarkovError):
    """The communication graph is not connected."""


class UncertifiedModel(PlmarkovError):
    """An operation demands a certified mixing time but only an estimate exists."""


class DegenerateCovariance(PlmarkovError):
    """The stationary covariance is singular or undefined."""


class TooFewTrials(PlmarkovError):
    """Not enough trajectories for the requested statistic."""


class NonPositiveValues(PlmarkovError):
    """A log-scale fit was asked for on values that are not strictly positive."""


class InvalidConfig(PlmarkovError):
    """An experiment config file is malformed or inconsistent."""


class IoFailure(PlmarkovError):
    """Reading or writing an output artifact failed."""
