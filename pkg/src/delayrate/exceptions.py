"""Exception and warning types raised by the package."""

from __future__ import annotations


class DelayRateError(Exception):
    """Base class for all package errors."""


class SeriesOverflow(DelayRateError, ArithmeticError):
    """A term of the multi-index series left the floating-point range."""

    def __init__(self, order: int, alpha: tuple[int, ...]):
        self.order = order
        self.alpha = tuple(alpha)
        super().__init__(f"series term overflowed at order n={order}, alpha={self.alpha}")


class SeriesTruncationError(DelayRateError, ValueError):
    """The requested horizon needs more orders than ``max_order`` allows."""


class QuadratureNonConvergence(DelayRateError, ArithmeticError):
    """Two successive quadrature refinements disagree beyond tolerance."""


class StepTooLarge(DelayRateError, ValueError):
    """The method-of-steps oracle step exceeds an eighth of the smallest delay."""


class HistoryTooShort(DelayRateError, ValueError):
    """A rate history does not reach back far enough for the delay window."""


class NotConverged(DelayRateError, ArithmeticError):
    """An iterative limit did not settle before its horizon cap."""


class DelayMismatch(DelayRateError, ValueError):
    """Two models that must share delays do not."""


class MissingRealizedPath(DelayRateError, ValueError):
    """A realized rate path is required but was not supplied."""


class NegativeVariance(DelayRateError, ArithmeticError):
    """A variance that must be non-negative came out negative."""


class InvalidStrike(DelayRateError, ValueError):
    """The strike factor ``1 + K * Delta`` is not positive."""


class NegativeForward(DelayRateError, ValueError):
    """The lognormal formula was asked to price a non-positive forward."""


class OutOfRange(DelayRateError, ValueError):
    """A curve was queried outside its maturity range."""


class CurveTooShort(DelayRateError, ValueError):
    """A yield curve does not span the horizon an operation needs."""


class DegenerateC(DelayRateError, ValueError):
    """The implied initial curve needs a non-zero delay coefficient."""


class OptimizerDiverged(DelayRateError, ArithmeticError):
    """Every optimizer start ended with a non-finite objective."""


class SingularDesign(DelayRateError, ArithmeticError):
    """Regression design matrix is numerically rank deficient."""


class TooShort(DelayRateError, ValueError):
    """An input series is too short for the requested statistic."""


class CatastrophicCancellation(RuntimeWarning):
    """A literal closed form was evaluated where it loses relative accuracy."""


class StabilityBoundaryWarning(RuntimeWarning):
    """Coefficients sit within rounding distance of the stability boundary."""
