"""Exception hierarchy.

Data problems (bad files, schema violations, impossible measurement times)
raise DataError subclasses; estimation and prediction failures raise
NumericalError subclasses.  The CLI maps DataError to exit code 2 and
NumericalError to exit code 3.
"""


class CrbjmError(Exception):
    pass


class DataError(CrbjmError):
    pass


class SchemaError(DataError):
    pass


class MissingSubject(DataError):
    pass


class NonPositiveTime(DataError):
    pass


class MeasurementAfterExit(NonPositiveTime):
    """Measurement recorded after the subject's observed exit time."""


class EventTypeOutOfRange(DataError):
    pass


class DuplicateMeasurement(DataError):
    pass


class NumericalError(CrbjmError):
    pass


class NoConvergence(NumericalError):
    pass


class NonPositiveDefinite(NumericalError):
    pass


class AllCensored(NumericalError):
    pass


class MissingEventType(NumericalError):
    pass


class RankDeficientDesign(NumericalError):
    pass


class TooFewCompleteCases(NumericalError):
    pass


class DegenerateWeights(NumericalError):
    pass


class EmptyDenominator(NumericalError):
    pass


class HorizonBeyondTau(NumericalError):
    pass


class GridTooNarrow(NumericalError):
    pass


class MissingCurrentValue(NumericalError):
    pass


class NoCases(NumericalError):
    pass


class NoControls(NumericalError):
    pass


class NoComparableSubjects(NumericalError):
    pass


class FoldFitFailure(NumericalError):
    pass


class TooManyFailures(NumericalError):
    pass


class CalibrationFailure(NumericalError):
    pass


class SeparationWarning(UserWarning):
    """Event-type coefficients hit the norm cap (quasi-separation)."""
