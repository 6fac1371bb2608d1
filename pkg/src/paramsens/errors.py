"""Exception hierarchy.

Every error raised on purpose by the library derives from ``ParamSensError``.
Numerical failures (as opposed to bad input) derive from ``NumericalError``
so the CLI can map them to a distinct exit code.
"""


class ParamSensError(Exception):
    """Base class for all library errors."""


class ConfigError(ParamSensError, ValueError):
    """Malformed experiment or fit configuration."""


class InvalidGrid(ConfigError):
    pass


class InvalidParameter(ParamSensError, ValueError):
    pass


class DomainViolation(ParamSensError, ValueError):
    pass


class UnknownAlgorithm(ConfigError):
    pass


class UnknownDensity(ConfigError):
    pass


class ShapeMismatch(ParamSensError, ValueError):
    pass


class IndexOutOfRange(ParamSensError, IndexError):
    pass


class NumericalError(ParamSensError):
    """A computation could not produce a trustworthy number.

    ``failures`` holds ``(point_index, message)`` pairs when the failure is
    attributable to individual evaluation points.
    """

    def __init__(self, message, failures=None):
        super().__init__(message)
        self.failures = list(failures or [])


class PointOutsideGrid(NumericalError, ValueError):
    pass


class ZeroMass(NumericalError):
    pass


class DensityTooSmall(NumericalError):
    pass


class SingularSystem(NumericalError):
    pass


class TooFewSamples(ParamSensError, ValueError):
    pass


class DuplicatePoint(NumericalError):
    pass


class EnvelopeViolation(NumericalError):
    pass


class SamplerFailure(NumericalError):
    pass


class NonPositiveData(ParamSensError, ValueError):
    pass


class NoSuccessfulRestart(NumericalError):
    pass
