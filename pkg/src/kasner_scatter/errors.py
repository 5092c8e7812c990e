"""Exception types raised across the package."""


class ScatterError(Exception):
    """Base class for every error raised by this package."""


class KasnerRelationViolation(ScatterError):
    pass


class DegenerateBackground(ScatterError):
    """Some exponent reaches 1, so t_star and the scattering maps are undefined."""


class NotSubcritical(ScatterError):
    pass


class ZeroModeError(ScatterError):
    """Operation is only defined for nonzero frequencies."""


class NotPowerLawMode(ScatterError):
    pass


class StepLimitExceeded(ScatterError):
    pass


class NonFiniteState(ScatterError):
    pass


class TailUnreachable(ScatterError):
    pass


class RegimeMismatch(ScatterError):
    pass


class ConstraintViolation(ScatterError):
    pass


class ConfigError(ScatterError):
    pass
