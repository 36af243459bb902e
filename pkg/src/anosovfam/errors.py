"""Exception hierarchy shared by all modules."""


class AnosovError(Exception):
    """Base class for every error raised by :mod:`anosovfam`."""


class WindowRangeError(AnosovError, IndexError):
    """A component index falls outside the indices a metric or family covers."""


class DimensionMismatchError(AnosovError, ValueError):
    pass


class DegenerateSplittingError(AnosovError, ValueError):
    """Stable and unstable directions fail to span the tangent space."""


class DegenerateInputError(AnosovError, ValueError):
    pass


class InversionError(AnosovError, ArithmeticError):
    """Newton inversion of a map did not converge."""

    def __init__(self, message, residual=float("nan")):
        super().__init__(f"{message} (residual {residual:.3e})")
        self.residual = residual


class ParameterError(AnosovError, ValueError):
    pass


class PreconditionError(AnosovError):
    pass


class ConstantsInconsistentError(AnosovError, ValueError):
    pass


class GenerationError(AnosovError):
    """A perturbation could not be fitted inside the requested radius."""


class ConfigError(AnosovError, ValueError):
    """Invalid run configuration; ``where`` names the offending line or field."""

    def __init__(self, message, where=None):
        self.where = where
        super().__init__(f"{where}: {message}" if where else message)
