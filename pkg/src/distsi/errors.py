"""Exception hierarchy.

Every error carries an ``exit_code`` so the command line can map failures to
its stable contract: 2 config, 3 data, 4 numeric.
"""


class DistSIError(Exception):
    exit_code = 4


class InvalidInputError(DistSIError, ValueError):
    exit_code = 3


class ConfigError(DistSIError, ValueError):
    exit_code = 2


class ProtocolError(DistSIError):
    exit_code = 3


# numeric failures

class SingularDesignError(DistSIError):
    pass


class SeparationError(DistSIError):
    pass


class SingularInformationError(DistSIError):
    pass


class SolverError(DistSIError):
    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class KKTViolationError(DistSIError):
    pass


class TuningError(DistSIError):
    pass


class NoHoldoutError(DistSIError):
    pass


class InsufficientHoldoutError(DistSIError):
    pass


class DegenerateGeometryError(DistSIError):
    pass


class OptimizationError(DistSIError):
    def __init__(self, message, iterate=None):
        super().__init__(message)
        self.iterate = iterate


class EmptyModelError(DistSIError):
    pass
