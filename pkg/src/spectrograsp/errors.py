"""Exception hierarchy shared by every module.

Each class carries an ``exit_code`` so the CLI can map failures onto distinct
process exit statuses without a lookup table.
"""


class SpectroGraspError(Exception):
    exit_code = 1


class ParameterError(SpectroGraspError, ValueError):
    exit_code = 2


class ConfigError(ParameterError):
    exit_code = 2


class DimensionError(SpectroGraspError, ValueError):
    exit_code = 3


class DomainError(SpectroGraspError, ValueError):
    exit_code = 3


class DataFormatError(SpectroGraspError):
    """Malformed dataset or model file. ``row`` is 1-based when known."""

    exit_code = 3

    def __init__(self, message, path=None, row=None):
        parts = [message]
        if path is not None:
            parts.append(f"path={path}")
        if row is not None:
            parts.append(f"row={row}")
        super().__init__(" ".join(parts))
        self.path = path
        self.row = row


class CompatibilityError(SpectroGraspError):
    exit_code = 4


class NumericalError(SpectroGraspError, ArithmeticError):
    exit_code = 5


class DegenerateCalibrationError(NumericalError):
    pass


class DegenerateObservationError(NumericalError):
    pass


class TrainingError(NumericalError):
    pass


class StratificationError(ParameterError):
    pass
