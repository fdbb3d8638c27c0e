"""
EMR Closure - Error hierarchy
Library code raises these; the CLI maps them onto exit codes.
"""
from typing import Optional


class EmrError(Exception):
    """Base class for every error raised by emr_closure"""

    exit_code = 3


class ConfigError(EmrError):
    """Unknown preset, malformed parameter file, bad override"""

    exit_code = 2


class DataError(EmrError):
    """Malformed, non-finite, misaligned or too short input data"""

    exit_code = 2


class NumericalError(EmrError):
    """A computation could not produce a trustworthy result"""

    exit_code = 3


class RankDeficientError(NumericalError):
    pass


class InfeasibleConstraintsError(NumericalError):
    pass


class ConvergenceError(NumericalError):
    pass


class NoiseEstimationError(NumericalError):
    pass


class ModelError(NumericalError):
    """Operation not defined for this model (e.g. eta cascade with p=0)"""


class BlowUpError(NumericalError):
    """State became non-finite during time stepping"""

    def __init__(self, message: str, step: Optional[int] = None):
        super().__init__(message)
        self.step = step


class AcceptanceError(EmrError):
    """One or more reproduce gates failed"""

    exit_code = 4
