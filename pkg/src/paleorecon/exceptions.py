class PaleoReconException(Exception):
    """Custom exception for reconstruction pipeline errors."""

    pass


class DegenerateSeriesError(PaleoReconException, ValueError):
    """A series has too few usable values (or no spread) for the requested operation."""


class DomainError(PaleoReconException, ValueError):
    """An input lies outside the domain of a transform, e.g. non-positive CO2."""


class OutOfRangeError(PaleoReconException, ValueError):
    """A year falls outside the reconstruction interval or the nest table."""


class CoverageError(PaleoReconException, ValueError):
    """Year coverage of two inputs does not line up."""


class ReductionError(PaleoReconException, ValueError):
    """A data-reduction fit cannot be carried out with the given inputs."""


class SingularPrecisionError(PaleoReconException):
    """A precision matrix is not positive definite."""

    def __init__(self, message: str, direction: str = None):
        super().__init__(message)
        self.direction = direction


class ConvergenceError(PaleoReconException):
    """An iterative optimizer stopped without converging."""

    def __init__(self, message: str, trace=None):
        super().__init__(message)
        self.trace = list(trace or [])


class ScoringError(PaleoReconException, ValueError):
    """Invalid input to a scoring rule, or a validation window that must be refused."""


class ConfigError(PaleoReconException, ValueError):
    """Invalid run configuration."""


class StageError(PaleoReconException):
    """
    Wraps a failure in one pipeline stage.

    Parameters:
        stage (str): Stage name, one of the values of `error_codes.error_dict`.
        message (str): Human readable cause.
    """

    def __init__(self, stage: str, message: str):
        from .error_codes import stage_codes

        self.stage = stage
        self.exit_code = stage_codes.get(stage, stage_codes["UNKNOWN"])
        super().__init__(f"[{stage}] {message}")
