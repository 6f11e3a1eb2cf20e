"""Exception types shared across the package."""


class FacepartsError(Exception):
    """Base class for all package-specific errors."""


class InsufficientVisibility(FacepartsError):
    """A segment formula references fiducials whose visibility is below threshold.

    Carries the 1-based fiducial indices that failed the check.
    """

    def __init__(self, segment: str, failed_indices: list[int], tau: float):
        self.segment = segment
        self.failed_indices = sorted(failed_indices)
        self.tau = tau
        super().__init__(
            f"segment {segment}: fiducials {self.failed_indices} below visibility {tau}"
        )


class EmptyIntersection(FacepartsError):
    """A crop box does not intersect the image raster."""


class ShapeMismatch(FacepartsError):
    """Tensor shapes are inconsistent with the operation's contract."""


class DegenerateBatch(FacepartsError):
    """Batch statistics are undefined (train-mode batch norm with batch size 1)."""


class ToleranceExceeded(FacepartsError):
    """A gradient check exceeded its tolerance; names the offending parameter."""

    def __init__(self, param_name: str, rel_error: float, tolerance: float):
        self.param_name = param_name
        self.rel_error = rel_error
        self.tolerance = tolerance
        super().__init__(
            f"gradient check failed for '{param_name}': "
            f"relative error {rel_error:.3e} > tolerance {tolerance:.3e}"
        )


class MissingFullFace(FacepartsError):
    """The combined forward pass requires a full-face input."""


class NumericalDivergence(FacepartsError):
    """Training produced a non-finite loss; carries the last good model state."""

    def __init__(self, message: str, last_good_state=None):
        self.last_good_state = last_good_state
        super().__init__(message)


class EmptyValidationSet(FacepartsError):
    """Ranking requires at least one validation sample."""


class EmptyInput(FacepartsError):
    """An operation received an empty score or label sequence."""


class CorruptCheckpoint(FacepartsError):
    """Checkpoint magic, version, or payload failed validation."""


class AttributeNotPredicted(FacepartsError):
    """The requested attribute is not in the predictor's output mask."""


class MalformedHeader(FacepartsError):
    """An annotation file header is inconsistent with its body."""


class RowArityMismatch(FacepartsError):
    """A data-file row has the wrong number of fields; carries the line number."""

    def __init__(self, path: str, line_no: int, expected: int, got: int):
        self.line_no = line_no
        super().__init__(
            f"{path}:{line_no}: expected {expected} fields, got {got}"
        )


class MalformedRow(FacepartsError):
    """A data-file row failed validation; carries the line number."""

    def __init__(self, path: str, line_no: int, reason: str):
        self.line_no = line_no
        super().__init__(f"{path}:{line_no}: {reason}")


class DegenerateAttribute(FacepartsError):
    """An attribute's training prior is 0 or 1, so prior weighting is undefined."""


class MissingImage(FacepartsError):
    """A referenced image file could not be read."""


class IoFailure(FacepartsError):
    """A file could not be written."""


class ConfigError(FacepartsError):
    """Run configuration is malformed or contains unknown keys."""


class MissingInput(FacepartsError):
    """A subcommand's required input artifact does not exist."""
