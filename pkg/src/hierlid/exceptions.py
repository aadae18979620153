"""Exception hierarchy.

Every error carries an ``exit_code`` used by the command line front end:
2 for validation problems, 3 for numerical failures, 4 for I/O.
"""


class HierlidError(Exception):
    exit_code = 1


class ValidationError(HierlidError, ValueError):
    exit_code = 2


class NumericalError(HierlidError, ArithmeticError):
    exit_code = 3


class InputFileError(HierlidError, OSError):
    exit_code = 4


class MissingColumn(ValidationError):
    pass


class ColumnTypeError(ValidationError):
    def __init__(self, row, column, value):
        self.row, self.column, self.value = row, column, value
        super().__init__(f"row {row}: column {column!r} cannot parse {value!r}")


class InvariantViolation(ValidationError):
    def __init__(self, row, reason):
        self.row, self.reason = row, reason
        super().__init__(f"row {row}: {reason}")


class OrphanTree(ValidationError):
    def __init__(self, tree_id, plot_id=None):
        self.tree_id = tree_id
        super().__init__(f"tree {tree_id!r} references unknown plot {plot_id!r}")


class ColumnMismatch(ValidationError):
    pass


class DimensionMismatch(ValidationError):
    pass


class UnknownForm(ValidationError):
    pass


class EmptyInput(ValidationError):
    pass


class EmptyTrack(ValidationError):
    pass


class InsufficientClusters(ValidationError):
    pass


class LengthMismatch(ValidationError):
    pass


class TooFewCandidates(ValidationError):
    pass


class ZeroArea(ValidationError):
    pass


class ConfigError(ValidationError):
    pass


class SingularNormalEquations(NumericalError):
    pass


class SingularInformation(NumericalError):
    pass


class EmptyRaster(ValidationError):
    pass


class StageError(HierlidError):
    """Wraps a failure inside a pipeline stage, keeping the original exit code."""

    def __init__(self, stage, error):
        self.stage = stage
        self.error = error
        self.exit_code = getattr(error, "exit_code", 1)
        super().__init__(f"stage {stage!r} failed: {error}")
