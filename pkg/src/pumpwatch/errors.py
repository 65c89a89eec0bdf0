"""Exception and warning types raised across pumpwatch."""


class PumpwatchError(Exception):
    pass


class ValidationError(PumpwatchError, ValueError):
    """Bad input detected before any work is done (CLI exit code 2)."""


# ingest
class UnknownField(ValidationError):
    pass


class MalformedRow(ValidationError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class EmptyInput(ValidationError):
    pass


class EmptyTrades(ValidationError):
    pass


class MissingColumn(ValidationError):
    def __init__(self, column: str):
        super().__init__(f"missing column: {column}")
        self.column = column


class NonNumericCell(ValidationError):
    def __init__(self, row: int, column: str, value: str):
        super().__init__(f"row {row}, column {column}: non-numeric value {value!r}")
        self.row = row
        self.column = column


class SchemaMismatch(ValidationError):
    pass


class NonMonotonicTimestamp(UserWarning):
    """Input timestamps were out of order and have been stable-sorted."""

    def __init__(self, inversions: int):
        super().__init__(f"{inversions} timestamp inversion(s); rows stable-sorted")
        self.inversions = inversions


class WindowTooLarge(UserWarning):
    pass


# dataset
class InvalidSegmentLength(ValidationError):
    pass


class InvalidFraction(ValidationError):
    pass


class InvalidSpec(ValidationError):
    pass


class EmptySplit(ValidationError):
    pass


# nn / models
class ShapeMismatch(ValidationError):
    pass


class NotADistribution(ValidationError):
    pass


class NonScalarOutput(ValidationError):
    pass


class NonPositiveSigma(ValidationError):
    pass


class SegmentTooShort(ValidationError):
    pass


class LabelOutOfRange(ValidationError):
    pass


class NonFiniteLoss(PumpwatchError, FloatingPointError):
    def __init__(self, batch_index: int, value: float, epoch: int | None = None):
        where = f"batch {batch_index}" if epoch is None else f"epoch {epoch}, batch {batch_index}"
        super().__init__(f"non-finite loss {value!r} at {where}")
        self.batch_index = batch_index
        self.epoch = epoch


# train-eval
class LengthMismatch(ValidationError):
    pass


class TooFewRuns(ValidationError):
    pass


# cli
class ConfigInvalid(ValidationError):
    def __init__(self, problems: list[str]):
        super().__init__("; ".join(problems))
        self.problems = problems


class HashMismatch(ValidationError):
    """Checkpoint and prepared dataset were built from different data settings."""
