"""Exception types shared across the package; the CLI maps them to exit codes."""


class ShapeError(ValueError):
    """Operand dimensions are inconsistent with the operation's contract."""


class ContractError(RuntimeError):
    """An internal invariant or API precondition was violated."""


class FormatError(ValueError):
    """A file does not match its declared on-disk format."""

    def __init__(self, message: str, *, line: int | None = None, offset: int | None = None):
        if line is not None:
            message = f"{message} (line {line})"
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.line = line
        self.offset = offset


class ConfigError(ValueError):
    """A configuration is internally inconsistent or unsatisfiable."""


class MetricUndefinedError(ValueError):
    """The requested metric is undefined for the given inputs (e.g. BWT with one task)."""


class StageError(RuntimeError):
    """Wraps a failure inside the sequential loop with the stage index attached."""

    def __init__(self, stage: int, cause: BaseException):
        super().__init__(f"stage {stage}: {cause}")
        self.stage = stage


class UsageError(ValueError):
    """Bad command-line flags or flag combinations."""
