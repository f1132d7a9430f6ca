"""Exception hierarchy shared across the package."""


class TransfusorError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(TransfusorError, ValueError):
    pass


class ConfigurationError(TransfusorError, ValueError):
    pass


class UsageError(TransfusorError, ValueError):
    pass


class StateError(TransfusorError, RuntimeError):
    pass


class TrainingError(TransfusorError, RuntimeError):
    pass


class FormatError(TransfusorError, ValueError):
    """Malformed input file. Carries the offending line/column when known."""

    def __init__(self, message, path=None, line=None, column=None):
        where = []
        if path is not None:
            where.append(str(path))
        if line is not None:
            where.append(f"line {line}")
        if column is not None:
            where.append(f"column '{column}'")
        prefix = ", ".join(where)
        super().__init__(f"{prefix}: {message}" if prefix else message)
        self.path = path
        self.line = line
        self.column = column


class DataError(TransfusorError, ValueError):
    pass


class LabelingError(TransfusorError, ValueError):
    pass


class CheckpointError(TransfusorError, ValueError):
    pass


class CoverageUndefinedError(TransfusorError, ValueError):
    pass
