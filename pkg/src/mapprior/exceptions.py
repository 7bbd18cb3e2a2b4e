"""Exception types. Each carries the CLI exit code it maps to."""


class MapPriorError(Exception):
    exit_code = 1


class ConfigurationError(MapPriorError, ValueError):
    """Invalid configuration, preset mismatch or incompatible checkpoints."""

    exit_code = 2


class DataError(MapPriorError):
    """Missing, malformed or inconsistent input data."""

    exit_code = 3


class FormatError(DataError, ValueError):
    """A .bml or codebook file could not be parsed."""

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class ShapeError(MapPriorError, ValueError):
    """Array dimensions do not match the contract."""

    exit_code = 3


class NumericAbort(MapPriorError, FloatingPointError):
    """A training loss became non-finite. ``report`` holds the last loss values."""

    exit_code = 4

    def __init__(self, message: str, report: dict | None = None):
        self.report = dict(report or {})
        super().__init__(f"{message}: {self.report}")


class CapabilityError(MapPriorError, RuntimeError):
    """The model lacks a requested capability (untrained, or no one-step head)."""

    exit_code = 2
