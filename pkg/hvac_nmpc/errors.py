from __future__ import annotations


class HvacNmpcError(Exception):
    """Base class for every error raised by hvac_nmpc."""


def _rebuild(cls: type, message: str, fields: dict) -> Exception:
    return cls(message, **fields)


class _FieldError(HvacNmpcError):
    # Keyword-only fields survive pickling across worker processes.
    _field = ""

    def __reduce__(self):
        return (_rebuild, (type(self), self.message, {self._field: getattr(self, self._field)}))


class InvalidArgumentError(HvacNmpcError, ValueError):
    pass


class ConfigError(HvacNmpcError, ValueError):
    pass


class ContractError(HvacNmpcError, ValueError):
    pass


class ShapeError(HvacNmpcError, ValueError):
    def __init__(self, op: str, *shapes: tuple[int, ...]):
        self.op = op
        self.shapes = shapes
        joined = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {joined}" if shapes else op)


class NumericDomainError(HvacNmpcError, ArithmeticError):
    pass


class TrainingError(_FieldError, RuntimeError):
    _field = "epoch"

    def __init__(self, message: str, *, epoch: int):
        self.message = message
        self.epoch = epoch
        super().__init__(f"{message} (epoch {epoch})")


class CheckpointError(HvacNmpcError, RuntimeError):
    pass


class CsvFormatError(_FieldError, ValueError):
    _field = "line"

    def __init__(self, message: str, *, line: int):
        self.message = message
        self.line = line
        super().__init__(f"line {line}: {message}")


class SolverError(_FieldError, RuntimeError):
    _field = "iteration"

    def __init__(self, message: str, *, iteration: int):
        self.message = message
        self.iteration = iteration
        super().__init__(f"{message} (iteration {iteration})")


# Exit codes of the command-line surface.
EXIT_OK = 0
EXIT_USAGE = 2
EXIT_RUNTIME = 3

USAGE_ERRORS: tuple[type[Exception], ...] = (
    ConfigError,
    InvalidArgumentError,
    ShapeError,
    ContractError,
    CheckpointError,
    CsvFormatError,
)
RUNTIME_ERRORS: tuple[type[Exception], ...] = (
    NumericDomainError,
    TrainingError,
    SolverError,
)
