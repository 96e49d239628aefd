"""Error types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class CapacityError(ValueError):
    """An adapter site cannot grow further (middle-dim or rank budget hit)."""


class ProtocolError(RuntimeError):
    """Continual-learning protocol violated (ordering, label overlap, rehearsal)."""


class TrainingError(RuntimeError):
    """A training run failed its own contract (e.g. upstream accuracy gate)."""


class ConfigError(ValueError):
    """Bad experiment config. Carries the offending line when known."""

    def __init__(self, message: str, line_no: int | None = None, line: str | None = None):
        if line_no is not None:
            message = f"line {line_no}: {message}" + (f" ({line.strip()!r})" if line else "")
        super().__init__(message)
        self.line_no = line_no
