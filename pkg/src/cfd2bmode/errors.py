"""Exception types shared across the pipeline."""


class GeometryError(ValueError):
    """Image/box dimensions don't line up (bad crop, shape mismatch, ...)."""


class ShapeError(GeometryError):
    """Tensor shape incompatible with a network or loss."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration / empty input where data is required."""


class ParseError(ValueError):
    """Malformed manifest record; carries the 1-based line number."""

    def __init__(self, line_number: int, message: str):
        self.line_number = line_number
        super().__init__(f"line {line_number}: {message}")


class EmptySectorError(ValueError):
    """No non-background region found where an ultrasound sector is expected."""


class CheckpointError(RuntimeError):
    """Missing or incompatible checkpoint file."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""
