"""Exceptions raised by craniopy."""
from typing import Any, Dict, Optional


class CranioError(Exception):
    """Base class for all craniopy errors."""


class ManifestError(CranioError, ValueError):
    """A dataset manifest is malformed or inconsistent."""

    def __init__(self, message: str, line: Optional[int] = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class FeatureFileError(CranioError, ValueError):
    """A CFV1 feature file or graph cache file cannot be decoded."""


class CheckpointError(CranioError, ValueError):
    """A checkpoint file is malformed or does not match the model."""


class GraphError(CranioError, ValueError):
    """Invalid input to patch extraction or graph construction."""


class ShapeError(CranioError, ValueError):
    """Tensor shapes are incompatible."""


class ConfigError(CranioError, ValueError):
    """A run configuration value is missing or out of range."""


class NonFiniteLossError(CranioError, ArithmeticError):
    """Training produced a NaN or infinite loss."""

    def __init__(self, message: str, diagnostics: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class RetrievalError(CranioError, ValueError):
    """A query has no ground-truth match or the gallery is unusable."""
