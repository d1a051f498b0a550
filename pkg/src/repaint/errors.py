"""Exception hierarchy for the regeneration harness."""

from typing import Any


class RepaintError(Exception):
    """Base class for every error raised by the harness."""


class ConfigError(RepaintError):
    """Invalid configuration value."""

    def __init__(self, field_path: str, message: str):
        """Initialize the error.

        Args:
            field_path: Dotted path of the offending field (e.g. ``run.weights``)
            message: Human readable description
        """
        super().__init__(f"{field_path}: {message}")
        self.field_path = field_path


class ValidationError(RepaintError):
    """A value is outside its permitted domain."""


class EncodingError(RepaintError):
    """A value could not be serialized canonically."""


class BackendUnavailable(RepaintError):
    """A backend refused, timed out or could not be reached."""

    def __init__(self, backend_id: str, message: str):
        super().__init__(f"{backend_id}: {message}")
        self.backend_id = backend_id


class SchemaViolation(RepaintError):
    """A structured MLLM response kept failing its schema after repairs."""

    def __init__(self, schema: str, message: str, raw_text: str):
        super().__init__(f"response for schema '{schema}' is invalid: {message}")
        self.schema = schema
        self.raw_text = raw_text


class ProtocolError(RepaintError):
    """A backend answered with something the wire contract does not allow."""


class DegenerateEmbedding(RepaintError):
    """An embedding is the zero vector and cannot be normalized."""


class DegenerateScene(RepaintError):
    """A reference image yielded no describable content."""


class BuildError(RepaintError):
    """An Image Understanding Tree failed validation."""

    def __init__(self, message: str, report: Any = None):
        super().__init__(message)
        self.report = report


class EmptyIteration(RepaintError):
    """Every candidate generation of an iteration failed."""


class ManifestError(RepaintError):
    """A benchmark manifest is malformed or references missing files."""

    def __init__(self, message: str, missing: list[str] | None = None):
        super().__init__(message)
        self.missing = missing or []


class AggregateError(RepaintError):
    """A benchmark run has no successful sample to aggregate."""


class InsufficientData(RepaintError):
    """Not enough models to compute a rank correlation."""


class StoreError(RepaintError):
    """A run-store or report path could not be written or read."""
