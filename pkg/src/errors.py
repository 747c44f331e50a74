"""
Exception hierarchy shared by every stage of the pipeline.

The CLI maps ConfigError to exit code 1 and every other failure to 2.
"""

from __future__ import annotations

from typing import Any


class SpeechSSLError(Exception):
    """Base class for all framework errors."""


class InvalidInputError(SpeechSSLError, ValueError):
    """Input data violates a precondition (empty, non-finite, wrong rate...)."""


class ShapeMismatchError(SpeechSSLError, ValueError):
    """Two arrays or parameter sets that must agree in shape do not."""


class ConfigError(SpeechSSLError, ValueError):
    """A configuration value or combination of values is invalid."""


class CheckpointError(SpeechSSLError):
    """A checkpoint is missing, unreadable or incompatible with the model."""


class NonFiniteLossError(SpeechSSLError):
    """Training produced a NaN/inf loss; carries the diagnostic record."""

    def __init__(self, message: str, record: Any = None):
        super().__init__(message)
        self.record = record
