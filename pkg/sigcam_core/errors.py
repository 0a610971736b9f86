"""
Exception hierarchy for SigCAM Lab.

Every error carries a short machine-parsable ``category`` that the CLI prints
as ``error[<category>]`` and maps to an exit code.
"""

from typing import Dict


class SigCamError(Exception):
    """Base class for all lab errors."""

    category = "internal"

    def __init__(self, message: str):
        super().__init__(message)
        self.message = message


class ShapeError(SigCamError):
    """Tensor extents disagree with what an operation expects."""

    category = "shape"


class ContractError(SigCamError):
    """A precondition of an operation was violated by the caller."""

    category = "contract"


class ConfigError(SigCamError):
    """Malformed or unknown configuration entry."""

    category = "config"

    def __init__(self, message: str, key: str = "", line: int = 0):
        if key and line:
            message = f"{message} (key '{key}', line {line})"
        elif key:
            message = f"{message} (key '{key}')"
        super().__init__(message)
        self.key = key
        self.line = line


class DatasetIOError(SigCamError):
    """Dataset manifest or blob could not be read or written."""

    category = "dataset_io"

    def __init__(self, message: str, path: str = ""):
        super().__init__(f"{message}: {path}" if path else message)
        self.path = path


class CheckpointError(SigCamError):
    """Checkpoint magic, version or hash block mismatch."""

    category = "checkpoint"


class FingerprintError(SigCamError):
    """Dataset fingerprint differs from the one recorded at training time."""

    category = "fingerprint"


class NonFiniteError(SigCamError):
    """NaN or Inf produced by an op or a training step."""

    category = "non_finite"


class FrozenParameterError(SigCamError):
    """A frozen parameter changed during fine-tuning."""

    category = "frozen_drift"


class DomainError(SigCamError):
    """Input outside the mathematical domain of a loss or metric."""

    category = "domain"


EXIT_CODES: Dict[str, int] = {
    "internal": 1,
    "shape": 2,
    "contract": 3,
    "config": 4,
    "dataset_io": 5,
    "checkpoint": 6,
    "fingerprint": 7,
    "non_finite": 8,
    "frozen_drift": 9,
    "domain": 10,
}


def exit_code_for(error: SigCamError) -> int:
    """Map an error to the CLI exit code of its category."""
    return EXIT_CODES.get(error.category, 1)
