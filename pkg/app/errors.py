"""
Exception hierarchy for QuoVLA.

Every error raised on purpose by the library derives from `QuoVLAError`, so the
CLI can turn it into a machine-readable failure line and a nonzero exit code.
Errors that are also plain value problems subclass `ValueError` as well, which
keeps `pytest.raises(ValueError)` style checks working.
"""

from __future__ import annotations

from pathlib import Path
from typing import Optional


class QuoVLAError(Exception):
    """Base class for all deliberate QuoVLA failures."""


class ConfigError(QuoVLAError, ValueError):
    """Invalid configuration value or inconsistent flag combination."""


class ShapeError(QuoVLAError, ValueError):
    """Array shapes do not fit together."""


class NonFiniteError(QuoVLAError, FloatingPointError):
    """A NaN or infinity appeared in a computation.

    `site` names the first primitive (or parameter) where it was observed.
    """

    def __init__(self, site: str, message: str = "") -> None:
        self.site = site
        super().__init__(message or f"non-finite value produced by {site}")


class WorldError(QuoVLAError, ValueError):
    """A DiscreteWorld violates its invariants."""


class CheckpointError(QuoVLAError):
    """Base class for artifact file problems."""


class CheckpointCorruptError(CheckpointError):
    """The file is truncated, tampered with, or not an artifact at all."""


class CheckpointVersionError(CheckpointError):
    """The file was written by an incompatible format version."""


class DimensionMismatchError(CheckpointError, ShapeError):
    """Stored dimensions do not match what the caller expects."""


class TrainingDivergedError(QuoVLAError):
    """The training loss became non-finite."""

    def __init__(self, step: int, diagnostic_path: Optional[Path]) -> None:
        self.step = step
        self.diagnostic_path = diagnostic_path
        where = f", diagnostic checkpoint at {diagnostic_path}" if diagnostic_path else ""
        super().__init__(f"non-finite loss at step {step}{where}")
