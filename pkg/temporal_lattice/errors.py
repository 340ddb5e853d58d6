"""
Exception hierarchy shared by every module of the package.

Each error carries the process exit code the command line interface should
use when the error escapes a subcommand: 1 for user errors (bad input files,
bad configuration), 2 for internal invariant failures.
"""

from typing import Optional


class TemporalLatticeError(Exception):
    """Base exception class for temporal_lattice errors."""

    exit_code: int = 1

    def __init__(self, message: str, exit_code: Optional[int] = None):
        super().__init__(message)
        self.message = message
        if exit_code is not None:
            self.exit_code = exit_code

    def __str__(self) -> str:
        return f"[Exit Code: {self.exit_code}] {self.message}"


class ConfigError(TemporalLatticeError):
    """Invalid configuration value or fusion spec token."""


class DataFormatError(TemporalLatticeError):
    """Malformed scan, label, pose or snapshot file."""

    def __init__(self, message: str, path: Optional[str] = None, offset: Optional[int] = None):
        details = message
        if path is not None:
            details += f" (file: {path}"
            details += f", byte offset: {offset})" if offset is not None else ")"
        super().__init__(details)
        self.path = path
        self.offset = offset


class ConsistencyError(TemporalLatticeError):
    """Two inputs that must agree do not (scan/label counts, state/sequence ids)."""


class ShapeError(TemporalLatticeError):
    """Operator input shapes or channel counts do not match."""

    exit_code = 2


class InvariantViolation(TemporalLatticeError):
    """An internal invariant was broken, e.g. a shared lattice shrank."""

    exit_code = 2
