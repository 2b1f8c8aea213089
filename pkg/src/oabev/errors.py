"""Exception hierarchy.

Every error carries a stable machine-readable ``code`` and the process exit
status the CLI uses when the error escapes a verb.
"""

from __future__ import annotations


class OABevError(Exception):
    code = "OABEV_ERROR"
    exit_status = 1


class InvalidDepthError(OABevError, ValueError):
    code = "INVALID_DEPTH"
    exit_status = 3


class BoundsError(OABevError, IndexError):
    code = "OUT_OF_BOUNDS"
    exit_status = 4


class DepthRangeError(OABevError, ValueError):
    code = "DEPTH_RANGE"
    exit_status = 5


class ShapeError(OABevError, ValueError):
    code = "SHAPE_MISMATCH"
    exit_status = 6


class ConfigurationError(OABevError, ValueError):
    code = "BAD_CONFIG"
    exit_status = 7


class EmptyForegroundError(OABevError, ValueError):
    code = "EMPTY_FOREGROUND"
    exit_status = 8


class NumericError(OABevError, ArithmeticError):
    code = "NON_FINITE"
    exit_status = 9


class GenerationError(OABevError, RuntimeError):
    code = "SCENE_GENERATION"
    exit_status = 10


class ContainerError(OABevError, ValueError):
    code = "BAD_CONTAINER"
    exit_status = 11


class VerificationError(OABevError, AssertionError):
    code = "VERIFY_FAILED"
    exit_status = 12


class ArtifactIOError(OABevError, OSError):
    code = "IO_ERROR"
    exit_status = 13


class UsageError(OABevError, ValueError):
    code = "USAGE"
    exit_status = 2


ALL_ERRORS = (
    InvalidDepthError,
    BoundsError,
    DepthRangeError,
    ShapeError,
    ConfigurationError,
    EmptyForegroundError,
    NumericError,
    GenerationError,
    ContainerError,
    VerificationError,
    ArtifactIOError,
    UsageError,
)
