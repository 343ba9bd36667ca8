"""Exception hierarchy shared by every module."""

from __future__ import annotations


class HybridAttnError(Exception):
    """Base class for all library errors."""


class ShapeError(HybridAttnError, ValueError):
    """Operand dimensions do not agree."""


class ConfigError(HybridAttnError, ValueError):
    """A configuration value is missing, malformed or infeasible."""


class InputError(HybridAttnError, ValueError):
    """A runtime input (prompt, subset, trace) is empty or malformed."""


class CoverageError(HybridAttnError):
    """Logit segments do not cover the token map exactly."""


class OverlapError(CoverageError):
    """A token id appears in more than one segment."""


class CapacityError(HybridAttnError):
    """A memory tier ran out of space."""


class ConsistencyError(HybridAttnError):
    """A placement query referenced a token the placement does not hold."""
