"""Exception taxonomy shared by every module.

All failures raised on purpose derive from :class:`PeftLabError` so callers
(and the CLI exit-code mapping) can tell deliberate validation errors apart
from genuine bugs.
"""

from __future__ import annotations


class PeftLabError(Exception):
    """Base class for every error this package raises deliberately."""


class ShapeError(PeftLabError):
    """Operands have incompatible shapes; message names both shapes."""


class ContractError(PeftLabError):
    """A documented precondition was violated by the caller."""


class ConfigError(PeftLabError):
    """A configuration value is out of range, unknown, or inconsistent."""


class NumericError(PeftLabError):
    """A non-finite value or numerically invalid state was encountered."""


class GraphError(PeftLabError):
    """Internal computation-graph invariant broken (e.g. a cycle)."""


class CheckpointError(PeftLabError):
    """A persistence artifact is malformed, truncated, or incompatible."""


class ExperimentError(PeftLabError):
    """A pipeline stage failed; carries the stage name."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"stage '{stage}': {message}")
        self.stage = stage
