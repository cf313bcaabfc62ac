"""Exception hierarchy shared by all ronkit modules.

The command-line front end maps these onto process exit codes
(see ``ronkit.cli``): format/parse problems exit 2, shape problems 3,
plan-domain problems 4, numerical failures 5.
"""


class RonError(Exception):
    """Base class for all ronkit errors."""


class FormatError(RonError):
    """Malformed, truncated, or corrupt model/dataset/plan file."""


class ShapeError(RonError):
    """Dimension or shape-chain violation."""


class MemoryGuardError(ShapeError):
    """A materialized matrix would exceed the configured entry cap."""


class PlanError(RonError):
    """Compression plan violates its domain constraints."""


class NumericalError(RonError):
    """Rank deficiency, singular subsystem, or failed iteration."""
