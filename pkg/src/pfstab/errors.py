"""Exception hierarchy for pfstab.

Every error raised on purpose by this package derives from :class:`PfstabError`
so callers can catch the whole family with one clause.
"""


class PfstabError(Exception):
    """Base class for all pfstab errors."""


class ConfigurationError(PfstabError, ValueError):
    """A run configuration or constructor argument violates its contract."""


class UsageError(PfstabError, ValueError):
    """An operation was invoked with arguments outside its domain."""


class NumericError(PfstabError, ArithmeticError):
    """A computation produced or received non-finite values."""


class ModelError(PfstabError, ValueError):
    """A user-supplied system or cost violates a model invariant."""


class CorruptFileError(PfstabError, ValueError):
    """A persisted artifact failed checksum, shape, or invariant validation."""


class MissingArtifactError(PfstabError, FileNotFoundError):
    """A pipeline stage requires an artifact that has not been produced."""


class StaleArtifactError(PfstabError, ValueError):
    """A persisted artifact was produced under a different grid or seed."""


class SolverError(PfstabError, RuntimeError):
    """The LP solver broke down or returned an inconsistent solution."""


class DegenerateSolutionError(PfstabError, RuntimeError):
    """An LP solution carries no usable mass on some cell."""
