"""Exception taxonomy shared across the package.

The CLI maps these onto process exit codes (see cli.py); library code raises
them directly and never calls sys.exit.
"""


class SonodiffError(Exception):
    """Base class for package-specific errors."""


class ConfigurationError(SonodiffError, ValueError):
    """A configuration value violates its contract (bad schedule range, odd
    embedding dimension, negative loss weight, ...)."""


class ParameterError(SonodiffError, ValueError):
    """An argument to an operation is invalid (timestep out of range, empty
    value list, inclusion that does not fit the image, ...)."""


class ShapeError(SonodiffError, ValueError):
    """Image or tensor dimensions violate an operation's contract."""


class FormatError(SonodiffError, ValueError):
    """File content is not in the expected on-disk format."""


class DataError(SonodiffError, ValueError):
    """Dataset-level problem: empty split, missing manifest entry, ..."""


class SplitError(DataError):
    """The dataset cannot be split under the group-disjointness and ratio
    constraints (fewer than three groups, or no assignment within tolerance)."""


class CheckpointError(SonodiffError, RuntimeError):
    """Checkpoint missing, corrupt, or incompatible with the active config."""


class TrainingDivergenceError(SonodiffError, RuntimeError):
    """Training loss became non-finite. The last finite-loss parameters are
    saved before this is raised."""
