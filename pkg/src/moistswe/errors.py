"""Error types shared across the package."""


class MeshQualityError(ValueError):
    """Mesh construction or geometry found a degenerate or inconsistent cell."""


class ResourceLimitError(ValueError):
    """Requested resolution exceeds the configured maximum."""


class StateValidityError(ValueError):
    """A prognostic state violates a physical bound (e.g. nonpositive depth)."""


class SolverError(RuntimeError):
    """A linear solve failed to reach its tolerance."""


class InstabilityError(RuntimeError):
    """Non-finite values appeared during time stepping."""


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


class CheckpointMismatchError(ValueError):
    """Checkpoint does not match the current mesh or format version."""
