"""Exception types shared across the package."""


class VecplanError(Exception):
    """Base class for all errors raised by this package."""


class GeometryError(VecplanError):
    """Invalid geometric input (non-finite values, degenerate shapes)."""


class ShapeError(VecplanError):
    """Array shape mismatch in a numeric operation."""


class ConfigError(VecplanError):
    """Invalid or unparsable configuration."""


class ScenarioFormatError(VecplanError):
    """Scenario file violates the documented schema."""


class CheckpointError(VecplanError):
    """Checkpoint file is unreadable or inconsistent with the model config."""


class TrainingDivergedError(VecplanError):
    """Training loss became non-finite."""


class SimulationError(VecplanError):
    """Closed-loop rollout cannot proceed (e.g. horizon exhausted)."""
