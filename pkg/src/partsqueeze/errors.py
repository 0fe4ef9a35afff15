"""Exception types shared across the package."""


class PartSqueezeError(Exception):
    """Base class for all package errors."""


class InvalidInputError(PartSqueezeError, ValueError):
    """A tensor argument violates a shape, dtype, or finiteness precondition."""


class ConfigError(PartSqueezeError, ValueError):
    """A configuration file or override is malformed or inconsistent."""


class DatasetError(PartSqueezeError, RuntimeError):
    """A dataset directory is missing required files or has a broken layout."""


class TrainingDivergenceError(PartSqueezeError, RuntimeError):
    """A loss component became non-finite during training."""

    def __init__(self, component: str, value: float, last_checkpoint: str | None = None):
        self.component = component
        self.value = value
        self.last_checkpoint = last_checkpoint
        msg = f"non-finite loss component '{component}' (value={value!r})"
        if last_checkpoint:
            msg += f"; last good checkpoint: {last_checkpoint}"
        super().__init__(msg)


class CheckpointError(PartSqueezeError, RuntimeError):
    """A checkpoint file cannot be used."""


class CheckpointIntegrityError(CheckpointError):
    """Checkpoint bytes do not match the checksum recorded in the sidecar."""


class CheckpointMismatchError(CheckpointError):
    """Checkpoint was produced under an incompatible model configuration."""
