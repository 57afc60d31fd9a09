"""Exception hierarchy shared across the package."""


class FemurSegError(Exception):
    """Base class for all package errors."""


class ContractViolation(FemurSegError, ValueError):
    """An operation was called with inputs outside its contract."""


class GenerationError(FemurSegError):
    """A phantom could not be generated with the requested parameters."""


class AugmentationRejected(FemurSegError):
    """An augmentation pushed a landmark outside the volume."""


class VolumeIOError(FemurSegError, OSError):
    pass


class BadMagicError(VolumeIOError):
    pass


class BufferMismatchError(VolumeIOError):
    pass


class SidecarError(VolumeIOError):
    pass


class CheckpointError(FemurSegError):
    pass


class ArchitectureChangedError(CheckpointError):
    """Checkpoint was written for a different network spec."""


class FemurNotFoundError(FemurSegError):
    """ROI detection produced no foreground in any slice."""


class TrainingDivergenceError(FemurSegError):
    """A loss component became non-finite."""

    def __init__(self, component: str, value: float = float("nan")):
        super().__init__(f"loss component {component!r} is not finite ({value})")
        self.component = component


class ManifestError(FemurSegError):
    """Dataset manifest is missing or malformed."""
