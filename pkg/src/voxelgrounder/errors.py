"""Exception hierarchy shared across the package."""


class VoxelGrounderError(Exception):
    """Base class for all errors raised by this package."""


class InvalidWindowError(VoxelGrounderError):
    """Intensity window with lo >= hi."""


class PhantomSpecError(VoxelGrounderError):
    """Phantom specification violates its invariants."""


class ArchiveFormatError(VoxelGrounderError):
    """Volume archive is malformed; `field` names the offending entry."""

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


class ConfigError(VoxelGrounderError):
    """Configuration values are inconsistent with each other or the input."""


class InputValidationError(VoxelGrounderError):
    """Runtime input fails a precondition (NaN voxels, bad coordinates, ...)."""


class ShapeMismatchError(VoxelGrounderError):
    """Tensor or volume shapes do not line up."""


class ContextOverflowError(VoxelGrounderError):
    """Assembled token sequence exceeds the model's maximum context."""


class AbsentSegError(VoxelGrounderError):
    """No segmentation token was generated; caller should fall back to text."""


class EmptyPromptError(VoxelGrounderError):
    """A prompt set with no points, boxes, or semantic embedding."""


class EmptyTargetError(VoxelGrounderError):
    """Prompt simulation asked for a class with no voxels in the mask."""


class TemplateError(VoxelGrounderError):
    """Instruction template cannot be rendered for the given record."""


class UndefinedLossError(VoxelGrounderError):
    """Text loss requested on a sequence with no supervised positions."""


class ScheduleError(VoxelGrounderError):
    """Training stages run out of order."""


class CheckpointIntegrityError(VoxelGrounderError):
    """Checkpoint payload bytes do not match their recorded digest."""


class CheckpointCompatibilityError(VoxelGrounderError):
    """Checkpoint was produced under an incompatible model configuration."""


class InsufficientCorpusError(VoxelGrounderError):
    """Corpus-level metric asked to run on fewer than two documents."""
