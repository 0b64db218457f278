"""Exception types shared across the package."""


class UsgroundError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(UsgroundError):
    """Shapes or sizes do not line up (mask vs mask, image vs model canvas)."""


class EmptyMaskError(UsgroundError):
    """A mask with no foreground pixels where at least one is required."""


class DegenerateBoxError(UsgroundError):
    """A box with non-positive width or height where positive area is required."""


class IngestionError(UsgroundError):
    """A referenced file could not be read or decoded.

    Carries the offending path so callers can report which record failed.
    """

    def __init__(self, path, reason: str):
        self.path = str(path)
        super().__init__(f"{self.path}: {reason}")


class RecordError(UsgroundError):
    """A manifest record is internally inconsistent (e.g. image/mask shape mismatch)."""


class ManifestStateError(UsgroundError):
    """Manifest is in the wrong state for the requested operation (e.g. already split)."""


class ConfigurationError(UsgroundError):
    """Invalid configuration value (e.g. adapter rank out of range)."""


class PlanError(UsgroundError):
    """An injection plan names a target that does not resolve in the model."""


class AdapterStateError(UsgroundError):
    """Adapter lifecycle violation (e.g. merging a model with no adapters)."""


class PromptError(UsgroundError):
    """Empty or otherwise unusable prompt, or an invalid mask request."""


class CapacityError(UsgroundError):
    """More ground-truth objects than the detector has queries."""


class NumericError(UsgroundError):
    """Non-finite values where finite numbers are required."""


class TrainingDivergedError(UsgroundError):
    """Training loss became non-finite; the run was aborted."""


class BackendError(UsgroundError):
    """A named detector or masker backend could not be loaded."""


class EvaluationError(UsgroundError):
    """Evaluation was asked to run on an empty or unusable sample set."""
