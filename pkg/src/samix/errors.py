"""Exception hierarchy shared across the package."""


class SamixError(Exception):
    """Base class for all package errors."""


class AudioFormatError(SamixError):
    """WAV file violates the mono / 16 kHz / PCM16-or-float32 contract."""


class ManifestError(SamixError):
    """Corpus manifest is missing, malformed, or violates an invariant."""


class SimulationError(SamixError):
    """Mixture rendering cannot satisfy the requested scenario."""


class EnrollmentError(SamixError):
    """No eligible enrollment clip for the requested speaker."""


class DegenerateSignalError(SamixError):
    """A signal required to be non-silent has zero RMS."""


class FeatureError(SamixError):
    """Audio too short (or otherwise unusable) for feature extraction."""


class InsufficientDataError(SamixError):
    """Not enough distinct frames to fit the requested codebook."""


class ConfigError(SamixError):
    """Configuration document is invalid or internally inconsistent."""


class ShapeError(SamixError):
    """Tensor shapes do not match the operation's contract."""


class CheckpointError(SamixError):
    """Checkpoint file is corrupt or incompatible with the config."""


class DegenerateBatchError(SamixError):
    """Batch cannot be scored (e.g. empty mask set)."""


class TrainingError(SamixError):
    """Training aborted (non-finite loss or invalid state)."""
