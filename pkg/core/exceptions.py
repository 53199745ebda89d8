"""Exception hierarchy shared by every package in the toolkit."""


class IncrementalDetectionError(Exception):
    """Base class for all toolkit errors."""


class GeometryError(IncrementalDetectionError, ValueError):
    """Invalid or degenerate box geometry."""


class ConfigError(IncrementalDetectionError, ValueError):
    """Configuration failed validation."""


class DatasetError(IncrementalDetectionError):
    """Dataset could not be fetched, built or loaded."""


class ManifestError(DatasetError):
    """Malformed dataset manifest or annotation."""


class ProviderError(IncrementalDetectionError):
    """A dataset-construction provider failed."""


class DistillationError(IncrementalDetectionError):
    """Distillation loss preconditions were violated."""


class TrainingError(IncrementalDetectionError):
    """Training task could not run."""


class ExemplarError(IncrementalDetectionError):
    """Exemplar selection or merge failed."""


class SnapshotError(IncrementalDetectionError):
    """Snapshot container is corrupt, truncated or incompatible."""


class VocabularyError(IncrementalDetectionError, ValueError):
    """Class names do not match the model vocabulary."""


class TaskNotFoundError(IncrementalDetectionError, KeyError):
    """Unknown learning task id."""


class TransferError(IncrementalDetectionError):
    """Snapshot transfer failed integrity verification."""
