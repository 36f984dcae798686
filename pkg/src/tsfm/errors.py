"""Exception and warning types raised across the package."""


class TSFMError(Exception):
    """Base class for every error raised by tsfm."""


# dataset pool
class PoolError(TSFMError, ValueError):
    pass


class DuplicateDatasetId(PoolError):
    pass


class ConflictingSemanticName(PoolError):
    pass


class EmptySpecList(PoolError):
    pass


class UnknownDatasetId(PoolError, KeyError):
    pass


class UnmappedLabelValue(PoolError):
    def __init__(self, dataset_id, value, count):
        self.dataset_id = dataset_id
        self.value = int(value)
        self.count = int(count)
        super().__init__(
            f"label value {self.value} ({self.count} voxels) is not annotated by dataset {dataset_id!r}"
        )


# volume I/O
class VolumeError(TSFMError, ValueError):
    pass


class UnsupportedDatatype(VolumeError):
    pass


class CorruptHeader(VolumeError):
    pass


class DimensionalityError(VolumeError):
    pass


class DegenerateOutput(VolumeError):
    pass


class IncompatibleVersion(TSFMError, ValueError):
    pass


# model
class ConfigInvariantViolation(TSFMError, ValueError):
    pass


class ShapeMismatch(TSFMError, ValueError):
    pass


class OddSpatialDim(ShapeMismatch):
    pass


class SkipShapeMismatch(ShapeMismatch):
    pass


class TokenCountMismatch(ShapeMismatch):
    pass


class DivisibilityError(ShapeMismatch):
    pass


class FingerprintMismatch(TSFMError, ValueError):
    pass


# training
class NonFiniteGradient(TSFMError, FloatingPointError):
    def __init__(self, name):
        self.name = name
        super().__init__(f"non-finite gradient in {name!r}")


class DivergedLoss(TSFMError, FloatingPointError):
    pass


# evaluation / transfer
class CaseMismatch(TSFMError, ValueError):
    pass


class ArchitectureMismatch(TSFMError, ValueError):
    pass


class PlanStale(TSFMError, ValueError):
    pass


class EmptyForeground(UserWarning):
    """Foreground oversampling requested on a label grid with no foreground."""


class AllClassesMasked(UserWarning):
    """Every class channel was masked out of a loss term."""
