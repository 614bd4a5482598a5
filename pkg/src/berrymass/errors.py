"""Exception types raised across the package."""


class BerryMassError(Exception):
    """Base class for all package errors."""


class FormatError(BerryMassError):
    """A file does not follow the expected on-disk format."""


class ConsistencyError(BerryMassError):
    """Inputs disagree with each other (dimensions, ids, ...)."""


class ValidationError(BerryMassError):
    """A value is outside its allowed domain."""


class EmptyCloudError(BerryMassError):
    """No usable 3-D points could be produced."""


class SamplingError(BerryMassError):
    """Synthetic sampling produced too few points."""


class RenderError(BerryMassError):
    """Nothing from the cloud lands inside the image frame."""


class OcclusionError(BerryMassError):
    """Requested occlusion coverage could not be achieved."""


class AxisUndefinedError(BerryMassError):
    """Symmetry axis cannot be determined from the mask."""


class DivisionUndefinedError(BerryMassError):
    """A ratio metric has an empty denominator."""


class BackfillError(BerryMassError):
    """No valid depth is available to backfill restored pixels."""


class ShapeError(BerryMassError):
    """Array shapes within a batch do not line up."""


class ArityError(BerryMassError):
    """An operation received an empty collection."""


class SplitError(BerryMassError):
    """Region split failed (too few points or degenerate covariance)."""


class SparseNeighborhoodError(BerryMassError):
    """Too few neighbours inside the apex search radius."""


class RankDeficiencyError(BerryMassError):
    """Points or samples do not determine a unique fit."""


class IndeterminateAxisError(BerryMassError):
    """The projected fruit axis is too short to normalise."""


class AreaUnavailableError(BerryMassError):
    """No depth is available anywhere on the fruit."""


class FitError(BerryMassError):
    """Polynomial calibration failed."""
