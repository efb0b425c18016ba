"""Exception types shared across the pipeline.

Every failure mode that callers are expected to handle gets its own class so
tests and the CLI can match on type rather than message text.
"""


class DynsplatError(Exception):
    """Base class for all pipeline errors."""


class NonPositiveDepthError(DynsplatError):
    """A point to be projected lies at or behind the camera plane."""


class InvalidDepthError(DynsplatError):
    """A depth value used for backprojection is non-positive or non-finite."""


class DegenerateBaselineError(DynsplatError):
    """Two cameras are too close for a meaningful epipolar geometry."""


class EmptyMaskError(DynsplatError):
    """An operation that needs foreground pixels received an empty mask."""


class EmptyMotionError(DynsplatError):
    """No motion evidence at all (every epipolar-error mask is empty)."""


class DegenerateFitError(DynsplatError):
    """A least-squares fit has too few pixels or no spread to constrain it."""


class MissingObjectMaskError(DynsplatError):
    """A track's origin object has no mask pixels at the requested frame."""


class NoNodesError(DynsplatError):
    """A scaffold operation was asked to run on a graph with no nodes."""


class DimensionMismatchError(DynsplatError):
    """Two rasters that must share a shape do not."""


class NonFiniteLossError(DynsplatError):
    """A loss term evaluated to NaN or infinity; the message names the term."""


class DivergenceDetectedError(DynsplatError):
    """The optimizer's loss grew past the divergence guard."""


class InvalidSpecError(DynsplatError):
    """A synthetic scene description is inconsistent or unsupported."""


class NoValidDepthError(DynsplatError):
    """A depth raster has no valid pixels where one was required."""
