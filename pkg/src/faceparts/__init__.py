"""Attribute detection from partial faces via fiducial-driven segments.

The package splits a face raster into 14 fiducial-defined segments, trains
a multi-branch convolutional network (one branch per segment plus a
full-face branch and a global branch), prunes each attribute to the
segments that predict it best, and fuses the per-segment scores with
threshold-calibrated committee machines so that attributes remain
predictable when only part of the face is visible.
"""

from .errors import FacepartsError
from .geometry import (
    DEFAULT_TAU,
    PREDICTORS,
    SEGMENTS,
    BoundingBox,
    FiducialSet,
    PartialVariant,
    SegmentId,
    all_segment_boxes,
    hflip,
    make_partial,
    segment_box,
    segment_visibility,
)

__version__ = "0.1.0"

__all__ = [
    "FacepartsError",
    "DEFAULT_TAU",
    "PREDICTORS",
    "SEGMENTS",
    "BoundingBox",
    "FiducialSet",
    "PartialVariant",
    "SegmentId",
    "all_segment_boxes",
    "hflip",
    "make_partial",
    "segment_box",
    "segment_visibility",
    "__version__",
]
