"""Facial segment geometry over 21 fiducial keypoints.

A face is carved into 14 rectangular segments (halves, three-fourths,
eye-pair, nose) by closed-form min/max formulas over fiducial coordinates.
Each segment is usable only when every fiducial its formula references is
visible above a threshold.

Coordinates are pixels with (0, 0) at the top-left corner; boxes store
inclusive corners.  All box arithmetic is plain Python floats so results
are bit-reproducible against a scalar transcription of the formulas.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace

import numpy as np

from .errors import EmptyIntersection, InsufficientVisibility

DEFAULT_TAU = 0.5

# Fill color for occluded regions in partial variants.
OCCLUSION_FILL = (255, 255, 255)


class SegmentId(enum.Enum):
    """The 16 predictors: full face, 14 facial segments, global predictor.

    Enum values are the canonical predictor indices used everywhere a
    predictor ordering matters (score matrices, checkpoints, fusion).
    """

    FULL = 0
    UL12 = 1
    U12 = 2
    UR12 = 3
    UL34 = 4
    U34 = 5
    UR34 = 6
    L12 = 7
    L34 = 8
    EP = 9
    NS = 10
    R12 = 11
    R34 = 12
    B34 = 13
    B12 = 14
    GP = 15

    @property
    def is_segment(self) -> bool:
        return 1 <= self.value <= 14


#: The 14 croppable segments in canonical (predictor-index) order.
SEGMENTS: tuple[SegmentId, ...] = tuple(
    s for s in sorted(SegmentId, key=lambda s: s.value) if s.is_segment
)

#: All 16 predictors in canonical order.
PREDICTORS: tuple[SegmentId, ...] = tuple(sorted(SegmentId, key=lambda s: s.value))


class PartialVariant(enum.Enum):
    """The six occluded dataset variants: only the named segment is kept."""

    P_L12 = SegmentId.L12
    P_L34 = SegmentId.L34
    P_R12 = SegmentId.R12
    P_R34 = SegmentId.R34
    P_U12 = SegmentId.U12
    P_U34 = SegmentId.U34

    @property
    def kept_segment(self) -> SegmentId:
        return self.value

    @classmethod
    def from_name(cls, name: str) -> "PartialVariant":
        key = name.upper().replace("-", "_")
        if not key.startswith("P_"):
            key = "P_" + key
        return cls[key]


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box with inclusive corners."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise ValueError(f"inverted box: {self}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    def contains_point(self, x: float, y: float) -> bool:
        return self.x_min <= x <= self.x_max and self.y_min <= y <= self.y_max

    def clamped(self, width: int, height: int) -> "BoundingBox":
        """Clamp to the raster [0, width-1] x [0, height-1]."""
        return BoundingBox(
            min(max(self.x_min, 0.0), width - 1.0),
            min(max(self.y_min, 0.0), height - 1.0),
            min(max(self.x_max, 0.0), width - 1.0),
            min(max(self.y_max, 0.0), height - 1.0),
        )

    def mirrored(self, width: int) -> "BoundingBox":
        return BoundingBox(
            width - 1.0 - self.x_max, self.y_min, width - 1.0 - self.x_min, self.y_max
        )


@dataclass(frozen=True)
class FiducialSet:
    """21 fiducial points with visibilities plus the full-face box.

    ``points`` is a tuple of 21 (x, y) pairs indexed 0..20; formulas below
    use the conventional 1-based indices, so point k lives at points[k-1].
    """

    points: tuple[tuple[float, float], ...]
    visibility: tuple[float, ...]
    face_box: BoundingBox
    image_width: int
    image_height: int

    def __post_init__(self):
        if len(self.points) != 21:
            raise ValueError(f"expected 21 fiducials, got {len(self.points)}")
        if len(self.visibility) != 21:
            raise ValueError(f"expected 21 visibilities, got {len(self.visibility)}")
        for v in self.visibility:
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"visibility {v} outside [0, 1]")

    def x(self, k: int) -> float:
        """x-coordinate of 1-based fiducial k."""
        return self.points[k - 1][0]

    def y(self, k: int) -> float:
        """y-coordinate of 1-based fiducial k."""
        return self.points[k - 1][1]

    def v(self, k: int) -> float:
        """Visibility of 1-based fiducial k."""
        return self.visibility[k - 1]


@dataclass(frozen=True)
class SegmentCrop:
    """One segment's resized pixel block, ready for a predictor input.

    ``pixels`` is HxWx3 in [0, 1]; invisible crops are all-zero and carry
    no source box.
    """

    segment: SegmentId
    pixels: np.ndarray
    source_box: BoundingBox | None
    visible: bool

    @classmethod
    def invisible(cls, segment: SegmentId, size: int) -> "SegmentCrop":
        return cls(segment, np.zeros((size, size, 3)), None, False)


# 1-based fiducial indices each segment's box formula references.  A
# segment is computable only when all of these are visible.  FULL uses the
# face box alone.
REQUIRED_FIDUCIALS: dict[SegmentId, frozenset[int]] = {
    SegmentId.FULL: frozenset(),
    SegmentId.UL12: frozenset({3, 9, 14, 15, 16, 19}),
    SegmentId.U12: frozenset({14, 15, 16}),
    SegmentId.UR12: frozenset({4, 10, 14, 15, 16, 19}),
    SegmentId.UL34: frozenset({5, 11, 16, 18, 19, 20}),
    SegmentId.U34: frozenset({18, 19, 20}),
    SegmentId.UR34: frozenset({2, 8, 14, 18, 19, 20}),
    SegmentId.L12: frozenset({3, 15, 19}),
    SegmentId.L34: frozenset({5, 11, 16, 20}),
    SegmentId.EP: frozenset(range(1, 13)),
    SegmentId.NS: frozenset({8, 11, 14, 15, 16, 18, 19, 20}),
    SegmentId.R12: frozenset({4, 10, 15, 16, 19}),
    SegmentId.R34: frozenset({2, 8, 14, 18}),
    SegmentId.B34: frozenset(range(7, 13)),
    SegmentId.B12: frozenset({14, 15, 16}),
}

# Index remap applied when an image is mirrored: left/right feature points
# swap partners, center-line points stay put.  Derived from the mirror
# symmetry of the box formulas (e.g. the UL34 index set must map onto the
# UR34 set).  1-based pairs.
_HFLIP_PAIRS = ((1, 6), (2, 5), (3, 4), (7, 12), (8, 11), (9, 10), (14, 16), (18, 20))

HFLIP_INDEX_MAP: tuple[int, ...] = tuple(range(1, 22))


def _build_hflip_map() -> tuple[int, ...]:
    m = list(range(1, 22))
    for a, b in _HFLIP_PAIRS:
        m[a - 1], m[b - 1] = b, a
    return tuple(m)


HFLIP_INDEX_MAP = _build_hflip_map()

# Left/right segment identity swap under mirroring.
HFLIP_SEGMENT_MAP: dict[SegmentId, SegmentId] = {
    **{s: s for s in PREDICTORS},
    SegmentId.UL12: SegmentId.UR12,
    SegmentId.UR12: SegmentId.UL12,
    SegmentId.UL34: SegmentId.UR34,
    SegmentId.UR34: SegmentId.UL34,
    SegmentId.L12: SegmentId.R12,
    SegmentId.R12: SegmentId.L12,
    SegmentId.L34: SegmentId.R34,
    SegmentId.R34: SegmentId.L34,
}


def compute_deltas(f: FiducialSet) -> tuple[float, float]:
    """Vertical margins used by the eye-pair and nose boxes.

    delta_ep is the largest eyebrow-to-eye vertical gap over the pairs
    (7,1) .. (12,6); delta_nose is half the mouth-to-nose-top span.
    """
    delta_ep = max(abs(f.y(i) - f.y(i - 6)) for i in range(7, 13))
    delta_nose = 0.5 * (
        max(f.y(18), f.y(19), f.y(20)) - min(f.y(14), f.y(15), f.y(16))
    )
    return delta_ep, delta_nose


def _raw_segment_box(f: FiducialSet, seg: SegmentId) -> BoundingBox:
    """Evaluate the box formula for one segment, without visibility checks.

    EP and NS clamp against the face box inside their own formulas; every
    other segment is built directly from face-box corners and fiducial
    extremes.  The caller clamps the result to the raster afterwards.
    """
    tl_x, tl_y = f.face_box.x_min, f.face_box.y_min
    br_x, br_y = f.face_box.x_max, f.face_box.y_max

    if seg is SegmentId.FULL:
        return f.face_box

    if seg is SegmentId.EP:
        delta_ep, _ = compute_deltas(f)
        xs = [f.x(i) for i in range(1, 13)]
        ys = [f.y(i) for i in range(1, 13)]
        return BoundingBox(
            max(tl_x, min(xs)),
            max(tl_y, min(ys) - delta_ep),
            min(br_x, max(xs)),
            min(br_y, max(ys) + delta_ep),
        )

    if seg is SegmentId.NS:
        _, delta_ns = compute_deltas(f)
        mid_y = (f.y(14) + f.y(15) + f.y(16)) / 3.0
        # The bottom edge takes max(H, .) as defined, which always reaches
        # the face-box bottom for in-raster boxes; raster clamping follows.
        return BoundingBox(
            max(tl_x, min(f.x(i) for i in (8, 14, 15, 16, 18))),
            max(tl_y, max(0.0, mid_y - 2.0 * delta_ns)),
            min(br_x, max(f.x(i) for i in (11, 14, 15, 16, 20))),
            min(br_y, max(float(f.image_height), mid_y + 2.0 * delta_ns)),
        )

    nose_top_max = max(f.y(14), f.y(15), f.y(16))
    nose_top_min = min(f.y(14), f.y(15), f.y(16))
    mouth_max = max(f.y(18), f.y(19), f.y(20))

    if seg is SegmentId.UL12:
        return BoundingBox(
            tl_x, tl_y, max(f.x(i) for i in (3, 9, 14, 15, 19)), nose_top_max
        )
    if seg is SegmentId.U12:
        return BoundingBox(tl_x, tl_y, br_x, nose_top_max)
    if seg is SegmentId.UR12:
        return BoundingBox(
            min(f.x(i) for i in (4, 10, 15, 16, 19)), tl_y, br_x, nose_top_max
        )
    if seg is SegmentId.UL34:
        return BoundingBox(
            tl_x, tl_y, max(f.x(i) for i in (5, 11, 16, 20)), mouth_max
        )
    if seg is SegmentId.U34:
        return BoundingBox(tl_x, tl_y, br_x, mouth_max)
    if seg is SegmentId.UR34:
        return BoundingBox(
            min(f.x(i) for i in (2, 8, 14, 18)), tl_y, br_x, mouth_max
        )
    if seg is SegmentId.L12:
        return BoundingBox(tl_x, tl_y, max(f.x(i) for i in (3, 15, 19)), br_y)
    if seg is SegmentId.L34:
        return BoundingBox(tl_x, tl_y, max(f.x(i) for i in (5, 11, 16, 20)), br_y)
    if seg is SegmentId.R12:
        return BoundingBox(
            min(f.x(i) for i in (4, 10, 15, 16, 19)), tl_y, br_x, br_y
        )
    if seg is SegmentId.R34:
        return BoundingBox(min(f.x(i) for i in (2, 8, 14, 18)), tl_y, br_x, br_y)
    if seg is SegmentId.B12:
        return BoundingBox(tl_x, nose_top_min, br_x, br_y)
    if seg is SegmentId.B34:
        return BoundingBox(tl_x, min(f.y(i) for i in range(7, 13)), br_x, br_y)

    raise ValueError(f"no box formula for {seg}")


def check_visibility(f: FiducialSet, seg: SegmentId, tau: float) -> list[int]:
    """1-based indices required by ``seg`` whose visibility falls below tau."""
    return [k for k in sorted(REQUIRED_FIDUCIALS[seg]) if f.v(k) < tau]


def segment_box(f: FiducialSet, seg: SegmentId, tau: float = DEFAULT_TAU) -> BoundingBox:
    """Bounding box of one segment, clamped to the raster.

    Raises InsufficientVisibility when any fiducial the formula references
    has visibility below ``tau``.
    """
    failed = check_visibility(f, seg, tau)
    if failed:
        raise InsufficientVisibility(seg.name, failed, tau)
    return _raw_segment_box(f, seg).clamped(f.image_width, f.image_height)


def all_segment_boxes(
    f: FiducialSet, tau: float = DEFAULT_TAU
) -> dict[SegmentId, BoundingBox | InsufficientVisibility]:
    """Boxes for FULL plus all 14 segments; per-entry failures as values."""
    out: dict[SegmentId, BoundingBox | InsufficientVisibility] = {}
    for seg in (SegmentId.FULL,) + SEGMENTS:
        try:
            out[seg] = segment_box(f, seg, tau)
        except InsufficientVisibility as err:
            out[seg] = err
    return out


def segment_visibility(f: FiducialSet, tau: float = DEFAULT_TAU) -> dict[SegmentId, bool]:
    """Usability of each of the 16 predictors (FULL and GP always usable)."""
    vis = {SegmentId.FULL: True, SegmentId.GP: True}
    for seg in SEGMENTS:
        vis[seg] = not check_visibility(f, seg, tau)
    return vis


def _pixel_box(box: BoundingBox, width: int, height: int) -> tuple[int, int, int, int]:
    """Round an inclusive box to integer pixel corners within the raster."""
    x0 = max(int(round(box.x_min)), 0)
    y0 = max(int(round(box.y_min)), 0)
    x1 = min(int(round(box.x_max)), width - 1)
    y1 = min(int(round(box.y_max)), height - 1)
    return x0, y0, x1, y1


def bilinear_resize(src: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resampling of an HxWxC (or HxW) raster to out_h x out_w.

    Output pixel centers map into the source through half-pixel alignment:
    src_pos = (dst + 0.5) * (in / out) - 0.5, clamped to the edges, so an
    identity-size resize reproduces the input exactly.
    """
    in_h, in_w = src.shape[:2]
    if (in_h, in_w) == (out_h, out_w):
        return src.copy()
    work = src.astype(np.float64, copy=False)

    ys = (np.arange(out_h) + 0.5) * (in_h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (in_w / out_w) - 0.5
    ys = np.clip(ys, 0.0, in_h - 1.0)
    xs = np.clip(xs, 0.0, in_w - 1.0)

    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    wy = (ys - y0).reshape(-1, 1)
    wx = (xs - x0).reshape(1, -1)
    if src.ndim == 3:
        wy = wy[..., None]
        wx = wx[..., None]

    top = work[y0][:, x0] * (1 - wx) + work[y0][:, x1] * wx
    bot = work[y1][:, x0] * (1 - wx) + work[y1][:, x1] * wx
    out = top * (1 - wy) + bot * wy
    if np.issubdtype(src.dtype, np.integer):
        info = np.iinfo(src.dtype)
        return np.clip(np.rint(out), info.min, info.max).astype(src.dtype)
    return out.astype(src.dtype)


def crop_and_resize(
    image: np.ndarray, box: BoundingBox, out_w: int, out_h: int
) -> np.ndarray:
    """Crop an inclusive box from an HxWxC image and bilinear-resize it.

    The box is rounded to whole pixels before cropping.  Raises
    EmptyIntersection when the rounded box misses the raster.
    """
    h, w = image.shape[:2]
    x0, y0, x1, y1 = _pixel_box(box, w, h)
    if x0 > x1 or y0 > y1 or x1 < 0 or y1 < 0 or x0 > w - 1 or y0 > h - 1:
        raise EmptyIntersection(f"box {box} does not intersect {w}x{h} image")
    crop = image[y0 : y1 + 1, x0 : x1 + 1]
    return bilinear_resize(crop, out_h, out_w)


def make_partial(
    image: np.ndarray,
    f: FiducialSet,
    variant: PartialVariant,
    tau: float = DEFAULT_TAU,
) -> tuple[np.ndarray, FiducialSet]:
    """Occlude everything outside one retained segment with white pixels.

    Fiducials falling outside the retained box get visibility 0; the
    operation is idempotent.  Propagates InsufficientVisibility when the
    retained segment cannot be computed.
    """
    seg = variant.kept_segment
    box = segment_box(f, seg, tau)
    h, w = image.shape[:2]
    x0, y0, x1, y1 = _pixel_box(box, w, h)

    out = np.empty_like(image)
    fill = np.asarray(OCCLUSION_FILL, dtype=np.float64)
    if np.issubdtype(image.dtype, np.floating):
        fill = fill / 255.0  # white in the unit-range convention
    out[:] = fill.astype(image.dtype)
    out[y0 : y1 + 1, x0 : x1 + 1] = image[y0 : y1 + 1, x0 : x1 + 1]

    vis = tuple(
        f.visibility[k] if box.contains_point(*f.points[k]) else 0.0
        for k in range(21)
    )
    return out, replace(f, visibility=vis)


def hflip(
    image: np.ndarray, f: FiducialSet
) -> tuple[np.ndarray, FiducialSet, dict[SegmentId, SegmentId]]:
    """Mirror an image and its fiducials about the vertical axis.

    Fiducial indices are remapped to their mirror partners so the box
    formulas keep their anatomical meaning, and the returned segment remap
    swaps left/right segment identities.  Applying hflip twice restores
    the original image and fiducial set.
    """
    w = f.image_width
    flipped = image[:, ::-1].copy()
    points = [None] * 21
    vis = [0.0] * 21
    for k in range(1, 22):
        src = HFLIP_INDEX_MAP[k - 1]
        x, y = f.points[src - 1]
        points[k - 1] = (w - 1.0 - x, y)
        vis[k - 1] = f.visibility[src - 1]
    out = FiducialSet(
        points=tuple(points),
        visibility=tuple(vis),
        face_box=f.face_box.mirrored(w),
        image_width=f.image_width,
        image_height=f.image_height,
    )
    return flipped, out, dict(HFLIP_SEGMENT_MAP)
