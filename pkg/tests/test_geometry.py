"""Segment-box formulas, partial occlusion, mirroring, and resampling.

The core check compares `segment_box` against `oracle_boxes`, a deliberately
independent straight-line scalar transcription of the same min/max formulas,
and requires bit-exact equality on face-like fiducial sets.
"""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from faceparts.errors import EmptyIntersection, InsufficientVisibility
from faceparts.geometry import (
    DEFAULT_TAU,
    HFLIP_INDEX_MAP,
    PREDICTORS,
    REQUIRED_FIDUCIALS,
    SEGMENTS,
    BoundingBox,
    FiducialSet,
    PartialVariant,
    SegmentId,
    all_segment_boxes,
    bilinear_resize,
    compute_deltas,
    crop_and_resize,
    hflip,
    make_partial,
    segment_box,
    segment_visibility,
)
from faceparts.synthetic import CANONICAL_POINTS, canonical_fiducials

# ---------------------------------------------------------------------------
# Independent oracle: a straight-line transcription of every box formula,
# computed with plain scalar arithmetic on raw coordinate lists.
# ---------------------------------------------------------------------------


def oracle_boxes(xs, ys, tlx, tly, brx, bry, width, height):
    """All 15 boxes (FULL + 14 segments) as (x0, y0, x1, y1) tuples.

    xs/ys are 21-element lists; index k-1 holds fiducial k.  Every formula
    is written out longhand so this stays independent of the library code.
    """

    def clamp(box):
        x0, y0, x1, y1 = box
        return (
            min(max(x0, 0.0), width - 1.0),
            min(max(y0, 0.0), height - 1.0),
            min(max(x1, 0.0), width - 1.0),
            min(max(y1, 0.0), height - 1.0),
        )

    x = lambda k: xs[k - 1]
    y = lambda k: ys[k - 1]

    delta_ep = max(
        abs(y(7) - y(1)), abs(y(8) - y(2)), abs(y(9) - y(3)),
        abs(y(10) - y(4)), abs(y(11) - y(5)), abs(y(12) - y(6)),
    )
    delta_ns = 0.5 * (max(y(18), y(19), y(20)) - min(y(14), y(15), y(16)))
    nose_max = max(y(14), y(15), y(16))
    nose_min = min(y(14), y(15), y(16))
    mouth_max = max(y(18), y(19), y(20))
    mid_y = (y(14) + y(15) + y(16)) / 3.0

    out = {}
    out["FULL"] = clamp((tlx, tly, brx, bry))
    out["UL12"] = clamp(
        (tlx, tly, max(x(3), x(9), x(14), x(15), x(19)), nose_max)
    )
    out["U12"] = clamp((tlx, tly, brx, nose_max))
    out["UR12"] = clamp(
        (min(x(4), x(10), x(15), x(16), x(19)), tly, brx, nose_max)
    )
    out["UL34"] = clamp((tlx, tly, max(x(5), x(11), x(16), x(20)), mouth_max))
    out["U34"] = clamp((tlx, tly, brx, mouth_max))
    out["UR34"] = clamp((min(x(2), x(8), x(14), x(18)), tly, brx, mouth_max))
    out["L12"] = clamp((tlx, tly, max(x(3), x(15), x(19)), bry))
    out["L34"] = clamp((tlx, tly, max(x(5), x(11), x(16), x(20)), bry))
    out["EP"] = clamp(
        (
            max(tlx, min(x(1), x(2), x(3), x(4), x(5), x(6),
                         x(7), x(8), x(9), x(10), x(11), x(12))),
            max(tly, min(y(1), y(2), y(3), y(4), y(5), y(6),
                         y(7), y(8), y(9), y(10), y(11), y(12)) - delta_ep),
            min(brx, max(x(1), x(2), x(3), x(4), x(5), x(6),
                         x(7), x(8), x(9), x(10), x(11), x(12))),
            min(bry, max(y(1), y(2), y(3), y(4), y(5), y(6),
                         y(7), y(8), y(9), y(10), y(11), y(12)) + delta_ep),
        )
    )
    out["NS"] = clamp(
        (
            max(tlx, min(x(8), x(14), x(15), x(16), x(18))),
            max(tly, max(0.0, mid_y - 2.0 * delta_ns)),
            min(brx, max(x(11), x(14), x(15), x(16), x(20))),
            min(bry, max(float(height), mid_y + 2.0 * delta_ns)),
        )
    )
    out["R12"] = clamp(
        (min(x(4), x(10), x(15), x(16), x(19)), tly, brx, bry)
    )
    out["R34"] = clamp((min(x(2), x(8), x(14), x(18)), tly, brx, bry))
    out["B34"] = clamp(
        (tlx, min(y(7), y(8), y(9), y(10), y(11), y(12)), brx, bry)
    )
    out["B12"] = clamp((tlx, nose_min, brx, bry))
    return out


# ---------------------------------------------------------------------------
# Face-like fiducial-set generators.
# ---------------------------------------------------------------------------


def build_face(points, face_box, width=100, height=100, visibility=None):
    return FiducialSet(
        points=tuple(points),
        visibility=tuple(visibility) if visibility is not None else (1.0,) * 21,
        face_box=face_box,
        image_width=width,
        image_height=height,
    )


def jittered_face(rng, width=None, height=None, max_offset_frac=0.2):
    """Scaled/translated/jittered variant of the canonical layout."""
    width = int(rng.integers(150, 320)) if width is None else width
    height = int(rng.integers(150, 320)) if height is None else height
    s = float(rng.uniform(0.6, 1.2)) * min(width, height) / 201.0
    cx = width / 2.0 + float(rng.uniform(-max_offset_frac, max_offset_frac)) * width
    cy = height / 2.0 + float(rng.uniform(-max_offset_frac, max_offset_frac)) * height
    jit = rng.uniform(-3.0, 3.0, size=(21, 2)) * s
    points = [
        (float((px - 100.0) * s + cx + jit[k, 0]),
         float((py - 112.0) * s + cy + jit[k, 1]))
        for k, (px, py) in enumerate(CANONICAL_POINTS)
    ]
    box = BoundingBox(
        float((40.0 - 100.0) * s + cx), float((30.0 - 112.0) * s + cy),
        float((160.0 - 100.0) * s + cx), float((190.0 - 112.0) * s + cy),
    )
    return build_face(points, box, width, height)


def example_face():
    """100x100 face whose coordinates reproduce every worked example."""
    points = [
        (22.0, 30.0), (30.0, 31.0), (40.0, 36.0), (60.0, 36.0), (70.0, 31.0), (78.0, 30.0),
        (22.0, 34.0), (30.0, 35.0), (40.0, 40.0), (60.0, 40.0), (70.0, 35.0), (78.0, 34.0),
        (50.0, 45.0),
        (35.0, 50.0), (50.0, 52.0), (65.0, 51.0),
        (50.0, 56.0),
        (38.0, 60.0), (50.0, 62.0), (62.0, 61.0),
        (50.0, 75.0),
    ]
    return build_face(points, BoundingBox(10.0, 10.0, 90.0, 90.0))


# ---------------------------------------------------------------------------
# Oracle comparison: bit-exact equality on 25 synthetic fiducial sets.
# ---------------------------------------------------------------------------


class TestOracleAgreement:
    def test_boxes_match_scalar_transcription_exactly(self):
        rng = np.random.default_rng(20240913)
        faces = [canonical_fiducials(), example_face()]
        faces += [jittered_face(rng) for _ in range(23)]
        assert len(faces) == 25
        for f in faces:
            xs = [p[0] for p in f.points]
            ys = [p[1] for p in f.points]
            expected = oracle_boxes(
                xs, ys,
                f.face_box.x_min, f.face_box.y_min,
                f.face_box.x_max, f.face_box.y_max,
                f.image_width, f.image_height,
            )
            for seg in (SegmentId.FULL,) + SEGMENTS:
                got = segment_box(f, seg)
                assert (got.x_min, got.y_min, got.x_max, got.y_max) == expected[seg.name], seg

    def test_clamping_engages_when_face_exceeds_raster(self):
        rng = np.random.default_rng(7)
        f = jittered_face(rng, width=150, height=150, max_offset_frac=0.45)
        boxes = [segment_box(f, seg) for seg in (SegmentId.FULL,) + SEGMENTS]
        for b in boxes:
            assert 0.0 <= b.x_min <= b.x_max <= 149.0
            assert 0.0 <= b.y_min <= b.y_max <= 149.0


# ---------------------------------------------------------------------------
# Worked examples.
# ---------------------------------------------------------------------------


class TestWorkedExamples:
    def test_delta_ep_uniform_gap(self):
        f = example_face()
        delta_ep, _ = compute_deltas(f)
        assert delta_ep == 4.0

    def test_delta_nose(self):
        _, delta_ns = compute_deltas(example_face())
        assert delta_ns == 0.5 * (62.0 - 50.0) == 6.0

    def test_all_rows_equal_gives_zero_deltas(self):
        points = [(10.0 + 3.0 * k, 40.0) for k in range(21)]
        f = build_face(points, BoundingBox(5.0, 5.0, 95.0, 95.0))
        assert compute_deltas(f) == (0.0, 0.0)

    def test_u12_box(self):
        b = segment_box(example_face(), SegmentId.U12)
        assert (b.x_min, b.y_min, b.x_max, b.y_max) == (10.0, 10.0, 90.0, 52.0)

    def test_b12_box(self):
        b = segment_box(example_face(), SegmentId.B12)
        assert (b.x_min, b.y_min, b.x_max, b.y_max) == (10.0, 50.0, 90.0, 90.0)

    def test_ep_box(self):
        b = segment_box(example_face(), SegmentId.EP)
        assert (b.x_min, b.y_min, b.x_max, b.y_max) == (22.0, 26.0, 78.0, 44.0)

    def test_all_visible_yields_fifteen_boxes(self):
        out = all_segment_boxes(example_face())
        assert len(out) == 15
        assert all(isinstance(b, BoundingBox) for b in out.values())
        assert out[SegmentId.FULL] == example_face().face_box

    def test_point_14_invisible_fails_exactly_its_dependents(self):
        f = example_face()
        vis = [1.0] * 21
        vis[13] = 0.0
        f = build_face(f.points, f.face_box, visibility=vis)
        out = all_segment_boxes(f, tau=0.5)
        needs_14 = {s for s in out if 14 in REQUIRED_FIDUCIALS[s]}
        assert needs_14 == {
            SegmentId.UL12, SegmentId.U12, SegmentId.UR12, SegmentId.UR34,
            SegmentId.NS, SegmentId.R34, SegmentId.B12,
        }
        for seg, val in out.items():
            if seg in needs_14:
                assert isinstance(val, InsufficientVisibility)
                assert val.failed_indices == [14]
            else:
                assert isinstance(val, BoundingBox)

    def test_tau_zero_is_vacuous(self):
        f = example_face()
        vis = [0.0] * 21
        f_blind = build_face(f.points, f.face_box, visibility=vis)
        assert all_segment_boxes(f_blind, tau=0.0) == all_segment_boxes(f, tau=0.0)

    def test_segment_visibility_full_and_gp_always_usable(self):
        f = build_face(example_face().points, example_face().face_box,
                       visibility=[0.0] * 21)
        vis = segment_visibility(f)
        assert vis[SegmentId.FULL] and vis[SegmentId.GP]
        assert not any(vis[s] for s in SEGMENTS)
        assert len(vis) == 16


# ---------------------------------------------------------------------------
# Structural invariants.
# ---------------------------------------------------------------------------


@st.composite
def face_like(draw):
    seed = draw(st.integers(min_value=0, max_value=2**32 - 1))
    return jittered_face(np.random.default_rng(seed))


class TestInvariants:
    @settings(max_examples=60, deadline=None)
    @given(face_like())
    def test_positive_extent_and_raster_containment(self, f):
        for seg in (SegmentId.FULL,) + SEGMENTS:
            b = segment_box(f, seg)
            assert b.width > 0.0 and b.height > 0.0
            assert 0.0 <= b.x_min and b.x_max <= f.image_width - 1.0
            assert 0.0 <= b.y_min and b.y_max <= f.image_height - 1.0

    @settings(max_examples=60, deadline=None)
    @given(face_like())
    def test_ep_ns_inside_face_box(self, f):
        face = f.face_box.clamped(f.image_width, f.image_height)
        for seg in (SegmentId.EP, SegmentId.NS):
            b = segment_box(f, seg)
            assert face.x_min <= b.x_min and b.x_max <= face.x_max
            assert face.y_min <= b.y_min and b.y_max <= face.y_max

    @settings(max_examples=60, deadline=None)
    @given(face_like())
    def test_u12_bottom_and_b12_top_edges(self, f):
        u12 = segment_box(f, SegmentId.U12)
        b12 = segment_box(f, SegmentId.B12)
        ys = [f.y(k) for k in (14, 15, 16)]
        h = f.image_height
        assert u12.y_max == min(max(max(ys), 0.0), h - 1.0)
        assert b12.y_min == min(max(min(ys), 0.0), h - 1.0)
        assert u12.y_max >= b12.y_min  # the halves overlap, never gap

    @settings(max_examples=40, deadline=None)
    @given(face_like())
    def test_required_fiducials_match_formula_sensitivity(self, f):
        # Moving any *non*-required fiducial far away must not change the box.
        for seg in SEGMENTS:
            base = segment_box(f, seg)
            for k in range(1, 22):
                if k in REQUIRED_FIDUCIALS[seg]:
                    continue
                # Perturbing an unused point's visibility must not matter.
                vis = list(f.visibility)
                vis[k - 1] = 0.0
                moved = build_face(f.points, f.face_box, f.image_width,
                                   f.image_height, vis)
                assert segment_box(moved, seg) == base


# ---------------------------------------------------------------------------
# Mirroring.
# ---------------------------------------------------------------------------

# Segment pairs whose formula index sets are exact mirror images; L12/R12 is
# excluded because the formulas reference asymmetric index sets (3 vs 5
# indices), so their mirror identity holds only when the extra right-side
# indices are not the binding minimum.
MIRROR_EXACT = {
    SegmentId.FULL: SegmentId.FULL,
    SegmentId.UL12: SegmentId.UR12, SegmentId.UR12: SegmentId.UL12,
    SegmentId.UL34: SegmentId.UR34, SegmentId.UR34: SegmentId.UL34,
    SegmentId.L34: SegmentId.R34, SegmentId.R34: SegmentId.L34,
    SegmentId.U12: SegmentId.U12, SegmentId.U34: SegmentId.U34,
    SegmentId.EP: SegmentId.EP, SegmentId.NS: SegmentId.NS,
    SegmentId.B12: SegmentId.B12, SegmentId.B34: SegmentId.B34,
}


class TestHflip:
    def test_involution_on_integer_coordinates(self):
        f = canonical_fiducials()
        img = np.arange(201 * 201 * 3, dtype=np.uint8).reshape(201, 201, 3)
        img2, f2, _ = hflip(img, f)
        img3, f3, _ = hflip(img2, f2)
        assert np.array_equal(img, img3)
        assert f3.points == f.points
        assert f3.visibility == f.visibility
        assert f3.face_box == f.face_box

    @settings(max_examples=40, deadline=None)
    @given(face_like())
    def test_involution_on_jittered_faces(self, f):
        img = np.zeros((f.image_height, f.image_width, 3), dtype=np.uint8)
        _, f2, _ = hflip(img, f)
        _, f3, _ = hflip(img, f2)
        a = np.asarray(f.points)
        b = np.asarray(f3.points)
        assert np.allclose(a, b, atol=1e-9)
        assert f3.visibility == f.visibility

    def test_index_map_is_an_involution(self):
        for k in range(1, 22):
            assert HFLIP_INDEX_MAP[HFLIP_INDEX_MAP[k - 1] - 1] == k

    def test_remap_table(self):
        _, _, remap = hflip(np.zeros((10, 10, 3), dtype=np.uint8),
                            canonical_fiducials(10))
        assert remap[SegmentId.UL12] == SegmentId.UR12
        assert remap[SegmentId.UR12] == SegmentId.UL12
        assert remap[SegmentId.UL34] == SegmentId.UR34
        assert remap[SegmentId.L12] == SegmentId.R12
        assert remap[SegmentId.L34] == SegmentId.R34
        for seg in (SegmentId.U12, SegmentId.U34, SegmentId.EP, SegmentId.NS,
                    SegmentId.B12, SegmentId.B34, SegmentId.FULL, SegmentId.GP):
            assert remap[seg] == seg

    @settings(max_examples=40, deadline=None)
    @given(face_like())
    def test_mirror_symmetric_segments(self, f):
        img = np.zeros((f.image_height, f.image_width, 3), dtype=np.uint8)
        _, flipped, _ = hflip(img, f)
        w = f.image_width
        for seg, partner in MIRROR_EXACT.items():
            got = segment_box(flipped, seg)
            want = segment_box(f, partner).mirrored(w).clamped(w, f.image_height)
            for g, e in [(got.x_min, want.x_min), (got.x_max, want.x_max),
                         (got.y_min, want.y_min), (got.y_max, want.y_max)]:
                assert abs(g - e) < 1e-9, seg

    def test_l12_r12_mirror_on_canonical_face(self):
        f = canonical_fiducials()
        img = np.zeros((201, 201, 3), dtype=np.uint8)
        _, flipped, _ = hflip(img, f)
        l12 = segment_box(flipped, SegmentId.L12)
        r12 = segment_box(f, SegmentId.R12).mirrored(201)
        assert (l12.x_min, l12.y_min, l12.x_max, l12.y_max) == (
            r12.x_min, r12.y_min, r12.x_max, r12.y_max)

    def test_symmetric_layout_is_a_fixed_point(self):
        f = canonical_fiducials()
        img = np.zeros((201, 201, 3), dtype=np.uint8)
        _, flipped, _ = hflip(img, f)
        orig = all_segment_boxes(f)
        after = all_segment_boxes(flipped)
        for seg in orig:
            assert orig[seg] == after[seg], seg


# ---------------------------------------------------------------------------
# Partial-variant occlusion.
# ---------------------------------------------------------------------------


class TestMakePartial:
    def _canvas(self, f):
        rng = np.random.default_rng(3)
        return rng.integers(0, 255, size=(f.image_height, f.image_width, 3),
                            dtype=np.uint8)

    def test_p_u12_whitens_below_the_nose_line(self):
        f = example_face()
        img = self._canvas(f)
        out, _ = make_partial(img, f, PartialVariant.P_U12)
        assert np.all(out[53:] == 255)
        box = segment_box(f, SegmentId.U12)
        x0, y0, x1, y1 = (int(round(box.x_min)), int(round(box.y_min)),
                          int(round(box.x_max)), int(round(box.y_max)))
        assert np.array_equal(out[y0:y1 + 1, x0:x1 + 1],
                              img[y0:y1 + 1, x0:x1 + 1])

    def test_p_l12_blinds_the_right_half(self):
        f = example_face()
        out, f2 = make_partial(self._canvas(f), f, PartialVariant.P_L12)
        boxes = all_segment_boxes(f2)
        assert isinstance(boxes[SegmentId.R12], InsufficientVisibility)
        assert isinstance(boxes[SegmentId.L12], BoundingBox)
        assert boxes[SegmentId.L12] == segment_box(f, SegmentId.L12)

    @pytest.mark.parametrize("variant", list(PartialVariant))
    def test_idempotent_and_retained_box_stable(self, variant):
        f = canonical_fiducials()
        img = self._canvas(f)
        out1, f1 = make_partial(img, f, variant)
        out2, f2 = make_partial(out1, f1, variant)
        assert np.array_equal(out1, out2)
        assert f1.visibility == f2.visibility
        assert segment_box(f1, variant.kept_segment) == \
            segment_box(f, variant.kept_segment)

    def test_propagates_insufficient_visibility(self):
        f = example_face()
        f = build_face(f.points, f.face_box, visibility=[0.0] * 21)
        with pytest.raises(InsufficientVisibility):
            make_partial(self._canvas(f), f, PartialVariant.P_U12)


# ---------------------------------------------------------------------------
# Crop / resize.
# ---------------------------------------------------------------------------


def reference_bilinear(src, out_h, out_w):
    """Loop-based bilinear resampler used as an independent reference."""
    in_h, in_w = src.shape[:2]
    work = src.astype(np.float64)
    chans = 1 if src.ndim == 2 else src.shape[2]
    flat = work.reshape(in_h, in_w, chans)
    out = np.zeros((out_h, out_w, chans))
    for r in range(out_h):
        sy = min(max((r + 0.5) * (in_h / out_h) - 0.5, 0.0), in_h - 1.0)
        y0 = int(np.floor(sy))
        y1 = min(y0 + 1, in_h - 1)
        wy = sy - y0
        for c in range(out_w):
            sx = min(max((c + 0.5) * (in_w / out_w) - 0.5, 0.0), in_w - 1.0)
            x0 = int(np.floor(sx))
            x1 = min(x0 + 1, in_w - 1)
            wx = sx - x0
            for ch in range(chans):
                top = flat[y0, x0, ch] * (1 - wx) + flat[y0, x1, ch] * wx
                bot = flat[y1, x0, ch] * (1 - wx) + flat[y1, x1, ch] * wx
                out[r, c, ch] = top * (1 - wy) + bot * wy
    if src.ndim == 2:
        out = out[..., 0]
    if np.issubdtype(src.dtype, np.integer):
        info = np.iinfo(src.dtype)
        return np.clip(np.rint(out), info.min, info.max).astype(src.dtype)
    return out.astype(src.dtype)


class TestCropAndResize:
    def test_constant_image_stays_constant(self):
        img = np.full((40, 60, 3), 137, dtype=np.uint8)
        out = crop_and_resize(img, BoundingBox(5, 5, 50, 30), 64, 64)
        assert out.shape == (64, 64, 3)
        assert np.all(out == 137)

    def test_identity_resize_returns_identical_pixels(self):
        rng = np.random.default_rng(11)
        img = rng.integers(0, 256, size=(33, 47, 3), dtype=np.uint8)
        out = crop_and_resize(img, BoundingBox(0, 0, 46, 32), 47, 33)
        assert np.array_equal(out, img)

    def test_checkerboard_upscale_matches_reference(self):
        board = np.array([[0.0, 1.0], [1.0, 0.0]])
        got = bilinear_resize(board, 4, 4)
        want = reference_bilinear(board, 4, 4)
        assert np.array_equal(got, want)

    def test_random_resizes_match_reference(self):
        rng = np.random.default_rng(5)
        for shape, out_hw in [((7, 9, 3), (13, 5)), ((16, 16), (9, 21)),
                              ((5, 5, 3), (64, 64))]:
            img = rng.integers(0, 256, size=shape, dtype=np.uint8)
            assert np.array_equal(
                bilinear_resize(img, *out_hw), reference_bilinear(img, *out_hw))

    def test_empty_intersection_raises(self):
        img = np.zeros((20, 20, 3), dtype=np.uint8)
        with pytest.raises(EmptyIntersection):
            crop_and_resize(img, BoundingBox(25.0, 25.0, 30.0, 30.0), 8, 8)


class TestEnumerations:
    def test_canonical_predictor_order(self):
        assert [p.value for p in PREDICTORS] == list(range(16))
        assert PREDICTORS[0] == SegmentId.FULL
        assert PREDICTORS[15] == SegmentId.GP
        assert len(SEGMENTS) == 14

    def test_partial_variant_names(self):
        assert PartialVariant.from_name("u12") == PartialVariant.P_U12
        assert PartialVariant.from_name("P-L34") == PartialVariant.P_L34
        assert len(PartialVariant) == 6
