"""Box geometry: overlap, distances, polar updates, and selection rules."""

import math

import numpy as np
import pytest

from retrack.exceptions import NoProposalsError, ValidationError
from retrack.geometry import (
    BBox,
    FrameDims,
    PolarCorrection,
    ProposalSet,
    center_error,
    iou,
    map_to_level,
    motion_descriptor,
    polar_update,
    rescale_box,
    select_box,
)


def rasterized_iou(a: BBox, b: BBox, size: int = 80) -> float:
    """Pixel-counting oracle; exact for integer-cornered boxes."""
    grid_a = np.zeros((size, size), dtype=bool)
    grid_b = np.zeros((size, size), dtype=bool)
    for box, grid in ((a, grid_a), (b, grid_b)):
        x0, y0, x1, y1 = box.corners
        grid[int(round(y0)) : int(round(y1)), int(round(x0)) : int(round(x1))] = True
    inter = np.logical_and(grid_a, grid_b).sum()
    union = np.logical_or(grid_a, grid_b).sum()
    return float(inter) / float(union)


def random_integer_box(rng, limit: int = 64) -> BBox:
    x0 = int(rng.integers(0, limit - 1))
    y0 = int(rng.integers(0, limit - 1))
    x1 = int(rng.integers(x0 + 1, limit))
    y1 = int(rng.integers(y0 + 1, limit))
    return BBox((x0 + x1) / 2.0, (y0 + y1) / 2.0, float(x1 - x0), float(y1 - y0))


class TestIou:
    def test_identical_boxes(self):
        b = BBox(50.0, 50.0, 20.0, 20.0)
        assert iou(b, b) == 1.0

    def test_disjoint_boxes(self):
        a = BBox(5.0, 5.0, 10.0, 10.0)
        b = BBox(100.0, 100.0, 10.0, 10.0)
        assert iou(a, b) == 0.0

    def test_hand_computed_overlap(self):
        a = BBox(10.0, 10.0, 20.0, 20.0)
        b = BBox(20.0, 10.0, 20.0, 20.0)
        assert abs(iou(a, b) - 1.0 / 3.0) < 1e-12

    def test_symmetry(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            a = random_integer_box(rng)
            b = random_integer_box(rng)
            assert iou(a, b) == iou(b, a)

    def test_range(self):
        rng = np.random.default_rng(4)
        for _ in range(200):
            v = iou(random_integer_box(rng), random_integer_box(rng))
            assert 0.0 <= v <= 1.0

    def test_matches_rasterization_oracle(self):
        rng = np.random.default_rng(5)
        for _ in range(500):
            a = random_integer_box(rng)
            b = random_integer_box(rng)
            assert abs(iou(a, b) - rasterized_iou(a, b)) < 1e-6


class TestCenterError:
    def test_identical_centers(self):
        a = BBox(10.0, 20.0, 4.0, 4.0)
        b = BBox(10.0, 20.0, 9.0, 1.0)
        assert center_error(a, b) == 0.0

    def test_three_four_five(self):
        a = BBox(0.0, 0.0, 2.0, 2.0)
        b = BBox(3.0, 4.0, 2.0, 2.0)
        assert center_error(a, b) == 5.0

    def test_against_coordinate_oracle(self):
        rng = np.random.default_rng(6)
        for _ in range(100):
            a = BBox(*rng.uniform(1, 50, size=2), *rng.uniform(1, 20, size=2))
            b = BBox(*rng.uniform(1, 50, size=2), *rng.uniform(1, 20, size=2))
            expected = math.sqrt((a.cx - b.cx) ** 2 + (a.cy - b.cy) ** 2)
            assert abs(center_error(a, b) - expected) < 1e-12


class TestPolarUpdate:
    def test_identity(self):
        base = BBox(40.0, 30.0, 12.0, 8.0)
        out = polar_update(base, PolarCorrection(0.7, 0.0, 1.0, 1.0))
        assert (out.cx, out.cy, out.w, out.h) == (base.cx, base.cy, base.w, base.h)

    def test_axis_aligned_step_and_scale(self):
        out = polar_update(BBox(100.0, 100.0, 40.0, 20.0), PolarCorrection(0.0, 10.0, 2.0, 0.5))
        assert abs(out.cx - 110.0) < 1e-12
        assert abs(out.cy - 100.0) < 1e-12
        assert abs(out.w - 80.0) < 1e-12
        assert abs(out.h - 10.0) < 1e-12

    def test_vertical_step(self):
        out = polar_update(BBox(50.0, 50.0, 10.0, 10.0), PolarCorrection(math.pi / 2, 5.0, 1.0, 1.0))
        assert abs(out.cx - 50.0) < 1e-9
        assert abs(out.cy - 55.0) < 1e-9

    def test_size_floor(self):
        out = polar_update(BBox(50.0, 50.0, 2.0, 2.0), PolarCorrection(0.0, 0.0, 0.01, 0.01))
        assert out.w >= 1.0 and out.h >= 1.0

    def test_center_clamped_into_frame(self):
        dims = FrameDims(100, 100)
        out = polar_update(BBox(98.0, 50.0, 10.0, 10.0), PolarCorrection(0.0, 50.0, 1.0, 1.0), dims)
        assert out.cx <= 100.0 and out.cy <= 100.0


class TestMapToLevel:
    def test_stride_one_identity(self):
        b = BBox(17.0, 23.0, 5.0, 7.0)
        out = map_to_level(b, 1)
        assert (out.cx, out.cy, out.w, out.h) == (17.0, 23.0, 5.0, 7.0)

    def test_stride_eight(self):
        out = map_to_level(BBox(64.0, 64.0, 32.0, 32.0), 8)
        assert (out.cx, out.cy, out.w, out.h) == (8.0, 8.0, 4.0, 4.0)

    def test_fractional_preserved(self):
        out = map_to_level(BBox(60.0, 60.0, 30.0, 30.0), 8)
        assert (out.cx, out.cy, out.w, out.h) == (7.5, 7.5, 3.75, 3.75)

    def test_round_trip_exact(self):
        rng = np.random.default_rng(8)
        for _ in range(50):
            b = random_integer_box(rng)
            for stride in (8, 16, 32):
                lo = map_to_level(b, stride)
                back = BBox(lo.cx * stride, lo.cy * stride, lo.w * stride, lo.h * stride)
                assert (back.cx, back.cy, back.w, back.h) == (b.cx, b.cy, b.w, b.h)


class TestMotionDescriptor:
    def test_self_reference_zeroes(self):
        dims = FrameDims(200, 100)
        rng = np.random.default_rng(9)
        for _ in range(25):
            b = BBox(*rng.uniform(10, 90, size=2), *rng.uniform(2, 30, size=2))
            g = motion_descriptor(b, b, dims)
            assert g.shape == (12,)
            assert np.all(g[8:] == 0.0)

    def test_layout_normalized_boxes(self):
        dims = FrameDims(200, 100)
        cur = BBox(100.0, 50.0, 100.0, 50.0)
        g = motion_descriptor(cur, cur, dims)
        assert np.allclose(g[:4], [0.5, 0.5, 0.5, 0.5])
        assert np.allclose(g[4:8], [0.5, 0.5, 0.5, 0.5])

    def test_displacement_sign_convention(self):
        dims = FrameDims(200, 100)
        cur = BBox(100.0, 50.0, 20.0, 20.0)
        ref = BBox(100.0 + dims.w / 10.0, 50.0, 20.0, 20.0)
        g = motion_descriptor(cur, ref, dims)
        assert abs(g[8] - (-0.1)) < 1e-12
        assert abs(g[9]) < 1e-12

    def test_log_ratio_for_doubled_width(self):
        dims = FrameDims(200, 100)
        cur = BBox(100.0, 50.0, 40.0, 20.0)
        ref = BBox(100.0, 50.0, 20.0, 20.0)
        g = motion_descriptor(cur, ref, dims)
        assert abs(g[10] - math.log(2.0)) < 1e-12
        assert abs(g[11]) < 1e-12

    def test_in_frame_displacement_bounds(self):
        dims = FrameDims(64, 64)
        rng = np.random.default_rng(10)
        for _ in range(50):
            cur = BBox(*rng.uniform(1, 63, size=2), *rng.uniform(1, 10, size=2))
            ref = BBox(*rng.uniform(1, 63, size=2), *rng.uniform(1, 10, size=2))
            g = motion_descriptor(cur, ref, dims)
            assert -1.0 <= g[8] <= 1.0 and -1.0 <= g[9] <= 1.0


def make_proposals(boxes, confs, t=0):
    return ProposalSet.build(t=t, entries=list(zip(boxes, confs)), k=len(boxes))


class TestSelection:
    def test_single_proposal_all_rules(self):
        gt = BBox(30.0, 30.0, 10.0, 10.0)
        pset = make_proposals([BBox(32.0, 31.0, 10.0, 10.0)], [0.4])
        for rule in ("conf", "min_err", "max_iou"):
            assert select_box(pset, rule, gt) == 0

    def test_conf_ignores_alignment(self):
        gt = BBox(50.0, 50.0, 10.0, 10.0)
        aligned = BBox(50.0, 50.0, 10.0, 10.0)
        off = BBox(80.0, 20.0, 10.0, 10.0)
        pset = make_proposals([off, aligned], [0.9, 0.2])
        assert select_box(pset, "conf") == 0
        assert select_box(pset, "min_err", gt) == 1
        assert select_box(pset, "max_iou", gt) == 1

    def test_min_err_matches_exhaustive_scan(self):
        rng = np.random.default_rng(11)
        gt = BBox(50.0, 50.0, 12.0, 12.0)
        for _ in range(60):
            boxes = [
                BBox(*rng.uniform(5, 95, size=2), *rng.uniform(2, 25, size=2))
                for _ in range(10)
            ]
            pset = make_proposals(boxes, list(rng.uniform(0, 1, size=10)))
            idx = select_box(pset, "min_err", gt)
            errors = [center_error(b, gt) for b in pset.boxes]
            assert errors[idx] == min(errors)
            assert idx == int(np.argmin(errors))

    def test_max_iou_matches_exhaustive_scan(self):
        rng = np.random.default_rng(12)
        gt = BBox(40.0, 40.0, 20.0, 20.0)
        for _ in range(60):
            boxes = [
                BBox(*rng.uniform(20, 60, size=2), *rng.uniform(5, 30, size=2))
                for _ in range(8)
            ]
            pset = make_proposals(boxes, list(rng.uniform(0, 1, size=8)))
            idx = select_box(pset, "max_iou", gt)
            overlaps = [iou(b, gt) for b in pset.boxes]
            assert overlaps[idx] == max(overlaps)
            assert idx == int(np.argmax(overlaps))

    def test_tie_breaks_to_lowest_index(self):
        gt = BBox(50.0, 50.0, 10.0, 10.0)
        same = BBox(55.0, 50.0, 10.0, 10.0)
        pset = make_proposals([same, same], [0.5, 0.5])
        assert select_box(pset, "conf") == 0
        assert select_box(pset, "min_err", gt) == 0
        assert select_box(pset, "max_iou", gt) == 0

    def test_empty_set_raises(self):
        pset = ProposalSet.build(t=0, entries=[], k=5)
        with pytest.raises(NoProposalsError):
            select_box(pset, "conf")

    def test_build_orders_by_confidence(self):
        rng = np.random.default_rng(13)
        boxes = [
            BBox(float(10 + i), 20.0, 4.0, 4.0) for i in range(6)
        ]
        confs = list(rng.uniform(0, 1, size=6))
        pset = make_proposals(boxes, confs)
        assert all(pset.confs[i] >= pset.confs[i + 1] for i in range(len(pset) - 1))
        top = int(np.argmax(confs))
        assert pset.boxes[0].cx == boxes[top].cx


class TestBoxBasics:
    def test_rejects_non_positive_size(self):
        with pytest.raises(ValidationError):
            BBox(10.0, 10.0, 0.0, 5.0)
        with pytest.raises(ValidationError):
            BBox(10.0, 10.0, 5.0, -1.0)

    def test_rejects_non_finite(self):
        with pytest.raises(ValidationError):
            BBox(float("nan"), 10.0, 5.0, 5.0)
        with pytest.raises(ValidationError):
            BBox(10.0, float("inf"), 5.0, 5.0)

    def test_array_round_trip(self):
        b = BBox(12.5, 7.25, 3.0, 9.0)
        back = BBox.from_array(b.as_array())
        assert (back.cx, back.cy, back.w, back.h) == (12.5, 7.25, 3.0, 9.0)

    def test_rescale_box(self):
        b = BBox(48.0, 27.0, 16.0, 9.0)
        out = rescale_box(b, FrameDims(96, 54), FrameDims(960, 540))
        assert (out.cx, out.cy, out.w, out.h) == (480.0, 270.0, 160.0, 90.0)

    def test_corners_consistent(self):
        b = BBox(10.0, 20.0, 4.0, 6.0)
        x0, y0, x1, y1 = b.corners
        assert (x0, y0, x1, y1) == (8.0, 17.0, 12.0, 23.0)
