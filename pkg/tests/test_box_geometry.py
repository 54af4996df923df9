import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sideaware.box_geometry import (SIDE_NAMES, OrientedBox3, SideDistances, SideId,
                                    bev_intersection_area, box_corners, box_from_corners,
                                    box_from_sides, candidate_from_sides, normalize_yaw,
                                    pairwise_iou, rotated_iou, sides_from_box)
from sideaware.errors import InvalidGeometryError, OutOfBoxError


def random_box(rng, max_size=3.0):
    return OrientedBox3(rng.uniform(-5, 5, 3), rng.uniform(0.1, max_size, 3),
                        rng.uniform(-math.pi, math.pi))


def interior_point(rng, box):
    local = rng.uniform(-0.49, 0.49, 3) * box.size
    return box.to_world(local)


def mc_bev_area(a, b, n, rng):
    """Monte-Carlo estimate of the footprint intersection, sampling inside a."""
    local = rng.uniform(-0.5, 0.5, (n, 3)) * a.size
    local[:, 2] = 0.0
    pts = a.to_world(local)
    pts[:, 2] = b.center[2]
    lb = np.abs(b.to_local(pts))
    inside = (lb[:, 0] <= b.size[0] / 2) & (lb[:, 1] <= b.size[1] / 2)
    return inside.mean() * a.footprint_area


def aabb_iou(a, b):
    lo = np.maximum(a.center - a.size / 2, b.center - b.size / 2)
    hi = np.minimum(a.center + a.size / 2, b.center + b.size / 2)
    inter = np.prod(np.clip(hi - lo, 0, None))
    return inter / (np.prod(a.size) + np.prod(b.size) - inter)


class TestTypes:
    def test_six_sides_bijective(self):
        assert len(SideId) == 6
        assert [SideId[n.upper()] for n in SIDE_NAMES] == list(SideId)
        assert len(set(SIDE_NAMES)) == 6

    def test_size_must_be_positive(self):
        with pytest.raises(InvalidGeometryError):
            OrientedBox3([0, 0, 0], [1, 0, 1])
        with pytest.raises(InvalidGeometryError):
            OrientedBox3([0, 0, 0], [1, -1, 1])

    def test_non_finite_rejected(self):
        with pytest.raises(InvalidGeometryError):
            OrientedBox3([0, np.nan, 0], [1, 1, 1])
        with pytest.raises(InvalidGeometryError):
            OrientedBox3([0, 0, 0], [1, 1, 1], math.inf)

    @pytest.mark.parametrize("yaw,expected", [
        (math.pi, math.pi), (-math.pi, math.pi), (3 * math.pi, math.pi),
        (2 * math.pi, 0.0), (-math.pi / 2, -math.pi / 2), (5.0, 5.0 - 2 * math.pi),
    ])
    def test_yaw_normalized(self, yaw, expected):
        assert normalize_yaw(yaw) == pytest.approx(expected, abs=1e-12)
        box = OrientedBox3([0, 0, 0], [1, 1, 1], yaw)
        assert -math.pi < box.yaw <= math.pi


class TestSides:
    def test_cube_from_half_distances(self):
        sd = SideDistances([0, 0, 0], [0.5] * 6, 0.0)
        box = box_from_sides(sd)
        np.testing.assert_allclose(box.center, [0, 0, 0], atol=1e-15)
        np.testing.assert_allclose(box.size, [1, 1, 1])

    def test_front_offset(self):
        d = np.full(6, 0.5)
        d[SideId.FRONT], d[SideId.BACK] = 1.0, 0.0
        box = box_from_sides(SideDistances([0, 0, 0], d, 0.0))
        np.testing.assert_allclose(box.center, [0.5, 0, 0], atol=1e-15)
        np.testing.assert_allclose(box.size, [1, 1, 1])

    def test_vertical_offset_not_rotated(self):
        d = np.array([0.8, 0.2, 0.5, 0.5, 0.5, 0.5])
        box = box_from_sides(SideDistances([1, 2, 3], d, 1.1))
        np.testing.assert_allclose(box.center, [1, 2, 3.3], atol=1e-12)

    def test_degenerate_pair(self):
        d = np.full(6, 0.5)
        d[SideId.LEFT], d[SideId.RIGHT] = 0.0, 0.0
        with pytest.raises(InvalidGeometryError):
            box_from_sides(SideDistances([0, 0, 0], d, 0.0))

    def test_center_of_unit_cube(self):
        box = OrientedBox3([0, 0, 0], [1, 1, 1])
        np.testing.assert_allclose(sides_from_box([0, 0, 0], box).distances, np.full(6, 0.5))

    def test_rotated_axes(self):
        box = OrientedBox3([0, 0, 0], [2, 1, 1], math.pi / 2)
        sd = sides_from_box([0, 0, 0], box)
        assert sd[SideId.FRONT] == pytest.approx(1.0)
        assert sd[SideId.BACK] == pytest.approx(1.0)
        assert sd[SideId.LEFT] == pytest.approx(0.5)
        # front face sits on world +y after a quarter turn
        np.testing.assert_allclose(box.face_center(SideId.FRONT), [0, 1, 0], atol=1e-12)

    def test_outside_candidate(self):
        box = OrientedBox3([0, 0, 0], [1, 1, 1])
        with pytest.raises(OutOfBoxError):
            sides_from_box([0.6, 0, 0], box)
        with pytest.raises(OutOfBoxError):
            sides_from_box([0.5, 0, 0], box)

    def test_round_trip_1000(self):
        rng = np.random.default_rng(7)
        worst = 0.0
        for _ in range(1000):
            box = random_box(rng)
            p = interior_point(rng, box)
            sd = sides_from_box(p, box)
            assert np.all(sd.distances > 0)
            back = box_from_sides(sd)
            worst = max(worst, np.max(np.abs(back.center - box.center)),
                        np.max(np.abs(back.size - box.size)),
                        abs(normalize_yaw(back.yaw - box.yaw)))
            np.testing.assert_allclose(candidate_from_sides(box, sd.distances), p, atol=1e-9)
        assert worst < 1e-9

    def test_distances_match_face_planes(self):
        # independent oracle: distance to each face plane along its world normal
        rng = np.random.default_rng(11)
        for _ in range(200):
            box = random_box(rng)
            p = interior_point(rng, box)
            sd = sides_from_box(p, box)
            for side in SideId:
                n = box.face_normal(side)
                expected = np.dot(box.face_center(side) - p, n)
                assert sd[side] == pytest.approx(expected, abs=1e-9)


class TestCorners:
    def test_unit_cube(self):
        corners = box_corners(OrientedBox3([0, 0, 0], [1, 1, 1]))
        expected = {(x, y, z) for x in (-.5, .5) for y in (-.5, .5) for z in (-.5, .5)}
        assert {tuple(c) for c in np.round(corners, 12) + 0.0} == expected

    def test_yaw_pi_same_set(self):
        a = box_corners(OrientedBox3([1, 2, 0], [2, 1, 1], 0.0))
        b = box_corners(OrientedBox3([1, 2, 0], [2, 1, 1], math.pi))
        a = a[np.lexsort(np.round(a, 9).T)]
        b = b[np.lexsort(np.round(b, 9).T)]
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_centroid_and_refit(self):
        rng = np.random.default_rng(3)
        for _ in range(1000):
            box = random_box(rng)
            corners = box_corners(box)
            np.testing.assert_allclose(corners.mean(axis=0), box.center, atol=1e-12)
            assert box_from_corners(corners).allclose(box, atol=1e-9)

    def test_corner_order(self):
        c = box_corners(OrientedBox3([0, 0, 0], [2, 4, 6]))
        np.testing.assert_allclose(c[0], [1, 2, -3])
        np.testing.assert_allclose(c[6], [-1, -2, 3])


class TestIntersection:
    def test_identical(self):
        box = OrientedBox3([0, 0, 0], [2, 3, 1], 0.4)
        assert bev_intersection_area(box, box) == pytest.approx(6.0, rel=1e-12)

    def test_offset_squares(self):
        a = OrientedBox3([0, 0, 0], [1, 1, 1])
        b = OrientedBox3([0.5, 0, 0], [1, 1, 1])
        assert bev_intersection_area(a, b) == pytest.approx(0.5, abs=1e-12)

    def test_disjoint_and_touching(self):
        a = OrientedBox3([0, 0, 0], [1, 1, 1])
        assert bev_intersection_area(a, OrientedBox3([3, 0, 0], [1, 1, 1])) == 0.0
        assert bev_intersection_area(a, OrientedBox3([1, 0, 0], [1, 1, 1])) == 0.0

    def test_square_rotated_45(self):
        # a unit square and the same square turned by 45 degrees overlap in a
        # regular octagon of area 2(sqrt(2) - 1)
        a = OrientedBox3([0, 0, 0], [1, 1, 1])
        b = OrientedBox3([0, 0, 0], [1, 1, 1], math.pi / 4)
        assert bev_intersection_area(a, b) == pytest.approx(2 * (math.sqrt(2) - 1), rel=1e-12)

    def test_monte_carlo(self):
        rng = np.random.default_rng(5)
        mc_rng = np.random.default_rng(6)
        checked = 0
        while checked < 8:
            a = OrientedBox3(rng.uniform(-1, 1, 3), rng.uniform(0.5, 2, 3), rng.uniform(-3, 3))
            b = OrientedBox3(rng.uniform(-1, 1, 3), rng.uniform(0.5, 2, 3), rng.uniform(-3, 3))
            area = bev_intersection_area(a, b)
            if area == 0.0:
                continue
            assert area <= min(a.footprint_area, b.footprint_area) + 1e-12
            assert abs(area - mc_bev_area(a, b, 10**6, mc_rng)) < 5e-3
            checked += 1


class TestRotatedIou:
    def test_identical(self):
        box = OrientedBox3([1, 2, 3], [1, 2, 3], 0.7)
        assert rotated_iou(box, box) == pytest.approx(1.0, abs=1e-12)

    def test_half_overlap_cube(self):
        a = OrientedBox3([0, 0, 0], [1, 1, 1])
        b = OrientedBox3([0.5, 0, 0], [1, 1, 1])
        assert rotated_iou(a, b) == pytest.approx(1.0 / 3.0, abs=1e-12)

    def test_vertical_disjoint(self):
        a = OrientedBox3([0, 0, 0], [1, 1, 1])
        assert rotated_iou(a, OrientedBox3([0, 0, 2], [1, 1, 1])) == 0.0

    def test_axis_aligned_closed_form(self):
        rng = np.random.default_rng(9)
        for _ in range(500):
            a = OrientedBox3(rng.uniform(-1, 1, 3), rng.uniform(0.2, 2, 3))
            b = OrientedBox3(rng.uniform(-1, 1, 3), rng.uniform(0.2, 2, 3))
            assert rotated_iou(a, b) == pytest.approx(aabb_iou(a, b), abs=1e-12)

    def test_symmetric_and_rigid_invariant(self):
        rng = np.random.default_rng(13)
        for _ in range(300):
            a = OrientedBox3(rng.uniform(-1, 1, 3), rng.uniform(0.2, 2, 3), rng.uniform(-3, 3))
            b = OrientedBox3(rng.uniform(-1, 1, 3), rng.uniform(0.2, 2, 3), rng.uniform(-3, 3))
            iou = rotated_iou(a, b)
            assert 0.0 <= iou <= 1.0
            assert rotated_iou(b, a) == pytest.approx(iou, abs=1e-12)
            yaw, t = rng.uniform(-3, 3), rng.uniform(-10, 10, 3)
            moved = rotated_iou(a.transformed(yaw, t), b.transformed(yaw, t))
            assert moved == pytest.approx(iou, abs=1e-9)

    def test_monotone_in_offset(self):
        a = OrientedBox3([0, 0, 0], [2, 1, 1], 0.3)
        direction = a.face_normal(SideId.FRONT)
        values = [rotated_iou(a, OrientedBox3(t * direction, [2, 1, 1], 0.3))
                  for t in np.linspace(0, 2.5, 26)]
        assert np.all(np.diff(values) <= 1e-12)
        assert values[-1] == 0.0

    def test_pairwise_matches_scalar(self):
        rng = np.random.default_rng(17)
        boxes = [random_box(rng) for _ in range(5)]
        m = pairwise_iou(boxes, boxes[:3])
        assert m.shape == (5, 3)
        for i in range(5):
            for j in range(3):
                assert m[i, j] == rotated_iou(boxes[i], boxes[j])


finite = st.floats(-3, 3, allow_nan=False)
sizes = st.floats(0.1, 3, allow_nan=False)


@st.composite
def boxes(draw):
    return OrientedBox3([draw(finite), draw(finite), draw(finite)],
                        [draw(sizes), draw(sizes), draw(sizes)], draw(finite))


class TestProperties:
    @settings(max_examples=200, deadline=None)
    @given(boxes(), boxes())
    def test_iou_bounds_and_symmetry(self, a, b):
        iou = rotated_iou(a, b)
        assert 0.0 <= iou <= 1.0
        assert abs(iou - rotated_iou(b, a)) < 1e-9

    @settings(max_examples=200, deadline=None)
    @given(boxes(), boxes())
    def test_area_bounded(self, a, b):
        area = bev_intersection_area(a, b)
        assert 0.0 <= area <= min(a.footprint_area, b.footprint_area) + 1e-12

    @settings(max_examples=200, deadline=None)
    @given(boxes(), st.floats(-0.45, 0.45), st.floats(-0.45, 0.45), st.floats(-0.45, 0.45))
    def test_sides_round_trip(self, box, u, v, w):
        p = box.to_world(np.array([u, v, w]) * box.size)
        assert box_from_sides(sides_from_box(p, box)).allclose(box, atol=1e-9)
