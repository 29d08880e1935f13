import itertools
import math

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st
from shapely.geometry import box as shapely_box

from objectness import bbox
from objectness.bbox import BBoxGrid, Box, box_params, decode, encode, iou, target_distribution

from _gen import bin_center_box, random_box, random_grid, random_in_range_box


@st.composite
def boxes(draw):
    xs = sorted(draw(st.lists(st.floats(0, 1), min_size=2, max_size=2, unique=True)))
    ys = sorted(draw(st.lists(st.floats(0, 1), min_size=2, max_size=2, unique=True)))
    return Box(xs[0], ys[0], xs[1], ys[1])


@pytest.fixture
def grid():
    return BBoxGrid()


class TestBoxParams:
    def test_unit_box(self):
        assert box_params(Box(0, 0, 1, 1)) == (0.5, 0.5, 1.0, 1.0)

    def test_centered_square(self):
        assert box_params(Box(0.25, 0.25, 0.75, 0.75)) == (0.5, 0.5, 0.5, 1.0)

    def test_wide_box(self):
        cx, cy, s, a = box_params(Box(0, 0, 0.8, 0.2))
        assert (cx, cy) == (0.4, 0.1)
        assert s == pytest.approx(math.sqrt(0.8 * 0.2))
        assert s == pytest.approx(0.4)
        assert a == pytest.approx(4.0)

    @pytest.mark.parametrize("coords", [(0, 0, 0, 1), (0.5, 0, 0.2, 1), (-0.1, 0, 0.5, 0.5), (0, 0, 1.2, 1)])
    def test_invalid_box(self, coords):
        with pytest.raises(ValueError):
            Box(*coords)


class TestEncodeDecode:
    def test_first_cell(self):
        g = BBoxGrid(nx=4, ny=4, ns=1, na=1)
        assert encode(Box(0.0, 0.0, 0.25, 0.25), g) == 0

    def test_last_cell(self):
        g = BBoxGrid(nx=4, ny=4, ns=1, na=1)
        assert encode(Box(0.75, 0.75, 1.0, 1.0), g) == 15
        assert bbox.unravel(15, g) == (3, 3, 0, 0)

    def test_log_scale_bin_edge(self):
        g = BBoxGrid(nx=1, ny=1, ns=2, na=1, scale_range=(0.1, 0.9))
        # log-midpoint of (0.1, 0.9) is 0.1 * sqrt(9) = 0.3 < 0.5
        edge = math.exp((math.log(0.1) + math.log(0.9)) / 2)
        assert edge == pytest.approx(0.3)
        assert bbox.unravel(encode(Box(0.25, 0.25, 0.75, 0.75), g), g)[2] == 1

    def test_decode_first_cell_center(self):
        g = BBoxGrid(nx=4, ny=4, ns=1, na=1, scale_range=(0.1, 0.2))
        b = decode(0, g)
        cx, cy, s, a = box_params(b)
        assert (cx, cy) == pytest.approx((0.125, 0.125), abs=1e-12)
        assert s == pytest.approx(math.sqrt(0.1 * 0.2))
        assert a == pytest.approx(1.0)

    def test_flat_index_row_major(self):
        g = BBoxGrid(nx=3, ny=4, ns=2, na=5)
        for i, bins in enumerate(itertools.product(range(3), range(4), range(2), range(5))):
            assert bbox.flat_index(bins, g) == i
            assert bbox.unravel(i, g) == bins

    def test_decode_out_of_range(self, grid):
        with pytest.raises(IndexError):
            decode(grid.size, grid)
        with pytest.raises(IndexError):
            decode(-1, grid)

    def test_bin_center_roundtrip(self):
        rng = np.random.default_rng(0)
        checked = 0
        for _ in range(20):
            g = random_grid(rng)
            for i in range(g.size):
                coords = bin_center_box(g, bbox.unravel(i, g))
                if min(coords) < 0 or max(coords) > 1:
                    continue
                b = Box(*coords)
                assert encode(b, g) == i
                np.testing.assert_allclose(decode(encode(b, g), g).as_tuple(), coords, atol=1e-6)
                checked += 1
        assert checked > 500

    def test_roundtrip_random(self, grid):
        rng = np.random.default_rng(1)
        for _ in range(2000):
            b = random_in_range_box(rng, grid)
            k = encode(b, grid)
            assert encode(decode(k, grid), grid) == k

    def test_every_cell_decodes_inside_image(self, grid):
        boxes = bbox.cell_boxes(grid)
        assert boxes.shape == (grid.size, 4)
        assert boxes.min() >= 0 and boxes.max() <= 1

    def test_out_of_range_scale_clamps(self):
        g = BBoxGrid(nx=2, ny=2, ns=3, na=1, scale_range=(0.3, 0.6))
        before = bbox.CLAMP_COUNTER["scale"]
        tiny = Box(0.1, 0.1, 0.12, 0.12)
        assert bbox.unravel(encode(tiny, g), g)[2] == 0
        assert bbox.unravel(encode(Box(0, 0, 1, 1), g), g)[2] == 2
        assert bbox.CLAMP_COUNTER["scale"] == before + 2


class TestIoU:
    def test_identity(self):
        b = Box(0.1, 0.2, 0.6, 0.9)
        assert iou(b, b) == 1.0

    def test_disjoint(self):
        assert iou(Box(0, 0, 0.4, 0.4), Box(0.5, 0.5, 1, 1)) == 0.0

    def test_quarter_overlap(self):
        assert iou(Box(0, 0, 0.5, 0.5), Box(0.25, 0.25, 0.75, 0.75)) == pytest.approx(0.0625 / 0.4375)
        assert iou(Box(0, 0, 0.5, 0.5), Box(0.25, 0.25, 0.75, 0.75)) == pytest.approx(1 / 7)

    @settings(max_examples=300, deadline=None)
    @given(boxes(), boxes())
    def test_matches_polygon_oracle(self, a, b):
        pa, pb = shapely_box(*a.as_tuple()), shapely_box(*b.as_tuple())
        assume(pa.area > 1e-12 and pb.area > 1e-12)
        expected = pa.intersection(pb).area / pa.union(pb).area
        assert iou(a, b) == pytest.approx(expected, abs=1e-9)
        assert iou(a, b) == iou(b, a)
        assert bbox.iou_matrix([a.as_tuple()], [b.as_tuple()])[0, 0] == pytest.approx(iou(a, b), abs=1e-12)

    @settings(max_examples=300, deadline=None)
    @given(boxes(), boxes(), st.floats(0, 1), st.floats(0, 1))
    def test_nested_shrink_is_monotone(self, outer, _, fx, fy):
        # a' inside a inside outer: a' covers less of outer, so IoU cannot grow
        a = outer
        w, h = a.width * (0.5 + fx / 2), a.height * (0.5 + fy / 2)
        assume(w > 0 and h > 0)
        inner = Box(a.x_min, a.y_min, a.x_min + w, a.y_min + h)
        assert iou(inner, outer) <= iou(a, outer) + 1e-12

    @settings(max_examples=300, deadline=None)
    @given(boxes(), boxes())
    def test_trimming_outside_part_cannot_lower_iou(self, a, b):
        assume(iou(a, b) > 0)
        # cut a down to its overlap with b: intersection is kept, union shrinks
        trimmed = Box(max(a.x_min, b.x_min), max(a.y_min, b.y_min), min(a.x_max, b.x_max), min(a.y_max, b.y_max))
        assert iou(trimmed, b) >= iou(a, b) - 1e-12


class TestTargetDistribution:
    def test_delta_limit(self, grid):
        g = BBoxGrid(sigma=1e-3)
        b = Box(0.3, 0.2, 0.7, 0.5)
        t = target_distribution([b], g)
        expected = np.zeros(g.size)
        expected[encode(b, g)] = 1.0
        np.testing.assert_array_equal(t, expected)

    def test_duplicate_box(self, grid):
        b = Box(0.1, 0.1, 0.4, 0.6)
        np.testing.assert_array_equal(target_distribution([b, b], grid), target_distribution([b], grid))

    def test_far_apart_modes(self):
        g = BBoxGrid(nx=16, ny=16, ns=4, na=3, sigma=0.5)
        a, b = Box(0.02, 0.02, 0.2, 0.2), Box(0.75, 0.75, 0.95, 0.95)
        t = target_distribution([a, b], g).reshape(g.shape)
        idx = np.indices(g.shape)
        for box in (a, b):
            # fractional bin position of the box, in bin-center coordinates
            c = bbox._clamped_coords(box, g) - 0.5
            near = np.all([np.abs(idx[d] - c[d]) <= 3 * g.sigma[d] for d in range(4)], axis=0)
            assert t[near].sum() == pytest.approx(0.5, abs=1e-6)

    def test_empty_list(self, grid):
        with pytest.raises(ValueError):
            target_distribution([], grid)

    def test_per_box_equal_mass(self):
        # a box near the border loses Gaussian tails to truncation but still carries half the mass
        g = BBoxGrid(nx=8, ny=8, ns=4, na=3, sigma=(2.0, 2.0, 0.5, 0.5))
        edge, mid = Box(0, 0, 0.15, 0.15), Box(0.4, 0.4, 0.6, 0.6)
        one = target_distribution([edge], g) / 2
        two = target_distribution([edge, mid], g)
        other = target_distribution([mid], g) / 2
        np.testing.assert_allclose(two, one + other, atol=1e-15)

    @settings(max_examples=200, deadline=None)
    @given(st.lists(boxes(), min_size=1, max_size=5), st.integers(0, 2**31 - 1))
    def test_invariants(self, box_list, seed):
        rng = np.random.default_rng(seed)
        g = random_grid(rng)
        t = target_distribution(box_list, g)
        assert t.shape == (g.size,)
        assert np.all(t >= 0)
        assert t.sum() == pytest.approx(1.0, abs=1e-6)
        perm = [box_list[i] for i in rng.permutation(len(box_list))]
        np.testing.assert_array_equal(target_distribution(perm, g), t)
        np.testing.assert_array_equal(target_distribution(box_list + box_list, g), t)

    @settings(max_examples=300, deadline=None)
    @given(boxes(), st.integers(0, 2**31 - 1))
    def test_single_box_argmax(self, b, seed):
        g = random_grid(np.random.default_rng(seed), sigma_max=0.5)
        assert int(np.argmax(target_distribution([b], g))) == encode(b, g)

    def test_bin_edge_box_argmax(self, grid):
        # center exactly on a bin edge: both neighbours are equidistant
        b = Box(0.0, 0.0, 0.5, 0.5)
        assert int(np.argmax(target_distribution([b], grid))) == encode(b, grid)
