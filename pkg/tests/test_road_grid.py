import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from soundscape_hbm.road_grid import (
    RoadPixelTable,
    RoadSegment,
    Scaling,
    grid_centres,
    point_segment_distance,
    prediction_grid,
    rasterize,
    read_covariate_raster,
    read_segments,
    road_covariate,
    road_covariates,
    scale_attributes,
    site_pixel_pairs,
    write_covariate_raster,
    write_segments,
)


def seg_dist_oracle(px, py, ax, ay, bx, by):
    # scalar geometry: endpoint distances unless the foot of the perpendicular lies inside
    dx, dy = bx - ax, by - ay
    L = math.hypot(dx, dy)
    if L == 0:
        return math.hypot(px - ax, py - ay)
    along = ((px - ax) * dx + (py - ay) * dy) / L
    if along <= 0:
        return math.hypot(px - ax, py - ay)
    if along >= L:
        return math.hypot(px - bx, py - by)
    return abs((px - ax) * dy - (py - ay) * dx) / L


def raster_oracle(segments, bbox, res=10.0):
    x0, y0, x1, y1 = bbox
    cells = {}
    for i in range(int((x1 - x0) // res)):
        for j in range(int((y1 - y0) // res)):
            cx, cy = x0 + (i + 0.5) * res, y0 + (j + 0.5) * res
            for s in segments:
                (ax, ay), (bx, by) = s.polyline
                if seg_dist_oracle(cx, cy, ax, ay, bx, by) <= res / 2 + 1e-9:
                    if (cx, cy) not in cells or cells[(cx, cy)] < s.aadt:
                        cells[(cx, cy)] = s.aadt
    return cells


def covariate_oracle(loc, table, scaling):
    total = 0.0
    for k in range(len(table)):
        d = math.hypot(table.xy[k, 0] - loc[0], table.xy[k, 1] - loc[1])
        if d > scaling.radius:
            continue
        z = 0.0
        for name, v in (("aadt", table.aadt[k]), ("speed", table.speed[k]), ("truck", table.truck[k])):
            if scaling.sd[name] > 0:
                z += (v - scaling.mean[name]) / scaling.sd[name]
        if scaling.sd["distance"] > 0:
            z -= (d - scaling.mean["distance"]) / scaling.sd["distance"]
        total += z
    return total


def seg(x1, y1, x2, y2, aadt=1000.0, speed=50.0, truck=5.0):
    return RoadSegment(np.array([[x1, y1], [x2, y2]]), aadt, speed, truck)


class TestRasterize:
    def test_horizontal_run(self):
        t = rasterize([seg(0, 55, 100, 55)], (0, 0, 200, 200))
        # centres at x = 5..95 plus x = 105 (5 m from the endpoint)
        assert len(t) == 11
        np.testing.assert_array_equal(t.xy[:, 1], 55.0)

    def test_aligned_endpoints(self):
        t = rasterize([seg(5, 55, 95, 55)], (0, 0, 200, 200))
        assert len(t) == 10

    def test_outside_bbox(self):
        assert len(rasterize([seg(500, 500, 600, 600)], (0, 0, 100, 100))) == 0

    def test_crossing_takes_larger_aadt(self):
        t = rasterize([seg(0, 55, 100, 55, aadt=100), seg(55, 0, 55, 100, aadt=900)], (0, 0, 100, 100))
        k = np.flatnonzero((t.xy[:, 0] == 55) & (t.xy[:, 1] == 55))
        assert t.aadt[k] == [900.0]

    @given(st.lists(st.tuples(*[st.floats(0, 300)] * 4, st.floats(100, 5000)), min_size=1, max_size=3))
    @settings(max_examples=25, deadline=None)
    def test_matches_brute_force(self, raw):
        segs = [seg(a, b, c, d, aadt=q) for a, b, c, d, q in raw]
        t = rasterize(segs, (0, 0, 300, 300))
        ref = raster_oracle(segs, (0, 0, 300, 300))
        got = {(float(x), float(y)): a for (x, y), a in zip(t.xy, t.aadt)}
        assert got == ref

    def test_errors(self):
        with pytest.raises(ValueError):
            rasterize([], (0, 0, 10, 10))
        with pytest.raises(ValueError):
            rasterize([seg(0, 0, 1, 1)], (0, 0, 0, 10))
        with pytest.raises(ValueError):
            RoadSegment(np.array([[0.0, 0.0]]), 1.0, 1.0, 1.0)

    @given(*[st.floats(-100, 100)] * 6)
    def test_distance_matches_oracle(self, px, py, ax, ay, bx, by):
        d = point_segment_distance(np.array([px, py]), np.array([ax, ay]), np.array([bx, by]))
        assert float(d) == pytest.approx(seg_dist_oracle(px, py, ax, ay, bx, by), abs=1e-7)


class TestScaling:
    def test_two_value_zscores(self):
        t = RoadPixelTable(np.array([[0.0, 0.0], [10.0, 0.0]]), np.array([100.0, 300.0]),
                           np.array([40.0, 60.0]), np.array([1.0, 3.0]))
        s = scale_attributes(t, [[2.0, 0.0]])
        np.testing.assert_allclose(s.z("aadt", t.aadt), [-1.0, 1.0])
        np.testing.assert_allclose(s.z("truck", t.truck), [-1.0, 1.0])

    def test_zero_variance_dropped(self):
        t = RoadPixelTable(np.array([[0.0, 0.0], [10.0, 0.0]]), np.array([100.0, 300.0]),
                           np.array([50.0, 50.0]), np.array([1.0, 3.0]))
        with pytest.warns(RuntimeWarning, match="speed has zero variance"):
            s = scale_attributes(t, [[2.0, 0.0]])
        np.testing.assert_array_equal(s.z("speed", t.speed), 0.0)

    def test_no_pixels_in_range(self):
        t = rasterize([seg(0, 5, 100, 5)], (0, 0, 100, 100))
        with pytest.raises(ValueError, match="no road pixel"):
            scale_attributes(t, [[5000.0, 5000.0]])

    def test_roundtrip(self, tmp_path):
        s = Scaling({"aadt": 1.0, "speed": 2.0, "truck": 3.0, "distance": 4.0},
                    {"aadt": 0.5, "speed": 0.0, "truck": 1.0, "distance": 2.0})
        s.save(tmp_path / "s.json")
        assert Scaling.load(tmp_path / "s.json") == s


@pytest.fixture(scope="module")
def landscape():
    segs = [seg(0, 305, 2000, 355, aadt=12000, speed=90, truck=12),
            seg(1205, 0, 1105, 2000, aadt=3000, speed=60, truck=4),
            seg(0, 1600, 1000, 1800, aadt=600, speed=40, truck=1)]
    bbox = (0.0, 0.0, 2000.0, 2000.0)
    sites = np.random.default_rng(7).uniform(100, 1900, (12, 2))
    table = rasterize(segs, bbox)
    return segs, bbox, sites, table, scale_attributes(table, sites)


def subtable(table, keep):
    return RoadPixelTable(table.xy[keep], table.aadt[keep], table.speed[keep], table.truck[keep])


class TestCovariate:
    def test_population_moments(self, landscape):
        _, _, sites, table, scaling = landscape
        idx, dist = site_pixel_pairs(table, sites)
        for name, col in (("aadt", table.aadt[idx]), ("truck", table.truck[idx]), ("distance", dist)):
            z = scaling.z(name, col)
            assert abs(z.mean()) < 1e-9 and abs(z.std() - 1.0) < 1e-9

    def test_far_pixels_irrelevant(self, landscape):
        _, _, _, table, scaling = landscape
        q = np.array([1000.0, 1000.0])
        near = np.linalg.norm(table.xy - q, axis=1) <= 600.0
        assert near.sum() < len(table)
        a = road_covariates([q], table, scaling)
        np.testing.assert_allclose(road_covariates([q], subtable(table, near), scaling), a, rtol=1e-12)

    def test_additive_over_pixel_sets(self, landscape):
        _, _, sites, table, scaling = landscape
        part = np.arange(len(table)) % 3 == 0
        total = road_covariates(sites, table, scaling)
        split = road_covariates(sites, subtable(table, part), scaling) + road_covariates(
            sites, subtable(table, ~part), scaling)
        np.testing.assert_allclose(split, total, atol=1e-9)

    def test_empty_table(self, landscape):
        scaling = landscape[4]
        g = prediction_grid((0, 0, 1000, 1000), 250, RoadPixelTable.empty(), scaling)
        assert len(g) == 16 and all(v.rc == 0.0 for v in g)

    def test_fixed_constants_see_louder_roads(self, landscape):
        _, _, sites, table, scaling = landscape
        loud = RoadPixelTable(table.xy, 2.0 * table.aadt, table.speed, table.truck)
        assert np.all(road_covariates(sites, loud, scaling) >= road_covariates(sites, table, scaling))

    def test_matches_loop_oracle(self, landscape):
        _, _, sites, table, scaling = landscape
        got = road_covariates(sites, table, scaling)
        ref = [covariate_oracle(s, table, scaling) for s in sites]
        np.testing.assert_allclose(got, ref, rtol=1e-10, atol=1e-8)

    def test_far_location_is_zero(self, landscape):
        _, _, _, table, scaling = landscape
        assert road_covariate((-5000.0, -5000.0), table, scaling).rc == 0.0

    def test_sites_population_is_centred(self, landscape):
        # each factor averages to zero over the in-radius pairs, so the sum is zero overall
        _, _, sites, table, scaling = landscape
        assert abs(np.sum(road_covariates(sites, table, scaling))) < 1e-6 * len(table)

    def test_translation_invariance(self, landscape):
        segs, bbox, sites, table, scaling = landscape
        shift = np.array([1000.0, -2000.0])
        segs2 = [RoadSegment(s.polyline + shift, s.aadt, s.speed, s.truck_pct) for s in segs]
        bbox2 = (bbox[0] + shift[0], bbox[1] + shift[1], bbox[2] + shift[0], bbox[3] + shift[1])
        t2 = rasterize(segs2, bbox2)
        s2 = scale_attributes(t2, sites + shift)
        np.testing.assert_allclose(road_covariates(sites + shift, t2, s2),
                                   road_covariates(sites, table, scaling), rtol=0, atol=1e-9)

    def test_aadt_affine_invariance(self, landscape):
        _, _, sites, table, scaling = landscape
        t2 = RoadPixelTable(table.xy, 3.0 * table.aadt + 50.0, table.speed, table.truck)
        s2 = scale_attributes(t2, sites)
        np.testing.assert_allclose(road_covariates(sites, t2, s2), road_covariates(sites, table, scaling),
                                   atol=1e-8)

    def test_higher_near_busy_road(self, landscape):
        _, _, _, table, scaling = landscape
        near, far = road_covariates([[1000.0, 330.0], [500.0, 1000.0]], table, scaling)
        assert near > far

    def test_transect_is_pointwise(self, landscape):
        _, _, _, table, scaling = landscape
        xs = np.column_stack([np.full(20, 1000.0), np.linspace(0, 2000, 20)])
        batch = road_covariates(xs, table, scaling)
        single = [road_covariate(p, table, scaling).rc for p in xs]
        np.testing.assert_allclose(batch, single, rtol=1e-12)


class TestGrid:
    def test_sixteen_cells(self):
        c = grid_centres((0, 0, 40, 40), 10)
        assert c.shape == (16, 2)
        np.testing.assert_array_equal(c[:4], [[5, 5], [15, 5], [25, 5], [35, 5]])

    def test_resolution_too_large(self):
        with pytest.raises(ValueError):
            grid_centres((0, 0, 40, 40), 50)

    def test_grid_matches_pointwise(self, landscape):
        _, _, _, table, scaling = landscape
        g = prediction_grid((0, 0, 2000, 2000), 250, table, scaling)
        assert len(g) == 64
        ref = road_covariates([[v.x, v.y] for v in g], table, scaling)
        np.testing.assert_allclose([v.rc for v in g], ref)

    def test_raster_io(self, landscape, tmp_path):
        _, _, _, table, scaling = landscape
        g = prediction_grid((0, 0, 2000, 2000), 500, table, scaling)
        write_covariate_raster(tmp_path / "g.csv", g)
        back = read_covariate_raster(tmp_path / "g.csv")
        np.testing.assert_allclose([v.rc for v in back], [v.rc for v in g], rtol=1e-9)

    def test_segment_io(self, landscape, tmp_path):
        segs = landscape[0]
        write_segments(tmp_path / "r.csv", segs)
        back = read_segments(tmp_path / "r.csv")
        assert len(back) == 3
        np.testing.assert_allclose(back[1].polyline, segs[1].polyline)
        assert back[0].aadt == 12000.0
