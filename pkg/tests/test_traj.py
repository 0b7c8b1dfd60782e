"""Grid discretization, day segmentation, stay-time and distance accounting."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ridescreen.errors import ConfigError, MissingData, OutOfBounds
from ridescreen.traj import (
    EARTH_RADIUS_KM,
    GridSpec,
    TracePoint,
    Trajectory,
    cell_of,
    haversine_km,
    read_trace_csv,
    segment_days,
    stay_time_grid,
    travel_distance,
    write_trace_csv,
)

UNIT_GRID = GridSpec(0.0, 1.0, 0.0, 1.0)


def _traj(points, vid="v0"):
    lat, lon, time = zip(*points)
    return Trajectory.from_arrays(vid, lat, lon, time)


class TestCellOf:
    def test_lower_corner(self):
        assert cell_of(TracePoint(0.0, 0.0, 0.0), UNIT_GRID) == (0, 0)

    def test_center_floor(self):
        assert cell_of(TracePoint(0.5, 0.5, 0.0), UNIT_GRID) == (12, 12)

    def test_upper_bound_clamps(self):
        assert cell_of(TracePoint(1.0, 1.0, 0.0), UNIT_GRID) == (23, 23)

    def test_out_of_bounds_raises(self):
        with pytest.raises(OutOfBounds):
            cell_of(TracePoint(1.5, 0.5, 0.0), UNIT_GRID)

    def test_invalid_grid(self):
        with pytest.raises(ConfigError):
            GridSpec(1.0, 0.0, 0.0, 1.0)

    @given(
        lat=st.floats(0.0, 1.0),
        lon=st.floats(0.0, 1.0),
    )
    def test_every_in_bounds_point_maps_to_one_cell(self, lat, lon):
        row, col = cell_of(TracePoint(lat, lon, 0.0), UNIT_GRID)
        assert 0 <= row < 24 and 0 <= col < 24
        # the point really lies in the half-open cell (upper edge clamps)
        assert lat >= row * UNIT_GRID.cell_height - 1e-12
        assert lon >= col * UNIT_GRID.cell_width - 1e-12


class TestSegmentDays:
    def test_hourly_week_keeps_window_only(self):
        points = [
            (0.5, 0.5, day * 86400 + h * 3600)
            for day in range(7)
            for h in range(24)
        ]
        segs = segment_days(_traj(points))
        assert len(segs) == 7
        for k, seg in enumerate(segs):
            assert seg.day_index == k
            hours = seg.hour_of_day()
            assert hours.min() >= 6.0 and hours.max() < 24.0
            assert seg.n_points == 18

    def test_night_only_trace_is_empty(self):
        points = [(0.5, 0.5, h * 600) for h in range(30)]  # 0:00-4:50
        assert segment_days(_traj(points)) == []

    def test_midnight_spanning_point_excluded(self):
        points = [(0.5, 0.5, 23 * 3600 + 50 * 60), (0.5, 0.5, 24 * 3600 + 10 * 60)]
        segs = segment_days(_traj(points))
        assert len(segs) == 1
        assert segs[0].n_points == 1  # the 0:10 point is in no segment

    def test_points_partition_into_segments(self):
        rng = np.random.default_rng(5)
        times = np.sort(rng.integers(0, 3 * 86400, size=200))
        points = [(0.3, 0.7, float(t)) for t in np.unique(times)]
        t = _traj(points)
        segs = segment_days(t)
        seen = [time for seg in segs for time in seg.time]
        assert len(seen) == len(set(seen))
        assert set(seen) <= set(t.time.tolist())

    def test_timezone_offset_shifts_window(self):
        # 23:00 UTC is 7:00 at +8: inside the window there
        points = [(0.5, 0.5, 23 * 3600.0)]
        assert segment_days(_traj(points), tz_offset_hours=0.0)[0].n_points == 1
        segs = segment_days(_traj(points), tz_offset_hours=8.0)
        assert segs[0].n_points == 1
        assert segs[0].hour_of_day()[0] == pytest.approx(7.0)
        # 2:00 UTC is out of window at 0 offset, 10:00 at +8
        points = [(0.5, 0.5, 2 * 3600.0)]
        assert segment_days(_traj(points), tz_offset_hours=0.0) == []
        assert len(segment_days(_traj(points), tz_offset_hours=8.0)) == 1


class TestStayTime:
    def test_same_cell_direct_accrual(self):
        base = 6 * 3600.0
        t = _traj([(0.05, 0.05, base), (0.05, 0.05, base + 600)])
        grid = stay_time_grid(segment_days(t)[0], UNIT_GRID, gap_cap_s=1800)
        assert grid[1, 1] == 600.0
        assert grid.sum() == 600.0

    def test_gap_cap(self):
        base = 6 * 3600.0
        t = _traj([(0.05, 0.05, base), (0.9, 0.9, base + 7200)])
        grid = stay_time_grid(segment_days(t)[0], UNIT_GRID, gap_cap_s=1800)
        assert grid[1, 1] == 1800.0

    def test_three_point_hand_sum(self):
        # A at cell X, B and C at cell Y: X gets 300 s, Y gets 600 s
        base = 6 * 3600.0
        t = _traj(
            [(0.05, 0.05, base), (0.55, 0.55, base + 300), (0.55, 0.56, base + 900)]
        )
        grid = stay_time_grid(segment_days(t)[0], UNIT_GRID, gap_cap_s=1800)
        assert grid[1, 1] == 300.0
        assert grid[13, 13] == 600.0

    def test_single_point_zero_grid(self):
        t = _traj([(0.5, 0.5, 7 * 3600.0)])
        assert stay_time_grid(segment_days(t)[0], UNIT_GRID).sum() == 0.0

    def test_empty_segment_rejected(self):
        seg = segment_days(_traj([(0.5, 0.5, 7 * 3600.0)]))[0]
        seg.lat = seg.lon = seg.time = np.array([])
        with pytest.raises(MissingData):
            stay_time_grid(seg, UNIT_GRID)

    @given(
        times=st.lists(
            st.integers(6 * 3600, 24 * 3600 - 1), min_size=1, max_size=40, unique=True
        ),
        cap=st.floats(1.0, 5000.0),
    )
    @settings(max_examples=60)
    def test_total_stay_bounded_by_span(self, times, cap):
        times = sorted(times)
        rng = np.random.default_rng(1)
        pts = [(float(rng.uniform(0, 1)), float(rng.uniform(0, 1)), float(t)) for t in times]
        seg = segment_days(_traj(pts))[0]
        total = stay_time_grid(seg, UNIT_GRID, gap_cap_s=cap).sum()
        assert total <= (times[-1] - times[0]) + 1e-9


class TestTravelDistance:
    def test_identical_points_zero(self):
        base = 6 * 3600.0
        t = _traj([(0.5, 0.5, base), (0.5, 0.5, base + 60)])
        assert travel_distance(segment_days(t)[0]) == 0.0

    def test_hundredth_degree_latitude(self):
        # along a meridian the haversine distance is exactly R * dphi
        base = 6 * 3600.0
        t = _traj([(0.5, 0.5, base), (0.51, 0.5, base + 60)])
        expected = EARTH_RADIUS_KM * math.radians(0.01)
        d = travel_distance(segment_days(t)[0])
        assert d == pytest.approx(expected, abs=1e-9)
        assert d == pytest.approx(1.112, abs=1e-3)

    def test_dropout_pair_skipped(self):
        base = 6 * 3600.0
        t = _traj([(0.5, 0.5, base), (0.6, 0.5, base + 3600)])
        assert travel_distance(segment_days(t)[0], gap_cap_s=1800) == 0.0

    @given(
        lat1=st.floats(0.1, 0.4),
        lat2=st.floats(0.6, 0.9),
        frac=st.floats(0.01, 0.99),
    )
    @settings(max_examples=50)
    def test_collinear_midpoint_invariance(self, lat1, lat2, frac):
        # meridian paths are great-circle segments: inserting a midpoint
        # cannot change the total length
        base = 6 * 3600.0
        mid = lat1 + frac * (lat2 - lat1)
        two = _traj([(lat1, 0.5, base), (lat2, 0.5, base + 600)])
        three = _traj([(lat1, 0.5, base), (mid, 0.5, base + 300), (lat2, 0.5, base + 600)])
        d2 = travel_distance(segment_days(two)[0])
        d3 = travel_distance(segment_days(three)[0])
        assert d3 == pytest.approx(d2, abs=1e-9)


class TestTrajectoryIngestion:
    def test_sorting_and_duplicate_collapse(self):
        t = Trajectory.from_arrays(
            "v", [2.0, 1.0, 3.0, 1.5], [0.0, 0.0, 0.0, 0.0], [20, 10, 30, 10]
        )
        assert t.time.tolist() == [10, 20, 30]
        assert t.lat.tolist() == [1.0, 2.0, 3.0]  # first duplicate kept

    def test_trace_csv_round_trip(self, tmp_path):
        t = Trajectory.from_arrays("car-1", [0.1, 0.2], [0.3, 0.4], [100, 200])
        path = tmp_path / "traces.csv"
        write_trace_csv(path, [t])
        loaded, skipped = read_trace_csv(path)
        assert skipped == 0
        assert set(loaded) == {"car-1"}
        np.testing.assert_allclose(loaded["car-1"].lat, t.lat, atol=1e-7)
        assert loaded["car-1"].time.tolist() == [100.0, 200.0]

    def test_malformed_rows_counted(self, tmp_path):
        path = tmp_path / "traces.csv"
        path.write_text(
            "vehicle_id,lat,lon,timestamp\n"
            "a,0.1,0.2,100\n"
            "b,not-a-float,0.2,100\n"
            "c,0.1,0.2\n"
            "d,95.0,0.2,100\n"
            "e,0.1,0.2,12.5\n"
            "a,0.2,0.3,200\n"
        )
        loaded, skipped = read_trace_csv(path)
        assert skipped == 4
        assert loaded["a"].n_points == 2

    def test_bad_header_rejected(self, tmp_path):
        path = tmp_path / "traces.csv"
        path.write_text("vid,lat,lon,ts\n")
        with pytest.raises(ConfigError):
            read_trace_csv(path)

    def test_trace_point_validation(self):
        with pytest.raises(ValueError):
            TracePoint(91.0, 0.0, 0.0)
        with pytest.raises(ValueError):
            TracePoint(0.0, 181.0, 0.0)
        with pytest.raises(ValueError):
            TracePoint(0.0, 0.0, float("nan"))
