"""Shared features: coverage statistics and the robust similarity metric.

The similarity tests compare the implementation against sim_star_oracle, a
deliberately independent pure-Python re-implementation of the shift/pool
Jaccard procedure.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ridescreen.errors import MissingData, ShapeError
from ridescreen.features import (
    FEATURE_NAMES,
    FeatureConfig,
    SharedFeatureVector,
    VehicleCoverage,
    CoverageMatrix,
    bus_rush_hour_trips,
    coverage_for_days,
    coverage_matrix,
    coverage_variance,
    extract_features,
    interday_similarity,
    intraday_similarity,
    mean_coverage,
    read_features_csv,
    robust_similarity,
    write_features_csv,
)
from ridescreen.traj import GridSpec, Trajectory, segment_days

UNIT_GRID = GridSpec(0.0, 1.0, 0.0, 1.0)


# ---------------------------------------------------------------------------
# Independent oracle: plain-Python lists, explicit loops, no numpy.


def jaccard_loops(a, b):
    inter = union = 0
    for i in range(len(a)):
        for j in range(len(a[0])):
            x, y = a[i][j], b[i][j]
            if x and y:
                inter += 1
            if x or y:
                union += 1
    return 1.0 if union == 0 else inter / union


def shift_loops(mat, dr, dc):
    rows, cols = len(mat), len(mat[0])
    out = [[0] * cols for _ in range(rows)]
    for i in range(rows):
        for j in range(cols):
            si, sj = i + dr, j + dc
            if 0 <= si < rows and 0 <= sj < cols:
                out[i][j] = mat[si][sj]
    return out


def pool_loops(mat):
    rows, cols = len(mat), len(mat[0])
    r2, c2 = (rows + 1) // 2, (cols + 1) // 2
    out = [[0] * c2 for _ in range(r2)]
    for i in range(rows):
        for j in range(cols):
            if mat[i][j]:
                out[i // 2][j // 2] = 1
    return out


def sim_star_oracle(c1, c2):
    c1 = [[1 if v else 0 for v in row] for row in np.asarray(c1).tolist()]
    c2 = [[1 if v else 0 for v in row] for row in np.asarray(c2).tolist()]
    variants = [c1] + [shift_loops(c1, dr, dc) for dr, dc in ((0, 1), (0, -1), (1, 0), (-1, 0))]
    sim1 = sum(jaccard_loops(v, c2) for v in variants) / 5.0
    p1, p2 = pool_loops(c1), pool_loops(c2)
    pooled = [p1] + [shift_loops(p1, dr, dc) for dr, dc in ((0, 1), (0, -1), (1, 0), (-1, 0))]
    sim2 = sum(jaccard_loops(v, p2) for v in pooled) / 5.0
    return (sim1 + sim2) / 2.0


def _singleton(rows, cols, r, c):
    m = np.zeros((rows, cols), dtype=np.uint8)
    m[r, c] = 1
    return m


class TestRobustSimilarity:
    def test_hand_traced_nearby_and_far(self):
        a = _singleton(3, 3, 0, 0)
        assert robust_similarity(a, _singleton(3, 3, 0, 1)) == pytest.approx(0.2)
        assert robust_similarity(a, _singleton(3, 3, 2, 2)) == 0.0

    def test_nearby_beats_far_ordering(self):
        a = _singleton(3, 3, 0, 0)
        assert robust_similarity(a, _singleton(3, 3, 0, 1)) > robust_similarity(
            a, _singleton(3, 3, 2, 2)
        )

    def test_both_empty_is_one(self):
        z = np.zeros((4, 4), dtype=np.uint8)
        assert robust_similarity(z, z) == 1.0

    def test_empty_vs_nonempty_is_zero(self):
        z = np.zeros((4, 4), dtype=np.uint8)
        assert robust_similarity(z, _singleton(4, 4, 1, 1)) == 0.0

    def test_self_similarity_isolated_pattern(self):
        # ones separated far enough that no raw or pooled shift overlaps:
        # only the identity term survives -> 0.2
        m = np.zeros((8, 8), dtype=np.uint8)
        m[0, 0] = m[4, 4] = 1
        assert robust_similarity(m, m) == pytest.approx(0.2)

    def test_self_similarity_dense_pattern_higher(self):
        ones = np.ones((24, 24), dtype=np.uint8)
        value = robust_similarity(ones, ones)
        assert value == pytest.approx(0.95)
        assert value > 0.2

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            robust_similarity(np.zeros((3, 3)), np.zeros((4, 4)))

    def test_oracle_equivalence_random_6x6(self):
        rng = np.random.default_rng(42)
        for _ in range(200):
            a = (rng.random((6, 6)) < 0.3).astype(np.uint8)
            b = (rng.random((6, 6)) < 0.3).astype(np.uint8)
            assert robust_similarity(a, b) == sim_star_oracle(a, b)

    def test_oracle_equivalence_random_24x24(self):
        rng = np.random.default_rng(43)
        for _ in range(50):
            a = (rng.random((24, 24)) < 0.15).astype(np.uint8)
            b = (rng.random((24, 24)) < 0.15).astype(np.uint8)
            assert robust_similarity(a, b) == sim_star_oracle(a, b)

    def test_zero_beyond_shift_and_pool_reach(self):
        # influence radius: one-cell shift plus 2x2 pooling cannot connect
        # singletons more than 3 cells apart on either axis
        for r1 in range(6):
            for c1 in range(6):
                for r2 in range(6):
                    for c2 in range(6):
                        if abs(r1 - r2) > 3 or abs(c1 - c2) > 3:
                            a = _singleton(6, 6, r1, c1)
                            b = _singleton(6, 6, r2, c2)
                            assert robust_similarity(a, b) == 0.0

    def test_monotone_chain_from_origin(self):
        a = _singleton(6, 6, 0, 0)
        values = [robust_similarity(a, _singleton(6, 6, 0, c)) for c in range(6)]
        assert all(x >= y for x, y in zip(values, values[1:]))
        assert values[4] == 0.0 and values[5] == 0.0

    def test_translation_invariance_by_two_cells(self):
        # rigid translation by 2 preserves pooling alignment, so the
        # self-similarity value cannot change
        rng = np.random.default_rng(9)
        for _ in range(25):
            a = np.zeros((10, 10), dtype=np.uint8)
            a[1:5, 1:5] = (rng.random((4, 4)) < 0.4).astype(np.uint8)
            b = np.roll(np.roll(a, 2, axis=0), 2, axis=1)
            assert robust_similarity(a, a) == pytest.approx(robust_similarity(b, b))

    @given(
        a=arrays(np.uint8, (8, 8), elements=st.integers(0, 1)),
        b=arrays(np.uint8, (8, 8), elements=st.integers(0, 1)),
    )
    @settings(max_examples=100)
    def test_bounded(self, a, b):
        value = robust_similarity(a, b)
        assert 0.0 <= value <= 1.0


def _seg_traj(day_points, vid="v"):
    """day_points: list per day of (hour, lat, lon) tuples."""
    lat, lon, time = [], [], []
    for day, pts in enumerate(day_points):
        for hour, la, lo in pts:
            time.append(day * 86400 + hour * 3600.0)
            lat.append(la)
            lon.append(lo)
    return Trajectory.from_arrays(vid, lat, lon, time)


def _coverage(day_points):
    t = _seg_traj(day_points)
    return coverage_for_days(segment_days(t), UNIT_GRID)


class TestCoverageStatistics:
    def test_matrix_marks_visited_cells(self):
        t = _seg_traj([[(7.0, 0.05, 0.05), (7.5, 0.55, 0.55), (8.0, 0.95, 0.95)]])
        seg = segment_days(t)[0]
        m = coverage_matrix(seg, UNIT_GRID, 1)
        assert m.data.sum() == 3

    def test_empty_slot_zero_matrix(self):
        t = _seg_traj([[(7.0, 0.5, 0.5)]])
        m = coverage_matrix(segment_days(t)[0], UNIT_GRID, 2)
        assert m.data.sum() == 0

    def test_repeats_stay_binary(self):
        t = _seg_traj([[(7.0 + i * 0.01, 0.5, 0.5) for i in range(100)]])
        m = coverage_matrix(segment_days(t)[0], UNIT_GRID, 1)
        assert m.data.sum() == 1

    def test_mean_coverage_arithmetic(self):
        cov = _coverage(
            [
                [(7.0, 0.05, 0.05), (8.0, 0.15, 0.15), (9.0, 0.25, 0.25), (10.0, 0.35, 0.35)],
                [(7.0, 0.05, 0.05), (8.0, 0.15, 0.15), (9.0, 0.25, 0.25),
                 (10.0, 0.35, 0.35), (11.0, 0.45, 0.45), (11.5, 0.55, 0.55)],
            ]
        )
        assert mean_coverage(cov, 0) == 5.0
        assert coverage_variance(cov, 0) == 1.0

    def test_single_day(self):
        cov = _coverage([[(7.0, 0.05, 0.05), (8.0, 0.15, 0.15), (9.0, 0.25, 0.25)]])
        assert mean_coverage(cov, 0) == 3.0
        assert coverage_variance(cov, 0) == 0.0

    def test_all_zero(self):
        cov = _coverage([[(7.0, 0.5, 0.5)], [(7.0, 0.5, 0.5)], [(7.0, 0.5, 0.5)]])
        assert coverage_variance(cov, 2) == 0.0
        assert mean_coverage(cov, 2) == 0.0

    def test_no_days_rejected(self):
        cov = VehicleCoverage(vehicle_id="x", per_day=[])
        with pytest.raises(MissingData):
            mean_coverage(cov, 0)
        with pytest.raises(MissingData):
            coverage_variance(cov, 0)

    def test_variance_zero_iff_equal_counts(self):
        equal = _coverage([[(7.0, 0.05, 0.05)], [(7.0, 0.05, 0.05)]])
        assert coverage_variance(equal, 0) == 0.0
        unequal = _coverage([[(7.0, 0.05, 0.05)], [(7.0, 0.05, 0.05), (8.0, 0.95, 0.95)]])
        assert coverage_variance(unequal, 0) > 0.0


class TestDaySimilarities:
    def test_interday_two_days_single_pair(self):
        cov = _coverage([[(7.0, 0.05, 0.05)], [(7.0, 0.05, 0.05)]])
        expected = robust_similarity(cov.matrix(0, 0), cov.matrix(1, 0))
        assert interday_similarity(cov, 0) == expected

    def test_interday_identical_days_equal_self_similarity(self):
        day = [(7.0, 0.05, 0.05), (13.0, 0.55, 0.55), (19.0, 0.95, 0.95)]
        cov = _coverage([list(day) for _ in range(3)])
        self_sim = robust_similarity(cov.matrix(0, 0), cov.matrix(0, 0))
        assert interday_similarity(cov, 0) == pytest.approx(self_sim)

    def test_interday_all_empty_is_one(self):
        cov = _coverage([[(7.0, 0.5, 0.5)], [(7.0, 0.5, 0.5)]])
        assert interday_similarity(cov, 3) == 1.0

    def test_interday_needs_two_days(self):
        cov = _coverage([[(7.0, 0.5, 0.5)]])
        with pytest.raises(MissingData):
            interday_similarity(cov, 0)

    def test_intraday_identical_slots(self):
        # the same cell visited in all three slots every day
        day = [(7.0, 0.5, 0.5), (13.0, 0.5, 0.5), (19.0, 0.5, 0.5)]
        cov = _coverage([list(day), list(day)])
        constant = robust_similarity(cov.matrix(0, 1), cov.matrix(0, 2))
        assert intraday_similarity(cov) == pytest.approx(constant)

    def test_intraday_matches_direct_formula(self):
        rng = np.random.default_rng(3)
        days = []
        for _ in range(3):
            days.append(
                [(float(rng.uniform(6.2, 23.8)), float(rng.uniform(0, 1)), float(rng.uniform(0, 1)))
                 for _ in range(12)]
            )
        cov = _coverage(days)
        total = 0.0
        for k in range(cov.n_days):
            total += (
                sim_star_oracle(cov.matrix(k, 1), cov.matrix(k, 2))
                + sim_star_oracle(cov.matrix(k, 1), cov.matrix(k, 3))
                + sim_star_oracle(cov.matrix(k, 2), cov.matrix(k, 3))
            ) / 3.0
        assert intraday_similarity(cov) == pytest.approx(total / cov.n_days)

    def test_interday_matches_direct_formula(self):
        rng = np.random.default_rng(4)
        days = []
        for _ in range(4):
            days.append(
                [(float(rng.uniform(6.2, 23.8)), float(rng.uniform(0, 1)), float(rng.uniform(0, 1)))
                 for _ in range(10)]
            )
        cov = _coverage(days)
        n = cov.n_days
        for z in range(4):
            total = 0.0
            for k1 in range(n - 1):
                for k2 in range(k1 + 1, n):
                    total += sim_star_oracle(cov.matrix(k1, z), cov.matrix(k2, z))
            expected = total * 2.0 / (n * (n - 1))
            assert interday_similarity(cov, z) == pytest.approx(expected)


class TestExtractFeatures:
    def test_stationary_car(self):
        t = _seg_traj([[(7.0, 0.5, 0.5), (8.0, 0.5, 0.5)], [(7.0, 0.5, 0.5), (8.0, 0.5, 0.5)]])
        vec = extract_features(t, UNIT_GRID)
        assert vec.dist_mean == 0.0
        assert vec.cov_mean[0] == 1.0
        assert vec.cov_mean[1] == 1.0
        assert vec.cov_mean[2] == 0.0

    def test_vector_length_fifteen(self):
        t = _seg_traj([[(7.0, 0.4, 0.4), (9.0, 0.6, 0.6)]])
        vec = extract_features(t, UNIT_GRID)
        assert vec.to_array().shape == (15,)
        assert len(FEATURE_NAMES) == 15

    def test_single_day_imputes_interday(self):
        t = _seg_traj([[(7.0, 0.4, 0.4), (9.0, 0.6, 0.6)]])
        vec = extract_features(t, UNIT_GRID)
        assert vec.interday_imputed
        assert vec.interday_sim == (0.0, 0.0, 0.0, 0.0)

    def test_no_window_days_rejected(self):
        t = _seg_traj([[(2.0, 0.5, 0.5)]])
        with pytest.raises(MissingData):
            extract_features(t, UNIT_GRID)

    def test_deterministic(self):
        rng = np.random.default_rng(11)
        days = [
            [(float(rng.uniform(6.2, 23.8)), float(rng.uniform(0, 1)), float(rng.uniform(0, 1)))
             for _ in range(30)]
            for _ in range(4)
        ]
        t = _seg_traj(days)
        a = extract_features(t, UNIT_GRID).to_array()
        b = extract_features(t, UNIT_GRID).to_array()
        assert a.tobytes() == b.tobytes()


class TestBusRushHour:
    def _looping_bus(self, days=2):
        # one point every 10 minutes, 0:00-24:00, wandering lat
        pts = []
        for day in range(days):
            for step in range(144):
                h = step / 6.0
                pts.append((h + day * 24.0, 0.1 + 0.005 * (step % 80), 0.5))
        lat = [p[1] for p in pts]
        time = [p[0] * 3600.0 for p in pts]
        return Trajectory.from_arrays("bus", lat, [0.5] * len(pts), time)

    def test_output_only_in_rush_windows(self):
        reduced = bus_rush_hour_trips(self._looping_bus())
        hours = (reduced.time % 86400.0) / 3600.0
        assert (((hours >= 7) & (hours < 10)) | ((hours >= 17) & (hours < 20))).all()
        assert reduced.n_points > 0

    def test_no_evening_service(self):
        t = self._looping_bus()
        keep = (t.time % 86400.0) / 3600.0 < 15
        t = Trajectory.from_arrays("bus", t.lat[keep], t.lon[keep], t.time[keep])
        reduced = bus_rush_hour_trips(t)
        hours = (reduced.time % 86400.0) / 3600.0
        assert ((hours >= 7) & (hours < 10)).all()

    def test_first_contiguous_run_only(self):
        # two separated in-window runs on one day: only the first is kept
        hours = [7.0, 7.1, 7.2, 8.5, 8.6]
        lat = [0.1, 0.1, 0.1, 0.9, 0.9]
        # insert an out-of-window point to break the run
        hours.insert(3, 12.0)
        lat.insert(3, 0.5)
        order = np.argsort(hours)
        t = Trajectory.from_arrays(
            "bus",
            np.array(lat)[order],
            [0.5] * len(hours),
            np.array(hours)[order] * 3600.0,
        )
        reduced = bus_rush_hour_trips(t)
        kept_hours = sorted((reduced.time % 86400.0) / 3600.0)
        assert kept_hours == pytest.approx([7.0, 7.1, 7.2])


class TestFeatureCsv:
    def test_round_trip(self, tmp_path):
        t = _seg_traj(
            [[(7.0, 0.4, 0.4), (9.0, 0.6, 0.6)], [(7.5, 0.4, 0.4), (9.5, 0.7, 0.7)]]
        )
        vec = extract_features(t, UNIT_GRID)
        path = tmp_path / "features.csv"
        write_features_csv(path, [("car-1", vec, "taxi")])
        ids, X, labels = read_features_csv(path)
        assert ids == ["car-1"]
        assert labels == ["taxi"]
        np.testing.assert_allclose(X[0], vec.to_array(), rtol=1e-8)

    def test_header_is_exact(self, tmp_path):
        t = _seg_traj([[(7.0, 0.4, 0.4), (9.0, 0.6, 0.6)]])
        path = tmp_path / "features.csv"
        write_features_csv(path, [("v", extract_features(t, UNIT_GRID), "unknown")])
        header = path.read_text().splitlines()[0]
        assert header == (
            "vehicle_id,dist_mean,dist_var,cov_mean_0,cov_mean_1,cov_mean_2,"
            "cov_mean_3,cov_var_0,cov_var_1,cov_var_2,cov_var_3,intraday_sim,"
            "interday_sim_0,interday_sim_1,interday_sim_2,interday_sim_3,label"
        )
