"""Stage-1 shared features: distance and coverage statistics.

The 15-component feature vector pairs daily driving-distance statistics
with binary grid-coverage statistics and a shift/pooling-tolerant coverage
similarity, computed per time slot (0 = whole 6-24h span, 1/2/3 = 6-hour
thirds).
"""

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, MissingData, ShapeError
from .traj import (
    DaySegment,
    GridSpec,
    Trajectory,
    cell_indices,
    segment_days,
    travel_distance,
)

N_FEATURES = 15

FEATURE_NAMES = (
    "dist_mean",
    "dist_var",
    "cov_mean_0",
    "cov_mean_1",
    "cov_mean_2",
    "cov_mean_3",
    "cov_var_0",
    "cov_var_1",
    "cov_var_2",
    "cov_var_3",
    "intraday_sim",
    "interday_sim_0",
    "interday_sim_1",
    "interday_sim_2",
    "interday_sim_3",
)

VALID_LABELS = ("taxi", "bus", "ridesourcing", "other", "unknown")

SLOT_HOURS = {0: (6.0, 24.0), 1: (6.0, 12.0), 2: (12.0, 18.0), 3: (18.0, 24.0)}


@dataclass
class CoverageMatrix:
    """Binary visit matrix for one (day, slot): 1 where the vehicle appeared."""

    data: np.ndarray
    day_index: int
    slot: int


@dataclass
class VehicleCoverage:
    """All coverage matrices of one vehicle: per_day[k][z] -> CoverageMatrix."""

    vehicle_id: str
    per_day: list

    @property
    def n_days(self) -> int:
        return len(self.per_day)

    def matrix(self, k: int, z: int) -> np.ndarray:
        return self.per_day[k][z].data


@dataclass
class FeatureConfig:
    """Knobs for feature extraction shared across a dataset."""

    tz_offset_hours: float = 0.0
    gap_cap_s: float = 1800.0
    rush_morning: tuple = (7.0, 10.0)
    rush_evening: tuple = (17.0, 20.0)


@dataclass
class SharedFeatureVector:
    """The 15 Stage-1 features of one vehicle."""

    dist_mean: float
    dist_var: float
    cov_mean: tuple
    cov_var: tuple
    intraday_sim: float
    interday_sim: tuple
    interday_imputed: bool = False

    def __post_init__(self):
        if len(self.cov_mean) != 4 or len(self.cov_var) != 4 or len(self.interday_sim) != 4:
            raise ShapeError("coverage statistics need one entry per slot 0..3")
        arr = self.to_array()
        if not np.all(np.isfinite(arr)):
            raise ValueError("feature vector contains non-finite values")

    def to_array(self) -> np.ndarray:
        return np.array(
            [self.dist_mean, self.dist_var]
            + list(self.cov_mean)
            + list(self.cov_var)
            + [self.intraday_sim]
            + list(self.interday_sim),
            dtype=np.float64,
        )

    @classmethod
    def from_array(cls, arr, interday_imputed=False) -> "SharedFeatureVector":
        arr = np.asarray(arr, dtype=np.float64)
        if arr.shape != (N_FEATURES,):
            raise ShapeError(f"expected {N_FEATURES} features, got shape {arr.shape}")
        return cls(
            dist_mean=float(arr[0]),
            dist_var=float(arr[1]),
            cov_mean=tuple(float(v) for v in arr[2:6]),
            cov_var=tuple(float(v) for v in arr[6:10]),
            intraday_sim=float(arr[10]),
            interday_sim=tuple(float(v) for v in arr[11:15]),
            interday_imputed=interday_imputed,
        )


def coverage_matrix(seg: DaySegment, grid: GridSpec, z: int) -> CoverageMatrix:
    """Binary coverage of one day segment within slot z (empty slot -> zeros)."""
    lo, hi = SLOT_HOURS[z]
    data = np.zeros((grid.rows, grid.cols), dtype=np.uint8)
    if seg is not None and seg.n_points:
        hours = seg.hour_of_day()
        sel = (hours >= lo) & (hours < hi)
        if sel.any():
            rows, cols, ok = cell_indices(seg.lat[sel], seg.lon[sel], grid)
            data[rows[ok], cols[ok]] = 1
    return CoverageMatrix(data=data, day_index=seg.day_index if seg else -1, slot=z)


def coverage_for_days(segments, grid: GridSpec) -> VehicleCoverage:
    """Coverage matrices for every (day, slot) of one vehicle."""
    vid = segments[0].vehicle_id if segments else ""
    per_day = [
        {z: coverage_matrix(seg, grid, z) for z in range(4)} for seg in segments
    ]
    return VehicleCoverage(vehicle_id=vid, per_day=per_day)


def mean_coverage(cov: VehicleCoverage, z: int) -> float:
    """Daily mean number of covered cells in slot z."""
    if cov.n_days == 0:
        raise MissingData("mean_coverage needs at least one day")
    counts = [int(cov.matrix(k, z).sum()) for k in range(cov.n_days)]
    return float(sum(counts)) / cov.n_days


def coverage_variance(cov: VehicleCoverage, z: int) -> float:
    """Population variance of the per-day covered-cell counts in slot z."""
    if cov.n_days == 0:
        raise MissingData("coverage_variance needs at least one day")
    counts = np.array(
        [int(cov.matrix(k, z).sum()) for k in range(cov.n_days)], dtype=np.float64
    )
    return float(np.var(counts))


def _shift_variants(mat: np.ndarray) -> list:
    """[identity, left, right, up, down] with one-cell stride and zero fill."""
    left = np.zeros_like(mat)
    left[:, :-1] = mat[:, 1:]
    right = np.zeros_like(mat)
    right[:, 1:] = mat[:, :-1]
    up = np.zeros_like(mat)
    up[:-1, :] = mat[1:, :]
    down = np.zeros_like(mat)
    down[1:, :] = mat[:-1, :]
    return [mat, left, right, up, down]


def _max_pool2(mat: np.ndarray) -> np.ndarray:
    """2x2 max pooling, stride 2, zero padding on odd dimensions."""
    rows, cols = mat.shape
    r2, c2 = -(-rows // 2), -(-cols // 2)
    padded = np.zeros((r2 * 2, c2 * 2), dtype=mat.dtype)
    padded[:rows, :cols] = mat
    return padded.reshape(r2, 2, c2, 2).max(axis=(1, 3))


def _jaccard(a: np.ndarray, b: np.ndarray) -> float:
    """Binary Jaccard; two empty matrices count as identical (1.0)."""
    inter = int(np.count_nonzero(a & b))
    union = int(np.count_nonzero(a | b))
    return 1.0 if union == 0 else inter / union


class _SimParts:
    """Precomputed shift/pool variants of one matrix used as the first argument."""

    __slots__ = ("raw_variants", "pooled", "pooled_variants")

    def __init__(self, mat: np.ndarray):
        self.raw_variants = _shift_variants(mat)
        self.pooled = _max_pool2(mat)
        self.pooled_variants = _shift_variants(self.pooled)


def _sim_star(parts: _SimParts, other: np.ndarray, other_pooled: np.ndarray) -> float:
    sim1 = sum(_jaccard(v, other) for v in parts.raw_variants) / 5.0
    sim2 = sum(_jaccard(v, other_pooled) for v in parts.pooled_variants) / 5.0
    return (sim1 + sim2) / 2.0


def robust_similarity(c1, c2) -> float:
    """Shift- and pooling-tolerant coverage similarity in [0, 1].

    Averages the Jaccard similarity of the second matrix against the first
    matrix and its four one-cell shifts, on both the raw matrices and their
    2x2 max-pooled forms. Shifts and pooling apply to the first argument
    only, so the measure is not symmetric; callers pass the earlier
    day/slot first.
    """
    a = c1.data if isinstance(c1, CoverageMatrix) else np.asarray(c1)
    b = c2.data if isinstance(c2, CoverageMatrix) else np.asarray(c2)
    if a.shape != b.shape:
        raise ShapeError(f"coverage matrices differ in shape: {a.shape} vs {b.shape}")
    a = (a != 0).astype(np.uint8)
    b = (b != 0).astype(np.uint8)
    return _sim_star(_SimParts(a), b, _max_pool2(b))


def intraday_similarity(cov: VehicleCoverage) -> float:
    """Mean over days of the three pairwise slot similarities (1-2, 1-3, 2-3)."""
    if cov.n_days == 0:
        raise MissingData("intraday_similarity needs at least one day")
    total = 0.0
    for k in range(cov.n_days):
        mats = {z: (cov.matrix(k, z) != 0).astype(np.uint8) for z in (1, 2, 3)}
        pooled = {z: _max_pool2(mats[z]) for z in (1, 2, 3)}
        parts = {z: _SimParts(mats[z]) for z in (1, 2)}
        day_sum = (
            _sim_star(parts[1], mats[2], pooled[2])
            + _sim_star(parts[1], mats[3], pooled[3])
            + _sim_star(parts[2], mats[3], pooled[3])
        )
        total += day_sum / 3.0
    return total / cov.n_days


def interday_similarity(cov: VehicleCoverage, z: int) -> float:
    """Mean similarity over all day pairs (earlier day first) in slot z."""
    n = cov.n_days
    if n < 2:
        raise MissingData("interday_similarity needs at least two days")
    mats = [(cov.matrix(k, z) != 0).astype(np.uint8) for k in range(n)]
    pooled = [_max_pool2(m) for m in mats]
    parts = [_SimParts(m) for m in mats[:-1]]
    total = 0.0
    for k1 in range(n - 1):
        for k2 in range(k1 + 1, n):
            total += _sim_star(parts[k1], mats[k2], pooled[k2])
    return total * 2.0 / (n * (n - 1))


def extract_features(
    t: Trajectory, grid: GridSpec, cfg: FeatureConfig = None
) -> SharedFeatureVector:
    """The 15 shared features of one vehicle.

    Raises MissingData when the trajectory has no in-window day. With a
    single day the inter-day similarities are imputed as 0 and flagged.
    """
    cfg = cfg or FeatureConfig()
    segments = segment_days(t, cfg.tz_offset_hours)
    if not segments:
        raise MissingData(f"vehicle {t.vehicle_id} has no points in the 6-24h window")
    dists = np.array(
        [travel_distance(seg, cfg.gap_cap_s) for seg in segments], dtype=np.float64
    )
    cov = coverage_for_days(segments, grid)
    cov_mean = tuple(mean_coverage(cov, z) for z in range(4))
    cov_var = tuple(coverage_variance(cov, z) for z in range(4))
    imputed = cov.n_days < 2
    if imputed:
        inter = (0.0, 0.0, 0.0, 0.0)
    else:
        inter = tuple(interday_similarity(cov, z) for z in range(4))
    return SharedFeatureVector(
        dist_mean=float(np.mean(dists)),
        dist_var=float(np.var(dists)),
        cov_mean=cov_mean,
        cov_var=cov_var,
        intraday_sim=intraday_similarity(cov),
        interday_sim=inter,
        interday_imputed=imputed,
    )


def bus_rush_hour_trips(
    t: Trajectory,
    tz_offset_hours: float = 0.0,
    morning: tuple = (7.0, 10.0),
    evening: tuple = (17.0, 20.0),
) -> Trajectory:
    """Reduce a bus trace to one morning and one evening rush-hour trip per day.

    A trip is the first maximal run of consecutive points inside the window;
    days lacking a window contribute nothing for it.
    """
    if t.n_points == 0:
        return Trajectory.from_arrays(t.vehicle_id, [], [], [])
    local = t.time + tz_offset_hours * 3600.0
    hours = (local % 86400.0) / 3600.0
    days = np.floor(local / 86400.0).astype(np.int64)
    keep = np.zeros(t.n_points, dtype=bool)
    for day in np.unique(days):
        on_day = days == day
        for lo, hi in (morning, evening):
            in_win = on_day & (hours >= lo) & (hours < hi)
            idx = np.flatnonzero(in_win)
            if idx.size == 0:
                continue
            breaks = np.flatnonzero(np.diff(idx) > 1)
            end = idx[breaks[0]] if breaks.size else idx[-1]
            keep[idx[0] : end + 1] = True
    return Trajectory.from_arrays(
        t.vehicle_id, t.lat[keep], t.lon[keep], t.time[keep]
    )


FEATURE_CSV_HEADER = ["vehicle_id"] + list(FEATURE_NAMES) + ["label"]


def write_features_csv(path, rows) -> None:
    """Write feature rows: iterable of (vehicle_id, SharedFeatureVector, label).

    Floats are serialized with 9 significant digits.
    """
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(FEATURE_CSV_HEADER)
        for vid, vec, label in rows:
            if label not in VALID_LABELS:
                raise ConfigError(f"invalid label {label!r} for vehicle {vid}")
            writer.writerow([vid] + [f"{v:.9g}" for v in vec.to_array()] + [label])


def read_features_csv(path):
    """Read a feature CSV; returns (ids, X matrix, labels)."""
    ids, rows, labels = [], [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != FEATURE_CSV_HEADER:
            raise ConfigError(f"unexpected feature CSV header: {header}")
        for row in reader:
            if len(row) != len(FEATURE_CSV_HEADER):
                raise ConfigError(f"malformed feature row: {row}")
            ids.append(row[0])
            rows.append([float(v) for v in row[1 : 1 + N_FEATURES]])
            label = row[-1]
            if label not in VALID_LABELS:
                raise ConfigError(f"invalid label {label!r} in {path}")
            labels.append(label)
    X = np.array(rows, dtype=np.float64) if rows else np.empty((0, N_FEATURES))
    return ids, X, labels
