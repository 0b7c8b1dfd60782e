"""Trajectory domain types, grid discretization, and day/stay accounting.

All operations are pure functions; trajectories carry their points as
numpy arrays so multi-million-point fleets stay cheap.
"""

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, MissingData, OutOfBounds

EARTH_RADIUS_KM = 6371.0
DAY_SECONDS = 86400.0
# Daily observation window: points in [0:00, 6:00) local time are discarded.
WINDOW_START_H = 6.0
WINDOW_END_H = 24.0

DEFAULT_GAP_CAP_S = 1800.0


@dataclass(frozen=True)
class TracePoint:
    """One GPS fix: WGS84 degrees plus epoch seconds."""

    lat: float
    lon: float
    time: float

    def __post_init__(self):
        if not (-90.0 <= self.lat <= 90.0):
            raise ValueError(f"latitude {self.lat} outside [-90, 90]")
        if not (-180.0 <= self.lon <= 180.0):
            raise ValueError(f"longitude {self.lon} outside [-180, 180]")
        if not np.isfinite(self.time):
            raise ValueError("timestamp must be finite")


@dataclass
class Trajectory:
    """One vehicle's time-ordered GPS points."""

    vehicle_id: str
    lat: np.ndarray
    lon: np.ndarray
    time: np.ndarray

    @classmethod
    def from_arrays(cls, vehicle_id, lat, lon, time) -> "Trajectory":
        """Build a trajectory: sorts by time and collapses duplicate timestamps.

        The first point of each duplicate-timestamp group is kept, so the
        stored times are strictly increasing.
        """
        lat = np.asarray(lat, dtype=np.float64)
        lon = np.asarray(lon, dtype=np.float64)
        time = np.asarray(time, dtype=np.float64)
        if not (lat.shape == lon.shape == time.shape) or lat.ndim != 1:
            raise ValueError("lat/lon/time must be equal-length 1-D arrays")
        order = np.argsort(time, kind="stable")
        lat, lon, time = lat[order], lon[order], time[order]
        if len(time) > 1:
            keep = np.concatenate([[True], np.diff(time) > 0])
            lat, lon, time = lat[keep], lon[keep], time[keep]
        return cls(vehicle_id=vehicle_id, lat=lat, lon=lon, time=time)

    @property
    def n_points(self) -> int:
        return len(self.time)

    def point(self, i: int) -> TracePoint:
        return TracePoint(float(self.lat[i]), float(self.lon[i]), float(self.time[i]))


@dataclass(frozen=True)
class GridSpec:
    """Uniform lat/lon grid over a rectangular city area."""

    lat_min: float
    lat_max: float
    lon_min: float
    lon_max: float
    rows: int = 24
    cols: int = 24

    def __post_init__(self):
        if not (self.lat_min < self.lat_max and self.lon_min < self.lon_max):
            raise ConfigError("grid bounds must satisfy min < max")
        if self.rows < 1 or self.cols < 1:
            raise ConfigError("grid must have at least one row and column")

    @property
    def cell_height(self) -> float:
        return (self.lat_max - self.lat_min) / self.rows

    @property
    def cell_width(self) -> float:
        return (self.lon_max - self.lon_min) / self.cols


@dataclass(frozen=True)
class TimeSlot:
    """Intra-day slot: 0 = whole 6-24 span, 1/2/3 = 6-12 / 12-18 / 18-24."""

    index: int
    start_hour: float
    end_hour: float

    _WINDOWS = {0: (6.0, 24.0), 1: (6.0, 12.0), 2: (12.0, 18.0), 3: (18.0, 24.0)}

    @classmethod
    def of_index(cls, z: int) -> "TimeSlot":
        if z not in cls._WINDOWS:
            raise ConfigError(f"time slot index must be in 0..3, got {z}")
        lo, hi = cls._WINDOWS[z]
        return cls(index=z, start_hour=lo, end_hour=hi)


SLOTS = tuple(TimeSlot.of_index(z) for z in range(4))


@dataclass
class DaySegment:
    """Points of one vehicle within one local calendar day, clipped to 6-24h.

    ``day_index`` is the 0-based ordinal among the vehicle's non-empty days;
    ``calendar_day`` is the absolute local day number (floor(local/86400)),
    which keeps multi-vehicle day channels aligned.
    """

    vehicle_id: str
    day_index: int
    calendar_day: int
    lat: np.ndarray
    lon: np.ndarray
    time: np.ndarray
    tz_offset_hours: float = 0.0

    @property
    def n_points(self) -> int:
        return len(self.time)

    def hour_of_day(self) -> np.ndarray:
        local = self.time + self.tz_offset_hours * 3600.0
        return (local % DAY_SECONDS) / 3600.0


def cell_of(p: TracePoint, grid: GridSpec) -> tuple:
    """Map a point to its (row, col) grid cell.

    Cells are half-open except the last row/col: points exactly on the upper
    bound clamp into the final cell. Raises OutOfBounds outside the bounds.
    """
    if not (grid.lat_min <= p.lat <= grid.lat_max) or not (
        grid.lon_min <= p.lon <= grid.lon_max
    ):
        raise OutOfBounds(
            f"point ({p.lat}, {p.lon}) outside grid bounds "
            f"[{grid.lat_min}, {grid.lat_max}] x [{grid.lon_min}, {grid.lon_max}]"
        )
    row = int((p.lat - grid.lat_min) / grid.cell_height)
    col = int((p.lon - grid.lon_min) / grid.cell_width)
    return min(row, grid.rows - 1), min(col, grid.cols - 1)


def cell_indices(lat, lon, grid: GridSpec):
    """Vectorized cell_of.

    Returns (rows, cols, in_bounds). Out-of-bounds entries hold -1 and are
    False in the mask; callers drop them (feature extraction) or raise.
    """
    lat = np.asarray(lat, dtype=np.float64)
    lon = np.asarray(lon, dtype=np.float64)
    ok = (
        (lat >= grid.lat_min)
        & (lat <= grid.lat_max)
        & (lon >= grid.lon_min)
        & (lon <= grid.lon_max)
    )
    rows = np.floor((lat - grid.lat_min) / grid.cell_height).astype(np.int64)
    cols = np.floor((lon - grid.lon_min) / grid.cell_width).astype(np.int64)
    np.clip(rows, 0, grid.rows - 1, out=rows)
    np.clip(cols, 0, grid.cols - 1, out=cols)
    rows[~ok] = -1
    cols[~ok] = -1
    return rows, cols, ok


def segment_days(t: Trajectory, tz_offset_hours: float = 0.0) -> list:
    """Split a trajectory into per-local-day segments clipped to the 6-24h window.

    Days with no in-window points produce no segment; day_index runs
    chronologically from 0 over the days that remain.
    """
    if t.n_points == 0:
        return []
    local = t.time + tz_offset_hours * 3600.0
    second_of_day = local % DAY_SECONDS
    in_window = (second_of_day >= WINDOW_START_H * 3600.0) & (
        second_of_day < WINDOW_END_H * 3600.0
    )
    if not in_window.any():
        return []
    days = np.floor(local / DAY_SECONDS).astype(np.int64)
    segments = []
    for k, day in enumerate(np.unique(days[in_window])):
        sel = in_window & (days == day)
        segments.append(
            DaySegment(
                vehicle_id=t.vehicle_id,
                day_index=k,
                calendar_day=int(day),
                lat=t.lat[sel],
                lon=t.lon[sel],
                time=t.time[sel],
                tz_offset_hours=tz_offset_hours,
            )
        )
    return segments


def stay_time_grid(
    seg: DaySegment, grid: GridSpec, gap_cap_s: float = DEFAULT_GAP_CAP_S
) -> np.ndarray:
    """Seconds of stay time per grid cell for one day segment.

    Each consecutive interval is credited wholly to the earlier point's
    cell, capped at gap_cap_s so tracking dropouts do not accrue phantom
    stay. Out-of-bounds points contribute nothing.
    """
    if seg.n_points == 0:
        raise MissingData("stay_time_grid needs a nonempty segment")
    out = np.zeros((grid.rows, grid.cols), dtype=np.float64)
    if seg.n_points < 2:
        return out
    durations = np.minimum(np.diff(seg.time), gap_cap_s)
    rows, cols, ok = cell_indices(seg.lat[:-1], seg.lon[:-1], grid)
    sel = ok & (durations > 0)
    np.add.at(out, (rows[sel], cols[sel]), durations[sel])
    return out


def haversine_km(lat1, lon1, lat2, lon2):
    """Great-circle distance in kilometers (vectorized, R=6371 km)."""
    lat1, lon1, lat2, lon2 = map(np.radians, (lat1, lon1, lat2, lon2))
    dlat = lat2 - lat1
    dlon = lon2 - lon1
    a = np.sin(dlat / 2.0) ** 2 + np.cos(lat1) * np.cos(lat2) * np.sin(dlon / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(a))


def travel_distance(seg: DaySegment, gap_cap_s: float = DEFAULT_GAP_CAP_S) -> float:
    """Kilometers driven in one day segment.

    Consecutive pairs separated by more than gap_cap_s are tracking
    dropouts, not driving, and contribute nothing.
    """
    if seg.n_points == 0:
        raise MissingData("travel_distance needs a nonempty segment")
    if seg.n_points < 2:
        return 0.0
    gaps = np.diff(seg.time)
    d = haversine_km(seg.lat[:-1], seg.lon[:-1], seg.lat[1:], seg.lon[1:])
    return float(np.sum(d[gaps <= gap_cap_s]))


TRACE_CSV_HEADER = ["vehicle_id", "lat", "lon", "timestamp"]


def read_trace_csv(path):
    """Read the canonical trace CSV.

    Rows may be unsorted; points are sorted per vehicle and duplicate
    timestamps collapsed. Malformed rows (wrong arity, unparsable fields,
    coordinates off the globe, non-integer timestamps) are skipped.

    Returns (trajectories: dict vehicle_id -> Trajectory, skipped_rows: int).
    """
    per_vehicle: dict = {}
    skipped = 0
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != TRACE_CSV_HEADER:
            raise ConfigError(f"unexpected trace CSV header: {header}")
        for row in reader:
            if len(row) != 4:
                skipped += 1
                continue
            vid, lat_s, lon_s, ts_s = row
            try:
                lat = float(lat_s)
                lon = float(lon_s)
                ts = int(ts_s)
            except ValueError:
                skipped += 1
                continue
            if not vid or not (-90.0 <= lat <= 90.0) or not (-180.0 <= lon <= 180.0):
                skipped += 1
                continue
            bucket = per_vehicle.setdefault(vid, ([], [], []))
            bucket[0].append(lat)
            bucket[1].append(lon)
            bucket[2].append(ts)
    trajectories = {
        vid: Trajectory.from_arrays(vid, lats, lons, times)
        for vid, (lats, lons, times) in per_vehicle.items()
    }
    return trajectories, skipped


def write_trace_csv(path, trajectories) -> None:
    """Write trajectories in the canonical CSV layout (integer timestamps)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRACE_CSV_HEADER)
        for t in trajectories:
            for i in range(t.n_points):
                writer.writerow(
                    [
                        t.vehicle_id,
                        f"{t.lat[i]:.7f}",
                        f"{t.lon[i]:.7f}",
                        int(round(t.time[i])),
                    ]
                )
