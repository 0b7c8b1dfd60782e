"""Synthetic labeled fleets over a hotspot-based city model.

Five archetypes with contrasting mobility: taxis (24h, many scattered
passenger trips), ridesourcing cars (like taxis but active 6-24h, parked
at home overnight, often working a personal subset of hotspots), buses
(fixed polyline on a timetable), commuters (two repeated home-work trips),
and occasional drivers (0-2 short errands). Per-vehicle seeds derive from
the master seed and vehicle id, so generation order and parallelism cannot
change the output.
"""

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError
from .traj import EARTH_RADIUS_KM, Trajectory, haversine_km
from .util import derive_seed, rng_for

M_PER_DEG_LAT = 1000.0 * math.pi * EARTH_RADIUS_KM / 180.0

ARCHETYPE_ORDER = ("taxi", "bus", "ridesourcing", "commuter", "occasional")


@dataclass(frozen=True)
class Hotspot:
    lat: float
    lon: float
    weight: float


@dataclass(frozen=True)
class CityModel:
    lat_min: float
    lat_max: float
    lon_min: float
    lon_max: float
    hotspots: tuple
    road_noise_m: float
    seed: int

    def __post_init__(self):
        if len(self.hotspots) < 2:
            raise ConfigError("a city needs at least two hotspots")
        weights = [h.weight for h in self.hotspots]
        if min(weights) <= 0:
            raise ConfigError("hotspot weights must be positive")
        if abs(sum(weights) - 1.0) > 1e-9:
            raise ConfigError("hotspot weights must be normalized")

    @property
    def bounds(self) -> tuple:
        return (self.lat_min, self.lat_max, self.lon_min, self.lon_max)

    @classmethod
    def generate(
        cls, bounds, n_hotspots: int = 12, road_noise_m: float = 30.0, seed: int = 0
    ) -> "CityModel":
        """Random weighted hotspots placed inside the inner 85% of the bounds."""
        lat_min, lat_max, lon_min, lon_max = bounds
        rng = rng_for(seed, "city")
        raw = rng.uniform(0.5, 1.5, size=n_hotspots)
        weights = raw / raw.sum()
        margin_lat = 0.075 * (lat_max - lat_min)
        margin_lon = 0.075 * (lon_max - lon_min)
        spots = tuple(
            Hotspot(
                lat=float(rng.uniform(lat_min + margin_lat, lat_max - margin_lat)),
                lon=float(rng.uniform(lon_min + margin_lon, lon_max - margin_lon)),
                weight=float(w),
            )
            for w in weights
        )
        return cls(
            lat_min=lat_min,
            lat_max=lat_max,
            lon_min=lon_min,
            lon_max=lon_max,
            hotspots=spots,
            road_noise_m=road_noise_m,
            seed=seed,
        )


def domain_shift(city: CityModel, shift_strength: float, seed: int = None) -> CityModel:
    """A city with re-drawn hotspot weights and a fraction of hotspots relocated.

    Used to give the source domain (taxis/buses) a different spatial
    distribution than the target domain. shift_strength 0 returns the city
    unchanged; 1 relocates every hotspot.
    """
    if not 0.0 <= shift_strength <= 1.0:
        raise ConfigError(f"shift_strength must be in [0, 1], got {shift_strength}")
    if shift_strength == 0.0:
        return city
    rng = rng_for(city.seed if seed is None else seed, "domain-shift")
    n = len(city.hotspots)
    n_moved = int(round(shift_strength * n))
    moved = set(rng.choice(n, size=n_moved, replace=False).tolist())
    raw = rng.uniform(0.5, 1.5, size=n)
    weights = raw / raw.sum()
    margin_lat = 0.075 * (city.lat_max - city.lat_min)
    margin_lon = 0.075 * (city.lon_max - city.lon_min)
    spots = []
    for i, h in enumerate(city.hotspots):
        if i in moved:
            lat = float(rng.uniform(city.lat_min + margin_lat, city.lat_max - margin_lat))
            lon = float(rng.uniform(city.lon_min + margin_lon, city.lon_max - margin_lon))
        else:
            lat, lon = h.lat, h.lon
        spots.append(Hotspot(lat=lat, lon=lon, weight=float(weights[i])))
    return replace(
        city, hotspots=tuple(spots), seed=derive_seed(city.seed, "shifted", shift_strength)
    )


@dataclass(frozen=True)
class NoiseSpec:
    """Spatio-temporal degradation: one point per X minutes, each displaced
    uniformly within a Y-meter disc."""

    sample_interval_min: float
    jitter_radius_m: float
    seed: int = 0

    def __post_init__(self):
        if self.sample_interval_min <= 0:
            raise ConfigError("noise sampling interval must be positive")
        if self.jitter_radius_m < 0:
            raise ConfigError("noise jitter radius cannot be negative")


@dataclass
class ArchetypeParams:
    """Behavior knobs for one vehicle archetype; unused fields are ignored."""

    archetype: str
    active_hours: tuple = (6.0, 24.0)
    speed_kmh: tuple = (30.0, 40.0)
    trips_per_day: float = 0.0
    rate_mult: tuple = (1.0, 1.0)
    hotspot_fraction: tuple = (1.0, 1.0)
    spot_jitter_m: float = 700.0
    pickup_dwell_s: float = 60.0
    home_overnight: bool = False
    commute_km: tuple = (4.0, 10.0)
    errand_prob: float = 0.0
    errand_km: tuple = (0.8, 2.5)
    trips_range: tuple = (0, 2)
    trip_km: tuple = (1.0, 4.0)
    long_trip_prob: float = 0.0
    long_trip_km: tuple = (8.0, 16.0)
    parttime_prob: float = 0.0  # ridesourcing: commute + evening rides only
    parttime_trips: float = 2.2
    heavy_prob: float = 0.0  # commuter: several errands per day, often at hotspots
    route_km: tuple = (5.0, 9.0)
    route_stops: int = 6
    stop_dwell_s: float = 30.0
    layover_s: tuple = (480.0, 900.0)
    route: tuple = None
    home: tuple = None
    work: tuple = None


DEFAULT_ARCHETYPES = {
    "taxi": ArchetypeParams(
        archetype="taxi",
        active_hours=(0.0, 24.0),
        trips_per_day=18.0,
        rate_mult=(0.75, 1.25),
        hotspot_fraction=(1.0, 1.0),
    ),
    "ridesourcing": ArchetypeParams(
        archetype="ridesourcing",
        active_hours=(6.0, 24.0),
        trips_per_day=10.0,
        rate_mult=(0.35, 1.15),
        hotspot_fraction=(0.35, 1.0),
        home_overnight=True,
        parttime_prob=0.22,
        parttime_trips=2.2,
    ),
    "bus": ArchetypeParams(
        archetype="bus",
        active_hours=(6.0, 23.0),
        speed_kmh=(15.0, 21.0),
    ),
    "commuter": ArchetypeParams(
        archetype="commuter",
        speed_kmh=(28.0, 38.0),
        commute_km=(4.5, 12.0),
        errand_prob=0.25,
        errand_km=(0.8, 3.5),
        heavy_prob=0.15,
    ),
    "occasional": ArchetypeParams(
        archetype="occasional",
        speed_kmh=(25.0, 35.0),
        trips_range=(0, 3),
        trip_km=(0.8, 3.0),
        long_trip_prob=0.07,
        long_trip_km=(6.0, 12.0),
    ),
}


def _destination(lat_deg, lon_deg, bearing_rad, dist_km):
    """Exact spherical destination point, so haversine(src, dst) == dist_km."""
    phi1 = np.radians(lat_deg)
    lam1 = np.radians(lon_deg)
    delta = np.asarray(dist_km, dtype=np.float64) / EARTH_RADIUS_KM
    phi2 = np.arcsin(
        np.sin(phi1) * np.cos(delta) + np.cos(phi1) * np.sin(delta) * np.cos(bearing_rad)
    )
    lam2 = lam1 + np.arctan2(
        np.sin(bearing_rad) * np.sin(delta) * np.cos(phi1),
        np.cos(delta) - np.sin(phi1) * np.sin(phi2),
    )
    return np.degrees(phi2), np.degrees(lam2)


def _rand_point(rng, city, margin: float = 0.05):
    dlat = margin * (city.lat_max - city.lat_min)
    dlon = margin * (city.lon_max - city.lon_min)
    return (
        float(rng.uniform(city.lat_min + dlat, city.lat_max - dlat)),
        float(rng.uniform(city.lon_min + dlon, city.lon_max - dlon)),
    )


def _clip_point(lat, lon, city):
    return (
        float(np.clip(lat, city.lat_min, city.lat_max)),
        float(np.clip(lon, city.lon_min, city.lon_max)),
    )


class _Track:
    """Piecewise-linear waypoint schedule with strictly increasing times."""

    def __init__(self, t0, lat, lon):
        self.t = [float(t0)]
        self.lat = [float(lat)]
        self.lon = [float(lon)]

    @property
    def now(self):
        return self.t[-1]

    @property
    def pos(self):
        return self.lat[-1], self.lon[-1]

    def _append(self, t, lat, lon):
        t = max(float(t), self.t[-1] + 1e-6)
        self.t.append(t)
        self.lat.append(float(lat))
        self.lon.append(float(lon))

    def idle_until(self, t):
        if t > self.now:
            self._append(t, *self.pos)

    def idle_for(self, seconds):
        self.idle_until(self.now + seconds)

    def drive_to(self, lat, lon, speed_kmh):
        dist = float(haversine_km(self.lat[-1], self.lon[-1], lat, lon))
        dt = max(1.0, dist / speed_kmh * 3600.0)
        self._append(self.now + dt, lat, lon)
        return self.now


def _sample_track(track, spans, period_s, rng, city):
    """Emit lattice-aligned samples inside the spans, with road noise, clipped."""
    times = []
    for a, b in spans:
        k0 = math.ceil(a / period_s)
        k1 = math.ceil(b / period_s) - 1  # half-open span [a, b)
        if k1 >= k0:
            times.append(np.arange(k0, k1 + 1, dtype=np.float64) * period_s)
    if not times:
        return np.array([]), np.array([]), np.array([])
    t = np.unique(np.concatenate(times))
    wp_t = np.asarray(track.t)
    lat = np.interp(t, wp_t, np.asarray(track.lat))
    lon = np.interp(t, wp_t, np.asarray(track.lon))
    if city.road_noise_m > 0:
        mid_lat = 0.5 * (city.lat_min + city.lat_max)
        lat = lat + rng.normal(0.0, city.road_noise_m, len(t)) / M_PER_DEG_LAT
        lon = lon + rng.normal(0.0, city.road_noise_m, len(t)) / (
            M_PER_DEG_LAT * math.cos(math.radians(mid_lat))
        )
    lat = np.clip(lat, city.lat_min, city.lat_max)
    lon = np.clip(lon, city.lon_min, city.lon_max)
    return t, lat, lon


class _HotspotSampler:
    """Per-vehicle hotspot pool with per-day demand rotation.

    Some drivers only work part of the city (hotspot_fraction), and each
    day the popularity of their pool shifts (gamma-weighted emphasis), so
    daily coverage differs day to day the way passenger demand does.
    """

    def __init__(self, rng, city, params):
        self.rng = rng
        self.city = city
        self.params = params
        frac = rng.uniform(*params.hotspot_fraction)
        n = len(city.hotspots)
        n_keep = max(2, int(round(frac * n)))
        keep = rng.choice(n, size=n_keep, replace=False)
        keep.sort()
        self.keep = keep
        base = np.array([city.hotspots[i].weight for i in keep])
        self.base = base / base.sum()
        self.day_weights = self.base

    def new_day(self):
        emphasis = self.rng.gamma(0.45, size=len(self.keep))
        w = self.base * emphasis
        self.day_weights = w / w.sum()

    def sample(self):
        i = int(self.keep[self.rng.choice(len(self.keep), p=self.day_weights)])
        h = self.city.hotspots[i]
        r_km = abs(self.rng.normal(0.0, self.params.spot_jitter_m / 1000.0))
        bearing = self.rng.uniform(0.0, 2.0 * math.pi)
        lat, lon = _destination(h.lat, h.lon, bearing, r_km)
        return _clip_point(lat, lon, self.city)


def _simulate_service(rng, city, params, days, period_s):
    """Taxi / ridesourcing: chained passenger trips between hotspots.

    Some ridesourcing drivers are part-timers: an ordinary commute plus a
    small evening ride session, traces emitted only while driving. They are
    the genuinely hard positives.
    """
    speed = rng.uniform(*params.speed_kmh)
    mult = rng.uniform(*params.rate_mult)
    home = _rand_point(rng, city)
    spots = _HotspotSampler(rng, city, params)
    if rng.random() < params.parttime_prob:
        return _parttime_service_days(rng, city, params, days, speed, home, spots)
    start_h, end_h = params.active_hours
    first_start = 0.0 * 86400.0 + start_h * 3600.0
    origin = home if params.home_overnight else spots.sample()
    track = _Track(first_start, *origin)
    spans = []
    for day in range(days):
        t0 = day * 86400.0 + start_h * 3600.0
        t1 = day * 86400.0 + end_h * 3600.0
        spans.append((t0, t1))
        track.idle_until(t0)
        spots.new_day()
        n_trips = max(1, int(rng.poisson(params.trips_per_day * mult)))
        starts = np.sort(t0 + rng.uniform(0.0, max(1.0, t1 - t0 - 1800.0), n_trips))
        for s in starts:
            s = max(float(s), track.now)
            if s > t1 - 900.0:
                break
            track.idle_until(s)
            track.drive_to(*spots.sample(), speed)
            track.idle_for(params.pickup_dwell_s)
            track.drive_to(*spots.sample(), speed)
        if params.home_overnight:
            track.idle_until(max(track.now, t1 - 2400.0))
            track.drive_to(*home, speed)
            track.idle_until(t1)
        else:
            track.idle_until(t1)
    return track, spans


def _parttime_service_days(rng, city, params, days, speed, home, spots):
    bearing = rng.uniform(0.0, 2.0 * math.pi)
    work = _clip_point(*_destination(home[0], home[1], bearing, rng.uniform(4.0, 10.0)), city)
    track = _Track(0.0, *home)
    spans = []
    for day in range(days):
        base = day * 86400.0
        spots.new_day()
        dep1 = base + float(np.clip(rng.normal(7.6, 0.3), 6.3, 9.5)) * 3600.0
        track.idle_until(dep1 - 120.0)
        arr1 = track.drive_to(*work, speed)
        spans.append((dep1 - 120.0, arr1 + 120.0))
        track.idle_for(120.0)
        session = max(track.now + 3600.0, base + rng.uniform(17.2, 19.0) * 3600.0)
        track.idle_until(session)
        n_rides = 1 + int(rng.poisson(params.parttime_trips))
        for _ in range(n_rides):
            if track.now > base + 22.8 * 3600.0:
                break
            track.drive_to(*spots.sample(), speed)
            track.idle_for(params.pickup_dwell_s)
            track.drive_to(*spots.sample(), speed)
            track.idle_for(rng.uniform(120.0, 900.0))
        end = track.drive_to(*home, speed)
        spans.append((session, end + 120.0))
        track.idle_for(120.0)
    return track, spans


def _simulate_commuter(rng, city, params, days, period_s):
    """Home-work round trips; heavy commuters add several errands, often at
    the same hotspots that passenger trips visit."""
    speed = rng.uniform(*params.speed_kmh)
    home = params.home or _rand_point(rng, city)
    if params.work:
        work = params.work
    else:
        bearing = rng.uniform(0.0, 2.0 * math.pi)
        dist = rng.uniform(*params.commute_km)
        work = _clip_point(*_destination(home[0], home[1], bearing, dist), city)
    heavy = rng.random() < params.heavy_prob
    hotspot_weights = np.array([h.weight for h in city.hotspots])
    hotspot_weights = hotspot_weights / hotspot_weights.sum()

    def errand_spot():
        if rng.random() < 0.5:
            h = city.hotspots[int(rng.choice(len(city.hotspots), p=hotspot_weights))]
            anchor = (h.lat, h.lon)
            radius = abs(rng.normal(0.0, 0.6))
        else:
            anchor = work
            radius = rng.uniform(*params.errand_km)
        bearing = rng.uniform(0.0, 2.0 * math.pi)
        return _clip_point(*_destination(anchor[0], anchor[1], bearing, radius), city)

    track = _Track(0.0, *home)
    spans = []
    for day in range(days):
        base = day * 86400.0
        dep1 = base + float(np.clip(rng.normal(7.5, 0.3), 6.3, 9.5)) * 3600.0
        track.idle_until(dep1 - 120.0)
        arr1 = track.drive_to(*work, speed)
        spans.append((dep1 - 120.0, arr1 + 120.0))
        track.idle_for(120.0)
        n_errands = 1 + int(rng.poisson(1.3)) if heavy else int(rng.random() < params.errand_prob)
        for _ in range(n_errands):
            dep_e = max(track.now + 600.0, base + rng.uniform(10.5, 15.0) * 3600.0)
            if dep_e > base + 16.0 * 3600.0:
                break
            spot = errand_spot()
            track.idle_until(dep_e)
            track.drive_to(*spot, speed)
            track.idle_for(rng.uniform(600.0, 1800.0))
            back = track.drive_to(*work, speed)
            spans.append((dep_e - 60.0, back + 60.0))
        dep2 = max(track.now + 600.0, base + float(np.clip(rng.normal(17.5, 0.3), 16.0, 20.5)) * 3600.0)
        track.idle_until(dep2 - 120.0)
        arr2 = track.drive_to(*home, speed)
        spans.append((dep2 - 120.0, arr2 + 120.0))
        track.idle_for(120.0)
        if heavy and rng.random() < 0.5:
            dep_n = max(track.now + 900.0, base + rng.uniform(19.0, 21.0) * 3600.0)
            if dep_n < base + 22.0 * 3600.0:
                spot = errand_spot()
                track.idle_until(dep_n)
                track.drive_to(*spot, speed)
                track.idle_for(rng.uniform(1200.0, 3600.0))
                back = track.drive_to(*home, speed)
                spans.append((dep_n - 60.0, back + 60.0))
    return track, spans


def _simulate_occasional(rng, city, params, days, period_s):
    speed = rng.uniform(*params.speed_kmh)
    home = params.home or _rand_point(rng, city)
    track = _Track(0.0, *home)
    spans = []
    for day in range(days):
        base = day * 86400.0
        n = int(rng.integers(params.trips_range[0], params.trips_range[1] + 1))
        starts = np.sort(base + rng.uniform(8.0, 20.5, n) * 3600.0)
        for s in starts:
            s = max(float(s), track.now + 900.0)
            if s > base + 21.5 * 3600.0:
                break
            if rng.random() < params.long_trip_prob:
                dist = rng.uniform(*params.long_trip_km)
            else:
                dist = rng.uniform(*params.trip_km)
            bearing = rng.uniform(0.0, 2.0 * math.pi)
            dest = _clip_point(*_destination(home[0], home[1], bearing, dist), city)
            track.idle_until(s)
            track.drive_to(*dest, speed)
            track.idle_for(rng.uniform(1200.0, 5400.0))
            end = track.drive_to(*home, speed)
            spans.append((s - 60.0, end + 60.0))
    return track, spans


def _bus_route(rng, city, params):
    if params.route is not None:
        return [tuple(p) for p in params.route]
    a = _rand_point(rng, city, margin=0.12)
    bearing = rng.uniform(0.0, 2.0 * math.pi)
    length = rng.uniform(*params.route_km)
    b = _clip_point(*_destination(a[0], a[1], bearing, length), city)
    route = [a]
    for i in range(1, params.route_stops + 1):
        f = i / (params.route_stops + 1)
        lat = a[0] + f * (b[0] - a[0])
        lon = a[1] + f * (b[1] - a[1])
        lateral = rng.normal(0.0, 250.0) / M_PER_DEG_LAT
        route.append(_clip_point(lat + lateral, lon, city))
    route.append(b)
    return route


def _simulate_bus(rng, city, params, days, period_s):
    speed = rng.uniform(*params.speed_kmh)
    route = _bus_route(rng, city, params)
    start_h, end_h = params.active_hours
    track = _Track(0.0 + start_h * 3600.0, *route[0])
    spans = []
    for day in range(days):
        t0 = day * 86400.0 + start_h * 3600.0 + rng.uniform(0.0, 600.0)
        t1 = day * 86400.0 + end_h * 3600.0
        spans.append((t0, t1))
        track.idle_until(t0)
        forward = True
        while track.now < t1:
            path = route if forward else route[::-1]
            for stop in path[1:]:
                track.drive_to(*stop, speed)
                if track.now >= t1:
                    break
                track.idle_for(params.stop_dwell_s)
            track.idle_for(rng.uniform(*params.layover_s))
            forward = not forward
        track.idle_until(t1)
    return track, spans


_SIMULATORS = {
    "taxi": _simulate_service,
    "ridesourcing": _simulate_service,
    "commuter": _simulate_commuter,
    "occasional": _simulate_occasional,
    "bus": _simulate_bus,
}


def simulate_vehicle(
    city: CityModel,
    params: ArchetypeParams,
    vehicle_id: str,
    days: int,
    sampling_period_s: float = 60.0,
    seed: int = 0,
) -> Trajectory:
    """One vehicle's trace; deterministic in (seed, vehicle_id, config)."""
    if params.archetype not in _SIMULATORS:
        raise ConfigError(f"unknown archetype {params.archetype!r}")
    rng = np.random.default_rng(seed)
    track, spans = _SIMULATORS[params.archetype](rng, city, params, days, sampling_period_s)
    t, lat, lon = _sample_track(track, spans, sampling_period_s, rng, city)
    return Trajectory.from_arrays(vehicle_id, lat, lon, t)


def simulate_fleet(
    city: CityModel,
    counts: dict,
    days: int = 7,
    sampling_period_s: float = 60.0,
    seed: int = 0,
    archetypes: dict = None,
):
    """Generate a labeled fleet.

    Returns (trajectories: list[Trajectory], truth: dict vehicle_id -> archetype).
    """
    if days < 1:
        raise ConfigError("need at least one day")
    archetypes = archetypes or DEFAULT_ARCHETYPES
    trajectories = []
    truth = {}
    for arch in ARCHETYPE_ORDER:
        n = int(counts.get(arch, 0))
        if n < 0:
            raise ConfigError(f"negative vehicle count for {arch}")
        params = archetypes.get(arch, DEFAULT_ARCHETYPES[arch])
        for i in range(n):
            vid = f"{arch}-{i:04d}"
            t = simulate_vehicle(
                city,
                params,
                vid,
                days,
                sampling_period_s,
                seed=derive_seed(seed, "vehicle", vid),
            )
            trajectories.append(t)
            truth[vid] = arch
    return trajectories, truth


def perturb(t: Trajectory, spec: NoiseSpec) -> Trajectory:
    """Resample to one point per X-minute window (keeping the earliest), then
    displace each retained point uniformly within a Y-meter disc."""
    if t.n_points == 0:
        return Trajectory.from_arrays(t.vehicle_id, [], [], [])
    window = np.floor(t.time / (spec.sample_interval_min * 60.0)).astype(np.int64)
    _, first = np.unique(window, return_index=True)
    lat, lon, time = t.lat[first], t.lon[first], t.time[first]
    if spec.jitter_radius_m > 0:
        rng = rng_for(spec.seed, "perturb", t.vehicle_id)
        radius_km = (spec.jitter_radius_m / 1000.0) * np.sqrt(rng.random(len(time)))
        bearing = rng.uniform(0.0, 2.0 * math.pi, len(time))
        lat, lon = _destination(lat, lon, bearing, radius_km)
    return Trajectory.from_arrays(t.vehicle_id, lat, lon, time)


def write_truth_csv(path, truth: dict) -> None:
    """Ground-truth CSV: vehicle_id,archetype (sorted by id)."""
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["vehicle_id", "archetype"])
        for vid in sorted(truth):
            writer.writerow([vid, truth[vid]])


def read_truth_csv(path) -> dict:
    import csv

    truth = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["vehicle_id", "archetype"]:
            raise ConfigError(f"unexpected truth CSV header: {header}")
        for row in reader:
            if len(row) != 2:
                raise ConfigError(f"malformed truth row: {row}")
            truth[row[0]] = row[1]
    return truth
