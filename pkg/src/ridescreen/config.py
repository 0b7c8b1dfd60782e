"""Scenario configuration: key=value files, env overrides, config hashing.

A scenario fully determines an experiment: city and grid geometry, fleet
counts for both domains, the domain-shift strength, pipeline thresholds,
model hyperparameters, and the master seed. Every value can be overridden
by an environment variable named RIDESCREEN_<KEY> with dots replaced by
underscores (e.g. grid.rows -> RIDESCREEN_GRID_ROWS).
"""

import hashlib
import os
from dataclasses import dataclass

from . import cnn as cnn_mod
from . import forest as forest_mod
from .errors import ConfigError
from .features import FeatureConfig
from .simulate import CityModel, NoiseSpec
from .traj import GridSpec

ENV_PREFIX = "RIDESCREEN_"

# Defaults are the "standard fixture": the desk-scale experiment used by
# the acceptance suite and the example scripts.
DEFAULTS = {
    "seed": "20240501",
    "days": "7",
    "sampling_period_s": "120",
    "tz_offset_hours": "0",
    "gap_cap_s": "1800",
    "grid.rows": "24",
    "grid.cols": "24",
    "city.lat_min": "31.0",
    "city.lat_max": "31.25",
    "city.lon_min": "121.3",
    "city.lon_max": "121.6",
    "city.hotspots": "12",
    "city.road_noise_m": "30",
    "source.taxi": "300",
    "source.bus": "200",
    "source.shift_strength": "0.5",
    "source.noise_interval_min": "0",
    "source.noise_radius_m": "0",
    "target.ridesourcing": "150",
    "target.commuter": "200",
    "target.occasional": "150",
    "pipeline.delta": "0.9",
    "pipeline.max_iterations": "50",
    "forest.trees": "100",
    "forest.max_depth": "12",
    "forest.min_leaf": "2",
    "cnn.conv1": "8",
    "cnn.conv2": "16",
    "cnn.hidden": "64",
    "cnn.learning_rate": "0.01",
    "cnn.momentum": "0.9",
    "cnn.batch_size": "32",
    "cnn.epochs": "30",
    "cnn.patience": "5",
    "image.threshold_s": "3600",
    "image.days": "7",
    "eval.holdout_fraction": "0.3",
    "eval.top_k": "5,10",
    "features.rush_morning": "7,10",
    "features.rush_evening": "17,20",
    "io.write_traces": "1",
}

_INT_KEYS = {
    "seed",
    "days",
    "grid.rows",
    "grid.cols",
    "city.hotspots",
    "source.taxi",
    "source.bus",
    "target.ridesourcing",
    "target.commuter",
    "target.occasional",
    "pipeline.max_iterations",
    "forest.trees",
    "forest.max_depth",
    "forest.min_leaf",
    "cnn.conv1",
    "cnn.conv2",
    "cnn.hidden",
    "cnn.batch_size",
    "cnn.epochs",
    "cnn.patience",
    "image.days",
    "io.write_traces",
}
_FLOAT_KEYS = {
    "sampling_period_s",
    "tz_offset_hours",
    "gap_cap_s",
    "city.lat_min",
    "city.lat_max",
    "city.lon_min",
    "city.lon_max",
    "city.road_noise_m",
    "source.shift_strength",
    "source.noise_interval_min",
    "source.noise_radius_m",
    "pipeline.delta",
    "cnn.learning_rate",
    "cnn.momentum",
    "image.threshold_s",
    "eval.holdout_fraction",
}
_LIST_KEYS = {"eval.top_k", "features.rush_morning", "features.rush_evening"}


def _env_name(key: str) -> str:
    return ENV_PREFIX + key.upper().replace(".", "_")


def _parse_value(key: str, raw: str):
    try:
        if key in _INT_KEYS:
            return int(raw)
        if key in _FLOAT_KEYS:
            return float(raw)
        if key in _LIST_KEYS:
            return tuple(float(v) for v in raw.split(",") if v.strip() != "")
    except ValueError as exc:
        raise ConfigError(f"cannot parse config key {key}={raw!r}: {exc}") from None
    raise ConfigError(f"unknown config key {key!r}")


def _canonical(key: str, value) -> str:
    if key in _INT_KEYS:
        return str(int(value))
    if key in _FLOAT_KEYS:
        return repr(float(value))
    return ",".join(repr(float(v)) for v in value)


def read_config_file(path) -> dict:
    """Parse a key=value scenario file ('#' starts a comment)."""
    values = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            if "=" not in text:
                raise ConfigError(f"{path}:{lineno}: expected key = value")
            key, _, raw = text.partition("=")
            key = key.strip()
            raw = raw.strip()
            if key not in DEFAULTS:
                raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
            values[key] = raw
    return values


@dataclass
class Scenario:
    """Resolved, typed view of a scenario plus its canonical flat form."""

    values: dict  # key -> parsed value
    flat: dict  # key -> canonical string

    def __getitem__(self, key):
        return self.values[key]

    @property
    def seed(self) -> int:
        return self.values["seed"]

    @property
    def hash(self) -> str:
        text = "\n".join(f"{k}={self.flat[k]}" for k in sorted(self.flat))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()

    def grid(self) -> GridSpec:
        return GridSpec(
            lat_min=self.values["city.lat_min"],
            lat_max=self.values["city.lat_max"],
            lon_min=self.values["city.lon_min"],
            lon_max=self.values["city.lon_max"],
            rows=self.values["grid.rows"],
            cols=self.values["grid.cols"],
        )

    def city(self, seed=None) -> CityModel:
        return CityModel.generate(
            bounds=(
                self.values["city.lat_min"],
                self.values["city.lat_max"],
                self.values["city.lon_min"],
                self.values["city.lon_max"],
            ),
            n_hotspots=self.values["city.hotspots"],
            road_noise_m=self.values["city.road_noise_m"],
            seed=self.seed if seed is None else seed,
        )

    def feature_config(self) -> FeatureConfig:
        return FeatureConfig(
            tz_offset_hours=self.values["tz_offset_hours"],
            gap_cap_s=self.values["gap_cap_s"],
            rush_morning=tuple(self.values["features.rush_morning"]),
            rush_evening=tuple(self.values["features.rush_evening"]),
        )

    def forest_params(self) -> forest_mod.ForestParams:
        return forest_mod.ForestParams(
            n_trees=self.values["forest.trees"],
            max_depth=self.values["forest.max_depth"],
            min_leaf=self.values["forest.min_leaf"],
        )

    def cnn_specs(self):
        common = dict(
            input_rows=self.values["grid.rows"],
            input_cols=self.values["grid.cols"],
            conv1_filters=self.values["cnn.conv1"],
            conv2_filters=self.values["cnn.conv2"],
            hidden_units=self.values["cnn.hidden"],
        )
        day = cnn_mod.CnnSpec(input_channels=1, **common)
        car = cnn_mod.CnnSpec(input_channels=self.values["image.days"], **common)
        return day, car

    def train_config(self, seed: int = 0) -> cnn_mod.TrainConfig:
        return cnn_mod.TrainConfig(
            learning_rate=self.values["cnn.learning_rate"],
            momentum=self.values["cnn.momentum"],
            batch_size=self.values["cnn.batch_size"],
            epochs=self.values["cnn.epochs"],
            patience=self.values["cnn.patience"],
            seed=seed,
        )

    def source_counts(self) -> dict:
        return {"taxi": self.values["source.taxi"], "bus": self.values["source.bus"]}

    def target_counts(self) -> dict:
        return {
            "ridesourcing": self.values["target.ridesourcing"],
            "commuter": self.values["target.commuter"],
            "occasional": self.values["target.occasional"],
        }

    def source_noise(self) -> NoiseSpec:
        """NoiseSpec for the source perturbation, or None when disabled."""
        interval = self.values["source.noise_interval_min"]
        if interval <= 0:
            return None
        return NoiseSpec(
            sample_interval_min=interval,
            jitter_radius_m=self.values["source.noise_radius_m"],
            seed=self.seed,
        )


def load_scenario(path=None, env=None, overrides=None) -> Scenario:
    """Resolve a scenario: defaults < file < environment < explicit overrides."""
    env = os.environ if env is None else env
    raw = dict(DEFAULTS)
    if path is not None:
        raw.update(read_config_file(path))
    for key in DEFAULTS:
        env_value = env.get(_env_name(key))
        if env_value is not None:
            raw[key] = env_value
    for key, value in (overrides or {}).items():
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        raw[key] = str(value)
    values = {k: _parse_value(k, v) for k, v in raw.items()}
    flat = {k: _canonical(k, values[k]) for k in values}
    _validate(values)
    return Scenario(values=values, flat=flat)


def _validate(values) -> None:
    if values["days"] < 1:
        raise ConfigError("days must be at least 1")
    if values["sampling_period_s"] <= 0:
        raise ConfigError("sampling period must be positive")
    if not 0.5 < values["pipeline.delta"] <= 1.0:
        raise ConfigError("pipeline.delta must be in (0.5, 1]")
    if not 0.0 <= values["source.shift_strength"] <= 1.0:
        raise ConfigError("source.shift_strength must be in [0, 1]")
    if not 0.0 < values["eval.holdout_fraction"] < 1.0:
        raise ConfigError("eval.holdout_fraction must be in (0, 1)")
    if values["image.days"] < values["days"]:
        raise ConfigError("image.days must cover the simulated day span")
    for k in values["eval.top_k"]:
        if not 0.0 < k <= 100.0:
            raise ConfigError("eval.top_k entries must be in (0, 100]")


def write_scenario(path, scenario: Scenario) -> None:
    """Write the canonical resolved scenario file."""
    with open(path, "w") as fh:
        for key in sorted(scenario.flat):
            fh.write(f"{key} = {scenario.flat[key]}\n")
