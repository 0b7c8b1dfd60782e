"""Ridesourcing-car detection from GPS trajectories.

Two-stage transfer learning: a random forest over shared trajectory
features is trained on taxi/bus source data and seeds high-confidence
labels among unlabeled candidate cars; a co-training loop then refines the
forest together with day- and car-level convolutional networks over
stay-time trajectory images. A synthetic fleet simulator makes the whole
pipeline testable without private fleet data.
"""

__version__ = "0.1.0"

from .errors import (
    ConfigError,
    CotrainStalled,
    DataError,
    DegenerateLabels,
    MissingData,
    OutOfBounds,
    RidescreenError,
    ShapeError,
    TrainingDiverged,
)
from .traj import DaySegment, GridSpec, TracePoint, Trajectory

__all__ = [
    "__version__",
    "ConfigError",
    "CotrainStalled",
    "DataError",
    "DaySegment",
    "DegenerateLabels",
    "GridSpec",
    "MissingData",
    "OutOfBounds",
    "RidescreenError",
    "ShapeError",
    "TracePoint",
    "TrainingDiverged",
    "Trajectory",
]
