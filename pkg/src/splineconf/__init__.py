"""Neural spline conditional densities with split-conformal prediction sets."""

from .conformal import CalibrationResult, PredictionSet, calibrate
from .data import DatasetBundle, preprocess, synthetic_bimodal
from .model import HistModel, SplineModel, TrainConfig, train
from .spline import IntervalUnion, SplineDensity, build_density

__version__ = "0.1.0"

__all__ = [
    "CalibrationResult",
    "DatasetBundle",
    "HistModel",
    "IntervalUnion",
    "PredictionSet",
    "SplineDensity",
    "SplineModel",
    "TrainConfig",
    "build_density",
    "calibrate",
    "preprocess",
    "synthetic_bimodal",
    "train",
]
