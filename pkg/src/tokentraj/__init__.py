"""Autoregressive multi-modal trajectory forecasting with ego-centric scene tokens."""

from .estimator import TrajectoryForecaster
from .geometry import Pose2D, RelativeTransform
from .scene import AgentTrack, MapPolyline, SceneSample, generate_scene, load_scenes, save_scenes

__all__ = [
    "AgentTrack",
    "MapPolyline",
    "Pose2D",
    "RelativeTransform",
    "SceneSample",
    "TrajectoryForecaster",
    "generate_scene",
    "load_scenes",
    "save_scenes",
]

__version__ = "0.1.0"
