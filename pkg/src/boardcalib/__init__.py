"""Automatic target-based LiDAR-camera extrinsic calibration with a ground-truthed simulator."""

from .camera import BoardModel, CameraDetection, FramePair
from .cloud import PointCloud, RangeImageGeometry
from .errors import CalibrationError
from .geom import PinholeCamera, RigidTransform
from .optimize import CalibrationResult, OptimizerSettings
from .pipeline import PipelineConfig, calibrate
from .search import SearchConfig

__version__ = "0.1.0"

__all__ = [
    "BoardModel",
    "CalibrationError",
    "CalibrationResult",
    "CameraDetection",
    "FramePair",
    "OptimizerSettings",
    "PinholeCamera",
    "PipelineConfig",
    "PointCloud",
    "RangeImageGeometry",
    "RigidTransform",
    "SearchConfig",
    "calibrate",
]
