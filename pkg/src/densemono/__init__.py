"""Monocular dense SLAM fusing predicted depth with direct tracking and small-baseline stereo."""
from .config import PipelineConfig, load_config
from .errors import SlamError
from .geometry import CameraIntrinsics, RigidPose

__version__ = "0.1.0"

__all__ = ["CameraIntrinsics", "PipelineConfig", "RigidPose", "SlamError", "load_config", "__version__"]
