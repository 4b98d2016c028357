"""Multi-task LiDAR perception on sparse voxels: semantic segmentation,
3D detection and panoptic segmentation from one network."""

from voxmt.config import PROFILES, PipelineConfig, load_config
from voxmt.errors import ConfigError, InputError, InternalError, VoxmtError
from voxmt.pipeline import GroundTruth, Pipeline, PipelineResult, run_pipeline
from voxmt.voxelizer import PointCloud
from voxmt.weights import WeightStore

__all__ = [
    "PROFILES",
    "ConfigError",
    "GroundTruth",
    "InputError",
    "InternalError",
    "Pipeline",
    "PipelineConfig",
    "PipelineResult",
    "PointCloud",
    "VoxmtError",
    "WeightStore",
    "load_config",
    "run_pipeline",
]
