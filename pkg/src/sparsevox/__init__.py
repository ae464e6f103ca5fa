"""sparsevox: sparse-voxel multi-modal 3D object detection on synthetic
LiDAR + camera scenes, trained end to end on a minimal autodiff engine."""

__version__ = "0.1.0"

from .boxes import Box3D, DetectionSet
from .config import RunConfig, ablation_config, desk_config, full_config
from .detector import SparseVoxDetector
from .geometry import CameraModel, ImageFeatureMap
from .metrics import EvalConfig
from .model import DetectionModel
from .scenegen import Scene, SceneSpec, gen_scene, make_camera_only_classes
from .voxels import GridConfig, PointRecord, SparseVoxelSet

__all__ = [
    "__version__", "Box3D", "DetectionSet", "RunConfig", "desk_config",
    "ablation_config", "full_config", "SparseVoxDetector", "CameraModel",
    "ImageFeatureMap", "EvalConfig", "DetectionModel", "Scene", "SceneSpec",
    "gen_scene", "make_camera_only_classes", "GridConfig", "PointRecord",
    "SparseVoxelSet",
]
