"""Semantic feature fields for transferring a demonstrated grasp to a new scene."""

from ._accel import backend, set_backend
from .effector import EffectorSpec, EffectorState, load_bundled_hand
from .field import FeatureField
from .geometry import CameraIntrinsics, PointCloud, RigidTransform, SpatialIndex
from .optimizer import EnergyConfig, optimize_pose
from .pruner import PruneConfig, count_votes, prune_cloud
from .refiner import TrainConfig, refine, train_refiner
from .scan_io import FeaturedCloud, ScanBundle

__version__ = "0.1.0"

__all__ = [
    "CameraIntrinsics", "EffectorSpec", "EffectorState", "EnergyConfig", "FeatureField", "FeaturedCloud",
    "PointCloud", "PruneConfig", "RigidTransform", "ScanBundle", "SpatialIndex", "TrainConfig",
    "backend", "count_votes", "load_bundled_hand", "optimize_pose", "prune_cloud", "refine",
    "set_backend", "train_refiner",
]
