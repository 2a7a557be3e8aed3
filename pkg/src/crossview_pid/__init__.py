"""Cross-view 3-DoF pose refinement with P/I/D branch features."""

from .geometry import GroundIntrinsics, PointCloud, Pose, SatelliteIntrinsics
from .pid import CandidateSpec, PidCoefficients
from .refine import ModelConfig, RefinementNetwork
from .scenegen import Dataset, WorldSpec, generate_dataset, load_dataset, save_dataset

__version__ = "0.1.0"

__all__ = [
    "CandidateSpec",
    "Dataset",
    "GroundIntrinsics",
    "ModelConfig",
    "PidCoefficients",
    "PointCloud",
    "Pose",
    "RefinementNetwork",
    "SatelliteIntrinsics",
    "WorldSpec",
    "generate_dataset",
    "load_dataset",
    "save_dataset",
]
