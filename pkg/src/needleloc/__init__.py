"""Needle localisation from tip/handle keypoints on CT volumes.

Synthetic phantoms, simulated keypoint detections, a greedy tip-handle
matcher with duplicate merging, and evaluation metrics.
"""

from .detection import DetectionNoise, HeatmapGeometry, simulate_detections
from .keypoints import Detection2D, DetectionSet3D, Endpoint3D
from .matcher import MatchConstraints, MatchSolution, brute_force_exact, solve_gmm
from .metrics import eval_2d, eval_3d
from .phantom import GroundTruth, SceneSpec, generate_scene, rasterize
from .volume import VoxelVolume

__version__ = "0.1.0"

__all__ = [
    "Detection2D",
    "DetectionNoise",
    "DetectionSet3D",
    "Endpoint3D",
    "GroundTruth",
    "HeatmapGeometry",
    "MatchConstraints",
    "MatchSolution",
    "SceneSpec",
    "VoxelVolume",
    "brute_force_exact",
    "eval_2d",
    "eval_3d",
    "generate_scene",
    "rasterize",
    "simulate_detections",
    "solve_gmm",
]
