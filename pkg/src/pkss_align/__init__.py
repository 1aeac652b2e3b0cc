"""Similarity registration of point clouds by exhaustive search over a
pre-shape space with spherical-partition correspondences."""

from .evalgen import Metrics, NoiseSpec, PerturbationRecord, gt_cosine, registration_recall
from .geometry import PointCloud, SimilarityTransform, apply_transform
from .io import load_cloud, save_cloud
from .pipeline import RegistrationReport, RunConfig, register
from .search import RegistrationFailed

__all__ = [
    "Metrics",
    "NoiseSpec",
    "PerturbationRecord",
    "PointCloud",
    "RegistrationFailed",
    "RegistrationReport",
    "RunConfig",
    "SimilarityTransform",
    "apply_transform",
    "gt_cosine",
    "load_cloud",
    "register",
    "registration_recall",
    "save_cloud",
]
__version__ = "0.1.0"
