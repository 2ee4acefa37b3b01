"""Universal targeted attacks on anchor-free Siamese trackers."""

from .geometry import Box, CropSpec, GridGeometry, iou
from .perturb import PerturbationPair
from .tracker import ArchConfig, TinySiamTracker, build_reference_tracker

__all__ = [
    "Box", "CropSpec", "GridGeometry", "iou", "PerturbationPair",
    "ArchConfig", "TinySiamTracker", "build_reference_tracker",
]
__version__ = "0.1.0"
