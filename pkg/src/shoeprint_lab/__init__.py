"""Shoeprint age and gender estimation: a numpy CNN stack, imaging analytics and a synthetic cohort."""

from .estimators import (
    RegionPressureFeatures,
    ShoeNetGenderClassifier,
    ShoeNetRegressor,
    ShoeprintSegmenter,
)
from .zoo import ARCHS, ArchConfig, build

__all__ = [
    "ARCHS",
    "ArchConfig",
    "RegionPressureFeatures",
    "ShoeNetGenderClassifier",
    "ShoeNetRegressor",
    "ShoeprintSegmenter",
    "build",
]
__version__ = "0.1.0"
