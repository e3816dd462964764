"""Deterministic federated-learning simulator for multi-class volumetric segmentation."""

__version__ = "0.1.0"

from .metrics import DscReport, dsc, evaluate_case, mirrored_dice_loss
from .phantom import PhantomVolume, RegionMasks, SiteProfile, generate_case, split_site
from .tensors import ParamVector, l1_norm, weighted_mean

__all__ = [
    "__version__",
    "DscReport",
    "dsc",
    "evaluate_case",
    "mirrored_dice_loss",
    "PhantomVolume",
    "RegionMasks",
    "SiteProfile",
    "generate_case",
    "split_site",
    "ParamVector",
    "l1_norm",
    "weighted_mean",
]
