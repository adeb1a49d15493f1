"""Segmentation training with point-to-set distance penalties on network outputs."""
from . import _backend
from .distance import DistancePenalty, distance_grad, distance_sq
from .losses import BoundingBox, SizeSumPenalty, SupervisionMask, bbox_to_supervision, masked_cross_entropy
from .network import ParamStack, backward, forward, init_params, load_checkpoint, save_checkpoint
from .projections import (
    Cardinality,
    FractionBounds,
    Intersection,
    L1Ball,
    MaxRank,
    fraction_bounds_to_cardinality,
    project,
    project_cardinality,
    project_intersection,
    project_l1_ball,
    project_rank,
)
from .synth import argmax_segmentation, corrupt, gen_disc_scene, iou, iou_all
from .tensor import KernelBank, NumericError, ShapeError
from .trainer import DivergenceError, TrainConfig, TrainResult, train

__version__ = "0.1.0"


def backend_name() -> str:
    """Active correlation kernel backend, ``"cython"`` or ``"python"``."""
    return _backend.NAME


__all__ = [
    "BoundingBox",
    "Cardinality",
    "DistancePenalty",
    "DivergenceError",
    "FractionBounds",
    "Intersection",
    "KernelBank",
    "L1Ball",
    "MaxRank",
    "NumericError",
    "ParamStack",
    "ShapeError",
    "SizeSumPenalty",
    "SupervisionMask",
    "TrainConfig",
    "TrainResult",
    "argmax_segmentation",
    "backend_name",
    "backward",
    "bbox_to_supervision",
    "corrupt",
    "distance_grad",
    "distance_sq",
    "forward",
    "fraction_bounds_to_cardinality",
    "gen_disc_scene",
    "init_params",
    "iou",
    "iou_all",
    "load_checkpoint",
    "masked_cross_entropy",
    "project",
    "project_cardinality",
    "project_intersection",
    "project_l1_ball",
    "project_rank",
    "save_checkpoint",
    "train",
]
