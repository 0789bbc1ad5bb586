"""Boundary-aware salient object segmentation toolkit.

Builds a miniature pyramid segmentation network on a from-scratch
reverse-mode autodiff core, trains it with a boundary-weighted cross
entropy and an optional global-contrast attention chain, and evaluates
saliency maps with thresholded precision/recall, max F-beta and MAE.
"""

from .attention import AttentionConfig, HgamState, global_contrast_attention, guide, hgam_step
from .estimator import ContourSaliency
from .loss import LossWeights, PredictionSet, bce, combined_loss, contour_loss
from .metrics import EvalReport, MetricsConfig, boundary_mae, evaluate, mae, max_fbeta, pr_curve
from .model import ModelConfig, SaliencyNet, load_checkpoint, save_checkpoint
from .morphology import WeightMapConfig, contour_weight_map, dilate, erode, gaussian_blur
from .tensor import (
    Graph,
    LayerParams,
    Tensor,
    avgpool2d,
    backward,
    concat_channels,
    conv2d,
    maxpool2d,
    relu,
    sigmoid,
    upsample_bilinear,
)
from .trainer import TrainConfig, TrainResult, sgd_step, train

__version__ = "0.1.0"

__all__ = [
    "AttentionConfig",
    "ContourSaliency",
    "EvalReport",
    "Graph",
    "HgamState",
    "LayerParams",
    "LossWeights",
    "MetricsConfig",
    "ModelConfig",
    "PredictionSet",
    "SaliencyNet",
    "Tensor",
    "TrainConfig",
    "TrainResult",
    "WeightMapConfig",
    "avgpool2d",
    "backward",
    "bce",
    "boundary_mae",
    "combined_loss",
    "concat_channels",
    "contour_loss",
    "contour_weight_map",
    "conv2d",
    "dilate",
    "erode",
    "evaluate",
    "gaussian_blur",
    "global_contrast_attention",
    "guide",
    "hgam_step",
    "load_checkpoint",
    "mae",
    "max_fbeta",
    "maxpool2d",
    "pr_curve",
    "relu",
    "save_checkpoint",
    "sgd_step",
    "sigmoid",
    "train",
    "upsample_bilinear",
    "__version__",
]
