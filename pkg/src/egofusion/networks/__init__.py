"""Depth and pose networks."""
from .depth import DepthNet, DepthNetConfig, depth_forward, sigmoid_to_inv_depth
from .layers import BatchNorm2d, BatchNormState, Conv2d, Linear, Module
from .model import EgoMotionModel
from .pose import (
    FusionStrategy,
    PoseNet,
    PoseNetConfig,
    PoseRegressor,
    channel_exchange,
    exchange_masks,
    exchangeable_indices,
    late_combine,
    pose_forward,
    regressor_forward,
    soft_fusion,
)

__all__ = [
    "BatchNorm2d", "BatchNormState", "Conv2d", "DepthNet", "DepthNetConfig",
    "EgoMotionModel", "FusionStrategy", "Linear", "Module", "PoseNet",
    "PoseNetConfig", "PoseRegressor", "channel_exchange", "depth_forward",
    "exchange_masks", "exchangeable_indices", "late_combine", "pose_forward",
    "regressor_forward", "sigmoid_to_inv_depth", "soft_fusion",
]
