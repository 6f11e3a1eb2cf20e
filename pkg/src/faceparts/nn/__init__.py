"""Minimal trainable layer stack: exactly the vocabulary the model needs.

NCHW tensors, float64 by default (float32 optional for speed); every layer
implements an analytic backward pass that is validated against central
finite differences.  No autograd: the model wires backward passes by hand.
"""

from .adam import AdamState, adam_step
from .gradcheck import GradCheckReport, gradient_check
from .layers import (
    BatchNorm,
    Conv3x3,
    Dense,
    Dropout,
    GlobalAvgPool,
    MaxPool3x3s2,
    ReLU,
    Sigmoid,
    weighted_bce,
)
from .network import LayerSpec, Network, NetworkSpec

__all__ = [
    "AdamState",
    "adam_step",
    "GradCheckReport",
    "gradient_check",
    "BatchNorm",
    "Conv3x3",
    "Dense",
    "Dropout",
    "GlobalAvgPool",
    "MaxPool3x3s2",
    "ReLU",
    "Sigmoid",
    "weighted_bce",
    "LayerSpec",
    "Network",
    "NetworkSpec",
]
