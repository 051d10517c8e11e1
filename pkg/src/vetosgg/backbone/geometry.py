"""Trainable geometric feature extractor applied to the depth stand-in."""
from __future__ import annotations

import math

import numpy as np

from ..nn import Module, Parameter
from ..tensor import Tensor, conv2d, relu


class GeometricFeatureExtractor(Module):
    """Pointwise conv to ``out_channels``, ReLU, then a same-padded 3x3 conv.

    Maps ``[B, in_channels, h, w]`` to ``[B, out_channels, h, w]``.
    """

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator):
        self.pointwise_weight = Parameter(rng.normal(0.0, 1.0 / math.sqrt(in_channels),
                                                     size=(out_channels, in_channels, 1, 1)))
        self.pointwise_bias = Parameter(np.zeros(out_channels))
        self.spatial_weight = Parameter(rng.normal(0.0, 1.0 / math.sqrt(9 * out_channels),
                                                   size=(out_channels, out_channels, 3, 3)))
        self.spatial_bias = Parameter(np.zeros(out_channels))

    def __call__(self, depth: Tensor) -> Tensor:
        hidden = relu(conv2d(depth, self.pointwise_weight, self.pointwise_bias, padding=0))
        return conv2d(hidden, self.spatial_weight, self.spatial_bias, padding=1)
