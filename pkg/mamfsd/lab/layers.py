"""
MAM-FSD Layers
Parameterized convolution / affine blocks and their initializers
"""

import math
from typing import Tuple

import numpy as np

from .base import LabModule, derive_rng, name_hash
from .tensor import Tensor, conv2d, conv3d_temporal, linear, parameter

# ============================================================================
# INITIALIZATION
# ============================================================================

def param_rng(seed: int, key: str) -> np.random.Generator:
    """Generator addressed by (seed, parameter path); independent of build order."""
    return derive_rng(seed, name_hash(key) & 0x7FFFFFFF)


def kaiming_uniform(shape: Tuple[int, ...], fan_in: int, rng: np.random.Generator) -> np.ndarray:
    """U(-b, b) with b = sqrt(6 / fan_in), the ReLU-gain fan-in scheme."""
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def orthogonal(rows: int, cols: int, rng: np.random.Generator) -> np.ndarray:
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    return q if rows >= cols else q.T


# ============================================================================
# LAYERS
# ============================================================================

class Conv2dLayer(LabModule):
    """k x k cross-correlation over frames [N, C_in, H, W] or a single frame."""

    DISPLAY_NAME = "Conv2d"

    def __init__(self, c_in: int, c_out: int, kernel: int, stride: int = 1, pad: int = 0,
                 seed: int = 0, key: str = "conv"):
        super().__init__()
        self.stride, self.pad = stride, pad
        rng = param_rng(seed, key)
        fan_in = c_in * kernel * kernel
        self.w = self.register("w", parameter(kaiming_uniform((c_out, c_in, kernel, kernel), fan_in, rng)))
        self.b = self.register("b", parameter(np.zeros(c_out)))

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.w, self.b, stride=self.stride, pad=self.pad)


class TemporalConvLayer(LabModule):
    """N x 1 x 1 convolution over [C, T, H, W] (full cross-channel, or depthwise)."""

    DISPLAY_NAME = "Conv3d N x 1 x 1"

    def __init__(self, c_in: int, c_out: int, kernel: int, depthwise: bool = False,
                 seed: int = 0, key: str = "tconv"):
        super().__init__()
        self.depthwise = depthwise
        rng = param_rng(seed, key)
        shape = (c_out, 1, kernel) if depthwise else (c_out, c_in, kernel)
        fan_in = kernel if depthwise else c_in * kernel
        self.w = self.register("w", parameter(kaiming_uniform(shape, fan_in, rng)))
        self.b = self.register("b", parameter(np.zeros(c_out)))

    def __call__(self, x: Tensor) -> Tensor:
        return conv3d_temporal(x, self.w, self.b, depthwise=self.depthwise)


class LinearLayer(LabModule):
    DISPLAY_NAME = "Linear"

    def __init__(self, d_in: int, d_out: int, seed: int = 0, key: str = "linear"):
        super().__init__()
        rng = param_rng(seed, key)
        self.w = self.register("w", parameter(kaiming_uniform((d_out, d_in), d_in, rng)))
        self.b = self.register("b", parameter(np.zeros(d_out)))

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.w, self.b)
