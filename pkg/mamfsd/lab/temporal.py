"""
MAM-FSD Temporal Head
1D convolution + pooling, a bidirectional LSTM and per-step gloss classifiers
"""

from dataclasses import dataclass
from typing import List

import numpy as np

from .base import LabModule, ShapeError
from .config import TemporalConfig
from .layers import LinearLayer, TemporalConvLayer, kaiming_uniform, orthogonal, param_rng
from .tensor import (Tensor, add, concat, flip, index, linear, log_softmax, max_pool_1d, mul,
                     parameter, permute, relu, reshape, sigmoid, slice_axis, stack, tanh)

MIN_FRAMES = 4


def output_steps(frames: int) -> int:
    """T' = floor(floor(T / 2) / 2)."""
    return (frames // 2) // 2


# ============================================================================
# LSTM
# ============================================================================

class LSTMDirection(LabModule):
    """
    One LSTM direction, gate order (input, forget, cell, output).

    gates_t = W_ih x_t + b + W_hh h_{t-1}
    c_t = f * c_{t-1} + i * g,  h_t = o * tanh(c_t),  h_0 = c_0 = 0
    """

    DISPLAY_NAME = "LSTM"

    def __init__(self, d_in: int, hidden: int, seed: int = 0, key: str = "lstm.fwd"):
        super().__init__()
        self.hidden = hidden
        rng = param_rng(seed, key)
        w_hh = np.concatenate([orthogonal(hidden, hidden, rng) for _ in range(4)], axis=0)
        bias = np.zeros(4 * hidden)
        bias[hidden:2 * hidden] = 1.0
        self.w_ih = self.register("w_ih", parameter(kaiming_uniform((4 * hidden, d_in), d_in, rng)))
        self.w_hh = self.register("w_hh", parameter(w_hh))
        self.b = self.register("b", parameter(bias))

    def __call__(self, x: Tensor) -> Tensor:
        """x: [T, D] -> hidden states [T, H]."""
        hd = self.hidden
        projected = linear(x, self.w_ih, self.b)
        h = Tensor(np.zeros(hd))
        c = Tensor(np.zeros(hd))
        outputs: List[Tensor] = []
        for t in range(x.shape[0]):
            gates = add(index(projected, t), linear(h, self.w_hh))
            i = sigmoid(slice_axis(gates, 0, 0, hd))
            f = sigmoid(slice_axis(gates, 0, hd, 2 * hd))
            g = tanh(slice_axis(gates, 0, 2 * hd, 3 * hd))
            o = sigmoid(slice_axis(gates, 0, 3 * hd, 4 * hd))
            c = add(mul(f, c), mul(i, g))
            h = mul(o, tanh(c))
            outputs.append(h)
        return stack(outputs)


class BiLSTM(LabModule):
    """Forward and time-reversed LSTMs, outputs concatenated [T, 2H]."""

    DISPLAY_NAME = "BiLSTM"

    def __init__(self, d_in: int, hidden: int, seed: int = 0, key: str = "lstm"):
        super().__init__()
        self.fwd = self.mount("fwd", LSTMDirection(d_in, hidden, seed, f"{key}.fwd"))
        self.bwd = self.mount("bwd", LSTMDirection(d_in, hidden, seed, f"{key}.bwd"))

    def __call__(self, x: Tensor) -> Tensor:
        return concat([self.fwd(x), flip(self.bwd(flip(x)))], axis=-1)


# ============================================================================
# TEMPORAL HEAD
# ============================================================================

@dataclass
class TemporalOutput:
    logprobs: Tensor        # [T', V + 1], blank at index 0
    aux_logprobs: Tensor    # [T', V + 1] from the 1D-conv features
    conv_out: Tensor        # [T', D']


class TemporalHead(LabModule):
    """
    f_spatial [T, D] -> (conv K5 + ReLU -> maxpool 2) x 2 -> BiLSTM -> affine -> log_softmax.
    """

    DISPLAY_NAME = "Temporal Head"

    def __init__(self, feature_dim: int, vocab_size: int, config: TemporalConfig, seed: int = 0):
        super().__init__()
        self.feature_dim = feature_dim
        self.vocab_size = vocab_size
        width = config.conv_channels
        self.tconvs = [
            self.mount("tconv1", TemporalConvLayer(feature_dim, width, config.conv_kernel, seed=seed, key="tconv1")),
            self.mount("tconv2", TemporalConvLayer(width, width, config.conv_kernel, seed=seed, key="tconv2")),
        ]
        self.lstm = self.mount("lstm", BiLSTM(width, config.hidden, seed, "lstm"))
        self.cls = self.mount("cls", LinearLayer(2 * config.hidden, vocab_size + 1, seed, "cls"))
        self.auxcls = self.mount("auxcls", LinearLayer(width, vocab_size + 1, seed, "auxcls"))

    def conv_forward(self, f_spatial: Tensor) -> Tensor:
        if f_spatial.data.ndim != 2:
            raise ShapeError(f"frame features must be [T, D], got {list(f_spatial.shape)}")
        frames, dim = f_spatial.shape
        if frames < MIN_FRAMES:
            raise ShapeError(f"temporal head needs at least {MIN_FRAMES} frames, got {frames}")
        if dim != self.feature_dim:
            raise ShapeError(f"frame features have D={dim}, head expects {self.feature_dim}")
        x = f_spatial
        for conv in self.tconvs:
            steps, channels = x.shape
            # [T, D] -> [D, T, 1, 1] so the N x 1 x 1 kernel runs along time
            y = relu(conv(reshape(permute(x, (1, 0)), (channels, steps, 1, 1))))
            y = permute(reshape(y, (y.shape[0], steps)), (1, 0))
            x = max_pool_1d(y)
        return x

    def aux_logits(self, conv_out: Tensor) -> Tensor:
        """Auxiliary per-step log-probabilities straight from the conv features."""
        return log_softmax(self.auxcls(conv_out), axis=-1)

    def __call__(self, f_spatial: Tensor) -> TemporalOutput:
        conv_out = self.conv_forward(f_spatial)
        logprobs = log_softmax(self.cls(self.lstm(conv_out)), axis=-1)
        return TemporalOutput(logprobs=logprobs, aux_logprobs=self.aux_logits(conv_out), conv_out=conv_out)


def temporal_forward(f_spatial: Tensor, head: TemporalHead) -> Tensor:
    return head(f_spatial).logprobs


def aux_logits(conv_out: Tensor, head: TemporalHead) -> Tensor:
    return head.aux_logits(conv_out)
