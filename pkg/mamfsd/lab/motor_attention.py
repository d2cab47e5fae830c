"""
MAM-FSD Motor Attention
Temporal-only convolution stack producing a (0, 1) intensity map that gates its input
"""

from typing import List

from .base import ConfigError, LabModule, ShapeError
from .layers import TemporalConvLayer
from .tensor import Tensor, mul, relu, sigmoid


class MamBlock(LabModule):
    """
    Motor attention block.

    L temporal convolutions with an N x 1 x 1 kernel: layers 1..L-1 map to C'
    channels followed by ReLU, layer L restores C channels followed by the
    logistic sigmoid. The resulting map multiplies the input elementwise.
    There is no normalization anywhere in the block.

    Input and output are arranged [C, T, H, W].
    """

    DISPLAY_NAME = "Motor Attention Block"

    def __init__(self, channels: int, layers: int = 4, kernel: int = 3, hidden_channels: int = 0,
                 depthwise: bool = False, seed: int = 0, key: str = "mam1"):
        super().__init__()
        if layers < 1:
            raise ConfigError("a motor attention block needs at least one layer")
        if kernel % 2 == 0:
            raise ConfigError(f"temporal kernel must be odd, got {kernel}")
        hidden = hidden_channels or channels
        if depthwise and hidden != channels:
            raise ConfigError("depthwise motor attention keeps C' = C")
        self.channels = channels
        self.kernel = kernel
        self.convs: List[TemporalConvLayer] = []
        for layer in range(1, layers + 1):
            c_in = channels if layer == 1 else hidden
            c_out = channels if layer == layers else hidden
            conv = TemporalConvLayer(c_in, c_out, kernel, depthwise=depthwise, seed=seed,
                                     key=f"{key}.conv{layer}")
            self.convs.append(self.mount(f"conv{layer}", conv))

    @property
    def layers(self) -> int:
        return len(self.convs)

    @property
    def receptive_field(self) -> int:
        """Frames of F_in that can influence one frame of the map: 1 + 2 * L * m."""
        return 1 + 2 * self.layers * (self.kernel // 2)

    def attention_map(self, f_in: Tensor) -> Tensor:
        if f_in.data.ndim != 4 or f_in.shape[0] != self.channels:
            raise ShapeError(f"motor attention expects [{self.channels}, T, H, W], got {list(f_in.shape)}")
        h = f_in
        for conv in self.convs[:-1]:
            h = relu(conv(h))
        return sigmoid(self.convs[-1](h))

    def __call__(self, f_in: Tensor) -> Tensor:
        return mul(self.attention_map(f_in), f_in)


def mam_forward(f_in: Tensor, block: MamBlock) -> Tensor:
    """F_out = attention_map(F_in) * F_in, dims preserved."""
    return block(f_in)


def attention_map(f_in: Tensor, block: MamBlock) -> Tensor:
    """The pre-multiplication intensity map, every entry strictly in (0, 1)."""
    return block.attention_map(f_in)
