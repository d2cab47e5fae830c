"""
MAM-FSD Backbone
Four-stage residual frame extractor with motor attention gates and D-block projections
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

from .base import LabModule, ShapeError
from .config import MamConfig, ModelConfig
from .layers import Conv2dLayer
from .motor_attention import MamBlock
from .tensor import Tensor, add, global_avg_pool_2d, mul, permute, relu

# ============================================================================
# TYPES
# ============================================================================


@dataclass
class StageFeatures:
    """
    Per-stage outputs for one video.

    ``stages[i - 1]`` is S_i arranged [T, C_i, H_i, W_i], recorded after the
    stage's motor attention gate (when present). ``f_spatial`` is [T, D].
    ``attention`` holds the captured maps [C_i, T, H_i, W_i] by stage number
    when capture was requested.
    """

    stages: Tuple[Tensor, ...]
    f_spatial: Tensor
    attention: Dict[int, Tensor] = field(default_factory=dict)


# ============================================================================
# BLOCKS
# ============================================================================

class ResidualBlock(LabModule):
    """Two 3x3 convolutions plus a skip; the skip is a strided 1x1 projection when dims change."""

    DISPLAY_NAME = "Residual Block"

    def __init__(self, c_in: int, c_out: int, stride: int, seed: int, key: str):
        super().__init__()
        self.conv1 = self.mount("conv1", Conv2dLayer(c_in, c_out, 3, stride, 1, seed, f"{key}.conv1"))
        self.conv2 = self.mount("conv2", Conv2dLayer(c_out, c_out, 3, 1, 1, seed, f"{key}.conv2"))
        self.down: Optional[Conv2dLayer] = None
        if stride != 1 or c_in != c_out:
            self.down = self.mount("down", Conv2dLayer(c_in, c_out, 1, stride, 0, seed, f"{key}.down"))

    def __call__(self, x: Tensor) -> Tensor:
        skip = x if self.down is None else self.down(x)
        return relu(add(self.conv2(relu(self.conv1(x))), skip))


class Stage(LabModule):
    DISPLAY_NAME = "Residual Stage"

    def __init__(self, c_in: int, c_out: int, stride: int, blocks: int, seed: int, key: str):
        super().__init__()
        self.blocks: List[ResidualBlock] = []
        for j in range(1, blocks + 1):
            block = ResidualBlock(c_in if j == 1 else c_out, c_out, stride if j == 1 else 1,
                                  seed, f"{key}.block{j}")
            self.blocks.append(self.mount(f"block{j}", block))

    def __call__(self, x: Tensor) -> Tensor:
        for block in self.blocks:
            x = block(x)
        return x


# ============================================================================
# BACKBONE
# ============================================================================

class Backbone(LabModule):
    """
    stem -> stage1 -> MAM1 -> stage2 -> MAM2 -> stage3 -> MAM3 -> stage4 -> MAM4 -> pool.

    MAM blocks are filled from the input side: ``mam.count = k`` gates the
    first k stages. D-block i projects S_i onto the shape of S_{i+1}.
    """

    DISPLAY_NAME = "MAM Backbone"
    IN_CHANNELS = 3

    def __init__(self, model: ModelConfig, mam: MamConfig, seed: int = 0):
        super().__init__()
        self.config = model
        self.stem = self.mount("stem", Conv2dLayer(self.IN_CHANNELS, model.stem_channels, 3, 1, 1, seed, "stem"))

        self.stages: List[Stage] = []
        c_prev = model.stem_channels
        for i, (c, s) in enumerate(zip(model.stage_channels, model.stage_strides), start=1):
            stage = Stage(c_prev, c, s, model.blocks_per_stage, seed, f"stage{i}")
            self.stages.append(self.mount(f"stage{i}", stage))
            c_prev = c

        self.mams: Dict[int, MamBlock] = {}
        for i in range(1, mam.count + 1):
            block = MamBlock(model.stage_channels[i - 1], layers=mam.layers, kernel=mam.kernel,
                             hidden_channels=mam.hidden_channels, depthwise=mam.depthwise,
                             seed=seed, key=f"mam{i}")
            self.mams[i] = self.mount(f"mam{i}", block)

        self.dblocks: Dict[int, Conv2dLayer] = {}
        for i in range(1, 4):
            dblock = Conv2dLayer(model.stage_channels[i - 1], model.stage_channels[i], 3,
                                 model.stage_strides[i], 1, seed, f"dblock{i}")
            self.dblocks[i] = self.mount(f"dblock{i}", dblock)

    def stage_shapes(self) -> List[Tuple[int, int, int]]:
        """[C_i, H_i, W_i] of S_1..S_4 for the configured resolution."""
        shapes, extent = [], self.config.resolution
        for c, s in zip(self.config.stage_channels, self.config.stage_strides):
            extent //= s
            shapes.append((c, extent, extent))
        return shapes

    def stage_forward(self, i: int, x: Tensor) -> Tensor:
        return self.stages[i - 1](x)

    def gate(self, i: int, s: Tensor, capture: Optional[Dict[int, Tensor]] = None) -> Tensor:
        """Apply MAM_i over [T, C, H, W] frames (gathered to [C, T, H, W]); identity without one."""
        block = self.mams.get(i)
        if block is None:
            return s
        f_in = permute(s, (1, 0, 2, 3))
        f_map = block.attention_map(f_in)
        if capture is not None:
            capture[i] = f_map
        return permute(mul(f_map, f_in), (1, 0, 2, 3))

    def extract(self, video: Tensor, capture_attention: bool = False) -> StageFeatures:
        """
        Frame-level features for video: [T, 3, H, W].

        Raises:
            ShapeError: wrong rank, channel count or resolution
        """
        if video.data.ndim != 4:
            raise ShapeError(f"video must be [T, C, H, W], got {list(video.shape)}")
        t_len, c, h, w = video.shape
        if c != self.IN_CHANNELS:
            raise ShapeError(f"video must have {self.IN_CHANNELS} channels, got {c}")
        res = self.config.resolution
        if h != res or w != res:
            raise ShapeError(f"video frames are {h}x{w}, backbone expects {res}x{res}")
        if res % 8:
            raise ShapeError(f"resolution {res} is not divisible by 8")

        capture: Optional[Dict[int, Tensor]] = {} if capture_attention else None
        x = relu(self.stem(video))
        stages = []
        for i in range(1, 5):
            x = self.gate(i, self.stage_forward(i, x), capture)
            stages.append(x)
        return StageFeatures(stages=tuple(stages), f_spatial=global_avg_pool_2d(x),
                             attention=capture or {})

    def dblock_project(self, i: int, s_i: Tensor) -> Tensor:
        """
        Project S_i ([C_i, H_i, W_i] or a frame batch) onto the shape of S_{i+1}.

        Raises:
            ShapeError: i outside 1..3 (S_4 is only ever a teacher) or S_i of the wrong shape
        """
        if i not in self.dblocks:
            raise ShapeError(f"no D-block for stage {i}; stage 4 features are teacher-only")
        expected = self.stage_shapes()[i - 1]
        if tuple(s_i.shape[-3:]) != expected:
            raise ShapeError(f"dblock{i} expects [..., {', '.join(map(str, expected))}], got {list(s_i.shape)}")
        return self.dblocks[i](s_i)


def extract(video: Tensor, backbone: Backbone) -> StageFeatures:
    return backbone.extract(video)


def dblock_project(backbone: Backbone, i: int, s_i: Tensor) -> Tensor:
    return backbone.dblock_project(i, s_i)
