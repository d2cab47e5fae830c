import numpy as np
import pytest

from mamfsd.lab.backbone import Backbone, dblock_project, extract
from mamfsd.lab.base import ShapeError
from mamfsd.lab.config import MamConfig, ModelConfig
from mamfsd.lab.tensor import Tensor, relu, scale

SMALL = ModelConfig(stem_channels=4, stage_channels=(4, 6, 8, 8), resolution=16, feature_dim=8, vocab_size=3)


def _video(frames=5, size=16, seed=0):
    return Tensor(np.random.default_rng(seed).random((frames, 3, size, size)))


def test_stage_shapes_and_outputs():
    backbone = Backbone(SMALL, MamConfig(layers=2))
    assert backbone.stage_shapes() == [(4, 16, 16), (6, 8, 8), (8, 4, 4), (8, 2, 2)]
    features = extract(_video(), backbone)
    assert [s.shape for s in features.stages] == [(5,) + shape for shape in backbone.stage_shapes()]
    assert features.f_spatial.shape == (5, 8)
    assert features.attention == {}


def test_default_stage_geometry_for_32_pixel_input():
    backbone = Backbone(ModelConfig(), MamConfig(count=0))
    assert backbone.stage_shapes() == [(16, 32, 32), (32, 16, 16), (64, 8, 8), (128, 4, 4)]


def test_mam_blocks_fill_from_the_input_side():
    backbone = Backbone(SMALL, MamConfig(count=2, layers=2))
    names = [n for n, _ in backbone.named_parameters()]
    assert "mam1.conv1.w" in names and "mam2.conv2.b" in names
    assert not any(n.startswith("mam3") for n in names)
    assert names[:2] == ["stem.w", "stem.b"]
    assert "stage1.block1.conv1.w" in names and "stage2.block1.down.w" in names
    assert "dblock3.w" in names


def test_capture_attention_records_gated_stages():
    backbone = Backbone(SMALL, MamConfig(count=2, layers=2))
    features = backbone.extract(_video(), capture_attention=True)
    assert sorted(features.attention) == [1, 2]
    assert features.attention[2].shape == (6, 5, 8, 8)


def test_frames_are_independent_without_motor_attention():
    backbone = Backbone(SMALL, MamConfig(count=0))
    video = _video()
    nudged = video.data.copy()
    nudged[0] += 1.0
    a = backbone.extract(video).f_spatial.data
    b = backbone.extract(Tensor(nudged)).f_spatial.data
    np.testing.assert_array_equal(a[1:], b[1:])
    assert not np.array_equal(a[0], b[0])


def test_motor_attention_mixes_neighbouring_frames():
    backbone = Backbone(SMALL, MamConfig(count=4, layers=2))
    video = _video()
    nudged = video.data.copy()
    nudged[0] += 1.0
    a = backbone.extract(video).f_spatial.data
    b = backbone.extract(Tensor(nudged)).f_spatial.data
    assert not np.array_equal(a[1], b[1])


def test_dblock_projects_onto_next_stage():
    backbone = Backbone(SMALL, MamConfig(count=0))
    features = backbone.extract(_video())
    for i in range(1, 4):
        assert dblock_project(backbone, i, features.stages[i - 1]).shape == features.stages[i].shape
    with pytest.raises(ShapeError):
        backbone.dblock_project(4, features.stages[3])
    with pytest.raises(ShapeError):
        backbone.dblock_project(2, features.stages[0])


@pytest.mark.parametrize("dims", [(5, 3, 8, 8), (5, 1, 16, 16), (3, 16, 16)])
def test_extract_rejects_bad_video(dims):
    with pytest.raises(ShapeError):
        Backbone(SMALL, MamConfig(count=0)).extract(Tensor(np.zeros(dims)))


def test_neutral_gates_halve_every_stage_of_the_plain_backbone():
    gated = Backbone(SMALL, MamConfig(count=4, layers=2), seed=3)
    for block in gated.mams.values():
        block.convs[-1].w.data[...] = 0.0
        block.convs[-1].b.data[...] = 0.0
    plain = Backbone(SMALL, MamConfig(count=0), seed=3)
    video = _video(seed=4)

    features = gated.extract(video)
    x = relu(plain.stem(video))
    for i in range(1, 5):
        x = scale(plain.stage_forward(i, x), 0.5)
        np.testing.assert_allclose(features.stages[i - 1].data, x.data, rtol=1e-6, atol=1e-7)
