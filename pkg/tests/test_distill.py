import numpy as np
import pytest

from mamfsd.lab.backbone import Backbone, StageFeatures
from mamfsd.lab.base import ConfigError, NonFiniteError, ShapeError
from mamfsd.lab.config import MamConfig, ModelConfig
from mamfsd.lab.distill import DistillWeights, LossReport, self_distill_loss, total_loss
from mamfsd.lab.tensor import Tensor, float64_storage, mean, mul, parameter

SMALL = ModelConfig(stem_channels=4, stage_channels=(4, 6, 8, 8), resolution=16, feature_dim=8, vocab_size=3)


def _features(backbone, seed=0):
    video = Tensor(np.random.default_rng(seed).random((4, 3, 16, 16)))
    return backbone.extract(video)


def test_weighted_sum_of_stage_losses():
    with float64_storage():
        backbone = Backbone(SMALL, MamConfig(count=2, layers=2))
        weights = DistillWeights(0.3, 0.5, 2.0)
        total, terms = self_distill_loss(_features(backbone), backbone, weights)
    expected = 0.3 * terms[0].item() + 0.5 * terms[1].item() + 2.0 * terms[2].item()
    assert total.item() == pytest.approx(expected, abs=1e-7)
    assert all(t.item() > 0 for t in terms)


def test_teacher_only_parameters_receive_zero_gradient():
    backbone = Backbone(SMALL, MamConfig(count=4, layers=2))
    total, _ = self_distill_loss(_features(backbone), backbone, DistillWeights())
    total.backward()
    for name, p in backbone.named_parameters():
        if name.startswith(("stage4.", "mam4.")):
            assert p.grad is None or not np.any(p.grad), name
    grads = dict(backbone.named_parameters())
    assert np.any(grads["dblock1.w"].grad)
    assert np.any(grads["stage1.block1.conv1.w"].grad)


def test_single_weight_isolates_one_term():
    backbone = Backbone(SMALL, MamConfig(count=0))
    features = _features(backbone)
    total, terms = self_distill_loss(features, backbone, DistillWeights(0.0, 1.0, 0.0))
    assert total.item() == pytest.approx(terms[1].item(), rel=1e-6)


def test_weights_validation_and_flags():
    with pytest.raises(ConfigError):
        DistillWeights(-0.1, 1.0, 1.0)
    assert not DistillWeights(0.0, 0.0, 0.0).enabled
    assert DistillWeights(0.0, 0.0, 0.1).enabled


def test_total_loss_checks_scalars():
    a = parameter(np.array(1.5))
    assert total_loss(a, Tensor(np.array(0.5))).item() == 2.0
    with pytest.raises(ShapeError):
        total_loss(a, Tensor(np.ones(2)))
    with float64_storage():
        with pytest.raises(NonFiniteError):
            total_loss(a, Tensor(np.array(np.inf)))


def test_loss_report_arithmetic():
    a = LossReport(3.0, 2.0, (0.5, 0.25, 0.25), (1.0, 1.0, 1.0))
    b = (a + a).scaled(0.5)
    assert b == a
    assert LossReport.zero().loss_mse == (0.0, 0.0, 0.0)


def test_features_that_dblocks_reproduce_give_zero_loss():
    backbone = Backbone(SMALL, MamConfig(count=0))
    s = [Tensor(np.random.default_rng(5).standard_normal((3, 4, 16, 16)))]
    for i in range(1, 4):
        s.append(Tensor(backbone.dblock_project(i, s[-1]).data))
    features = StageFeatures(stages=tuple(s), f_spatial=Tensor(np.zeros((3, 8))), attention={})
    total, terms = self_distill_loss(features, backbone, DistillWeights(0.3, 0.5, 2.0))
    assert total.item() == 0.0
    assert [t.item() for t in terms] == [0.0, 0.0, 0.0]


def test_total_gradient_is_the_sum_of_both_passes():
    with float64_storage():
        backbone = Backbone(SMALL, MamConfig(count=2, layers=2), seed=6)
        weights = DistillWeights(0.3, 0.5, 2.0)
        r = Tensor(np.random.default_rng(7).standard_normal((4, 8)))
        weight = dict(backbone.named_parameters())["stage1.block1.conv1.w"]

        def losses():
            features = _features(backbone)
            return mean(mul(features.f_spatial, r)), self_distill_loss(features, backbone, weights)[0]

        parts = []
        for k in range(2):
            weight.grad = None
            losses()[k].backward()
            parts.append(weight.grad.copy())
        weight.grad = None
        total_loss(*losses()).backward()
    np.testing.assert_allclose(weight.grad, parts[0] + parts[1], rtol=1e-6, atol=1e-12)
