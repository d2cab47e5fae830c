import dataclasses

import numpy as np
import pytest

from mamfsd.lab.base import FormatError, InfeasibleLabelError
from mamfsd.lab.config import DistillConfig, MamConfig, TemporalConfig, save_config
from mamfsd.lab.model import MamFsdModel, load_model
from mamfsd.lab.optim import Adam
from mamfsd.lab.serialization import load_checkpoint, save_checkpoint
from mamfsd.lab.tensor import float64_storage


def _video(frames=12, size=8, seed=0):
    return np.random.default_rng(seed).random((frames, 3, size, size)).astype(np.float32)


def test_loss_report_adds_up(tiny_run_config):
    model = MamFsdModel(tiny_run_config, seed=1)
    total, report = model.loss(_video(), [1, 2])
    assert total.item() == report.loss_total
    assert report.loss_total == pytest.approx(report.loss_task + sum(report.loss_mse), rel=1e-5)
    assert all(v > 0 for v in report.loss_mse)
    assert report.weights == (1.0, 1.0, 1.0)


def test_zero_distillation_weights_equal_disabled_distillation(tiny_run_config):
    off = dataclasses.replace(tiny_run_config, distill=DistillConfig(0.0, 0.0, 0.0))
    model = MamFsdModel(off, seed=1)
    total, report = model.loss(_video(), [1, 2])
    assert report.loss_mse == (0.0, 0.0, 0.0)
    assert report.loss_total == report.loss_task
    total.backward()
    grads = {n: p.grad for n, p in model.named_parameters()}
    assert grads["dblock1.w"] is None
    full = MamFsdModel(tiny_run_config, seed=1)
    assert full.loss(_video(), [1, 2])[1].loss_task == report.loss_task


def test_task_loss_terms_are_weightable(tiny_run_config):
    base = MamFsdModel(tiny_run_config, seed=2)
    main_only = MamFsdModel(dataclasses.replace(
        tiny_run_config, temporal=dataclasses.replace(tiny_run_config.temporal, aux_weight=0.0, kl_weight=0.0)), seed=2)
    _, full = base.loss(_video(), [3, 1])
    _, main = main_only.loss(_video(), [3, 1])
    assert main.loss_task < full.loss_task


def test_label_too_long_for_the_video(tiny_run_config):
    with pytest.raises(InfeasibleLabelError):
        MamFsdModel(tiny_run_config).loss(_video(frames=8), [1, 2, 3])


def test_decode_and_attention_map(tiny_run_config):
    model = MamFsdModel(tiny_run_config)
    greedy = model.decode(_video())
    beam = model.decode(_video(), beam=4)
    assert all(1 <= g <= 3 for g in greedy.labeling + beam.labeling)
    assert beam.logprob <= 0.0
    maps = model.attention_map(_video(), 2)
    assert maps.shape == (12, 4, 4)
    assert np.all((maps > 0) & (maps < 1))


def test_parameter_names_cover_both_halves(tiny_run_config):
    names = [n for n, _ in MamFsdModel(tiny_run_config).named_parameters()]
    assert names[0] == "stem.w"
    assert "mam4.conv2.w" in names and "tconv1.w" in names and names[-1] == "auxcls.b"
    assert len(names) == len(set(names))


def test_checkpoint_round_trip_is_bit_identical(tmp_path, tiny_run_config):
    model = MamFsdModel(tiny_run_config, seed=3)
    opt = Adam(model.parameters(), lr=1e-3)
    model.loss(_video(), [1, 2])[0].backward()
    opt.step()
    save_config(tiny_run_config, tmp_path / "config.ini")
    save_checkpoint(tmp_path / "m.mfck", model.to_checkpoint(opt))

    restored = load_model(tmp_path / "m.mfck")
    for seed in range(10):
        video = _video(seed=seed)
        np.testing.assert_array_equal(model.logprobs(video), restored.logprobs(video))

    opt2 = Adam(restored.parameters(), lr=1e-3)
    restored.restore(load_checkpoint(tmp_path / "m.mfck"), opt2)
    assert opt2.state.step == 1
    np.testing.assert_allclose(opt2.state.m[0], opt.state.m[0], rtol=1e-6)


def test_checkpoint_from_a_different_architecture(tiny_run_config):
    ckpt = MamFsdModel(tiny_run_config).to_checkpoint()
    other = MamFsdModel(dataclasses.replace(tiny_run_config, mam=MamConfig(count=0)))
    with pytest.raises(FormatError):
        other.restore(ckpt)


def test_full_model_gradient(tiny_run_config, gradcheck):
    # detached targets (KL to the main branch, distillation teachers) are switched off
    # so finite differences see the same function as the backward pass
    config = dataclasses.replace(tiny_run_config, mam=MamConfig(count=2, layers=2),
                                 distill=DistillConfig(0.0, 0.0, 0.0),
                                 temporal=TemporalConfig(conv_channels=4, conv_kernel=3, hidden=3, kl_weight=0.0))
    with float64_storage():
        model = MamFsdModel(config, seed=5)
        video = _video(frames=8)
        gradcheck(lambda: model.loss(video, [2, 1])[0], model.parameters(), samples=100)


def test_gradient_of_detached_target_losses(tiny_run_config, gradcheck):
    config = dataclasses.replace(tiny_run_config, distill=DistillConfig(0.5, 1.0, 2.0),
                                 temporal=TemporalConfig(conv_channels=4, conv_kernel=3, hidden=3))
    with float64_storage():
        model = MamFsdModel(config, seed=6)
        video = _video(frames=8)
        # D-blocks and the aux classifier feed only students, never a detached target
        params = [p for n, p in model.named_parameters() if n.startswith(("dblock", "auxcls"))]
        gradcheck(lambda: model.loss(video, [1, 3])[0], params, samples=60)
