import json
import os
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

from mamfsd.lab.config import DataConfig, MamConfig, ModelConfig, RunConfig, TemporalConfig, TrainConfig  # noqa: E402
from mamfsd.lab.tensor import float64_storage  # noqa: E402

TINY_CONFIG = """\
[model]
stem_channels = 4
stage_channels = 4,4,8,8
resolution = 8
feature_dim = 8
vocab_size = 3

[mam]
layers = 2

[temporal]
conv_channels = 8
hidden = 8

[train]
lr = 1e-3
epochs = 2
"""

TINY_SPEC = {
    "name": "tiny",
    "description": "three glosses on 16x16 frames",
    "version": "1.0.0",
    "vocab_size": 3,
    "splits": {"train": 6, "dev": 2, "test": 2},
    "label_length": [2, 3],
    "duration": [8, 10],
    "resolution": 16,
    "crossfade": 2,
}


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: end-to-end runs, enabled with MAMFSD_SLOW=1")


def pytest_collection_modifyitems(config, items):
    if os.environ.get("MAMFSD_SLOW") == "1":
        return
    skip = pytest.mark.skip(reason="set MAMFSD_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def f64():
    with float64_storage():
        yield


@pytest.fixture
def gradcheck():
    """
    Central finite differences on randomly sampled parameter entries against
    the analytic gradients of ``loss_fn`` (which must rebuild its graph per call).

    Runs under 64-bit storage, where h=1e-5 keeps both truncation and rounding
    error far below rtol. Smooth single ops (pointwise, CTC) pass h=1e-3
    explicitly; the default stays small for whole-network checks, where a step
    of 1e-3 can carry a hidden ReLU input across zero.
    """

    def check(loss_fn, params, samples=40, h=1e-5, rtol=1e-4, atol=1e-8, seed=0):
        for p in params:
            p.grad = None
        loss_fn().backward()
        analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]
        rng = np.random.default_rng(seed)
        for _ in range(samples):
            k = int(rng.integers(len(params)))
            p = params[k]
            idx = tuple(int(rng.integers(d)) for d in p.shape)
            orig = float(p.data[idx])
            p.data[idx] = orig + h
            up = loss_fn().item()
            p.data[idx] = orig - h
            down = loss_fn().item()
            p.data[idx] = orig
            numeric = (up - down) / (2 * h)
            a = float(analytic[k][idx])
            assert abs(numeric - a) <= atol + rtol * max(abs(numeric), abs(a)), \
                f"param {k} at {idx}: numeric {numeric} vs analytic {a}"

    return check


@pytest.fixture
def tiny_run_config():
    return RunConfig(
        model=ModelConfig(stem_channels=4, stage_channels=(4, 4, 8, 8), resolution=8, feature_dim=8, vocab_size=3),
        mam=MamConfig(layers=2),
        temporal=TemporalConfig(conv_channels=8, hidden=8),
        train=TrainConfig(lr=1e-3, epochs=2),
        data=DataConfig(),
    )


@pytest.fixture
def tiny_config_file(tmp_path):
    path = tmp_path / "tiny.ini"
    path.write_text(TINY_CONFIG, encoding='utf-8')
    return path


@pytest.fixture
def tiny_spec_file(tmp_path):
    path = tmp_path / "tiny_spec.json"
    path.write_text(json.dumps(TINY_SPEC), encoding='utf-8')
    return path


@pytest.fixture
def tiny_dataset(tmp_path, tiny_spec_file):
    from mamfsd.lab.data import SynthSpec, synth_generate

    root = tmp_path / "data"
    synth_generate(SynthSpec.from_profile(tiny_spec_file), root, seed=7)
    return root
