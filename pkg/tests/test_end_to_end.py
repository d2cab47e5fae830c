"""Full-size runs on the default generation profile. Enable with MAMFSD_SLOW=1."""

import numpy as np
import pytest

from mamfsd.lab.config import RunConfig
from mamfsd.lab.data import SynthSpec, synth_generate
from mamfsd.lab.trainer import train

pytestmark = pytest.mark.slow

# a horizontal flip turns "left" into "right"
DIRECTIONAL = RunConfig().with_value("data.flip_prob", "0")


@pytest.fixture(scope="module")
def default_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    synth_generate(SynthSpec.from_profile(), root, seed=0, threads=4)
    return root


def test_default_run_reaches_low_dev_wer(default_dataset, tmp_path):
    summary = train(DIRECTIONAL.with_value("train.epochs", "30"), default_dataset, tmp_path / "run",
                    seed=0, threads=4, progress=False)
    assert summary.final_dev_wer <= 15.0


def test_motor_attention_does_not_hurt(default_dataset, tmp_path):
    base = DIRECTIONAL.with_value("train.epochs", "30")
    medians = {}
    for count in ("0", "4"):
        config = base.with_value("mam.count", count)
        scores = [train(config, default_dataset, tmp_path / f"mam{count}_{seed}", seed=seed,
                        threads=4, progress=False).best_dev_wer for seed in (0, 1, 2)]
        medians[count] = float(np.median(scores))
    assert medians["4"] - medians["0"] <= 0.0
