import dataclasses
import json

import pytest

from mamfsd.lab.base import DataError
from mamfsd.lab.config import DistillConfig, ModelConfig, TrainConfig, load_config
from mamfsd.lab.trainer import LOG_HEADER, check_dataset, evaluate, train
from mamfsd.lab.data import load_split
from mamfsd.lab.model import load_model


def _log_rows(run):
    lines = (run / "train_log.csv").read_text(encoding='utf-8').splitlines()
    assert lines[0] == LOG_HEADER
    return [line.split(",") for line in lines[1:]]


def test_run_directory_contents(tmp_path, tiny_dataset, tiny_run_config):
    run = tmp_path / "run"
    summary = train(tiny_run_config, tiny_dataset, run, seed=1, progress=False)
    for name in ("config.ini", "train_log.csv", "train.log", "best.mfck", "last.mfck", "summary.json"):
        assert (run / name).exists(), name
    rows = _log_rows(run)
    assert [r[0] for r in rows] == ["1", "2"]
    assert all(r[1] == "0.001" for r in rows)
    assert summary.best_epoch in (1, 2)
    info = json.loads((run / "summary.json").read_text())
    assert info["best_epoch"] == summary.best_epoch and info["beam"] == 10
    assert 0.0 <= info["final_dev_wer"]


def test_fixed_seed_reproduces_log_and_checkpoint(tmp_path, tiny_dataset, tiny_run_config):
    train(tiny_run_config, tiny_dataset, tmp_path / "a", seed=2, progress=False)
    train(tiny_run_config, tiny_dataset, tmp_path / "b", seed=2, threads=2, progress=False)
    assert (tmp_path / "a" / "train_log.csv").read_bytes() == (tmp_path / "b" / "train_log.csv").read_bytes()
    assert (tmp_path / "a" / "last.mfck").read_bytes() == (tmp_path / "b" / "last.mfck").read_bytes()


def test_echoed_config_reproduces_the_run(tmp_path, tiny_dataset, tiny_run_config):
    train(tiny_run_config, tiny_dataset, tmp_path / "a", seed=4, progress=False)
    echoed = load_config(tmp_path / "a" / "config.ini")
    assert echoed == tiny_run_config
    train(echoed, tiny_dataset, tmp_path / "b", seed=4, progress=False)
    assert (tmp_path / "a" / "train_log.csv").read_bytes() == (tmp_path / "b" / "train_log.csv").read_bytes()


def test_disabled_distillation_logs_zero_mse(tmp_path, tiny_dataset, tiny_run_config):
    config = dataclasses.replace(tiny_run_config, distill=DistillConfig(0.0, 0.0, 0.0))
    train(config, tiny_dataset, tmp_path / "run", seed=0, progress=False)
    for row in _log_rows(tmp_path / "run"):
        assert row[4:7] == ["0.000000"] * 3
        assert row[2] == row[3]


def test_learning_rate_drop_is_logged(tmp_path, tiny_dataset, tiny_run_config):
    config = dataclasses.replace(tiny_run_config, train=TrainConfig(lr=1e-3, epochs=2, lr_drop_epochs=(1,)))
    train(config, tiny_dataset, tmp_path / "run", seed=0, progress=False)
    assert [r[1] for r in _log_rows(tmp_path / "run")] == ["0.001", "0.0002"]


def test_dataset_must_match_the_model(tiny_dataset, tiny_run_config):
    check_dataset(tiny_run_config, tiny_dataset)
    wrong_vocab = dataclasses.replace(tiny_run_config, model=dataclasses.replace(tiny_run_config.model, vocab_size=4))
    with pytest.raises(DataError):
        check_dataset(wrong_vocab, tiny_dataset)
    wrong_res = dataclasses.replace(
        tiny_run_config, model=ModelConfig(stem_channels=4, stage_channels=(4, 4, 8, 8), resolution=16,
                                           feature_dim=8, vocab_size=3))
    with pytest.raises(DataError):
        check_dataset(wrong_res, tiny_dataset)


def test_evaluate_best_checkpoint(tmp_path, tiny_dataset, tiny_run_config):
    train(tiny_run_config, tiny_dataset, tmp_path / "run", seed=0, progress=False)
    model = load_model(tmp_path / "run" / "best.mfck")
    records = load_split(tiny_dataset, "test")
    result = evaluate(model, records, beam=3)
    assert [r.id for r in result.rows] == [r.id for r in records]
    assert result.pooled.ref_len == sum(len(r.label) for r in records)
    with pytest.raises(DataError):
        evaluate(model, [])
