"""Test baseline training and the comparison experiments on a tiny configuration.

Module Information:
    - Filename: test_experiments.py
    - Module: test_experiments
    - Location: tests/
"""

import numpy as np
import pytest

from task_blocking.config import config_hash, parse_run_config
from task_blocking.experiments import (
    EXPERIMENTS,
    blocking_experiment,
    calibration_experiment,
    depth_experiment,
    retention_experiment,
    train_all,
    train_baseline,
)


@pytest.fixture
def cfg():
    return parse_run_config(
        {
            "version": 1,
            "model": {"hidden_dims": [8, 4]},
            "blocking": {"total_steps": 2, "k_max": 2, "batch_size_desired": 8, "batch_size_harmful": 8},
            "pretrain": {"steps": 5, "batch_size": 8},
            "search": {"trials": 2, "seeds": 2, "n_grid": [4], "steps": [5], "batch_sizes": [4]},
        }
    )


def test_baselines(cfg, tiny_splits):
    ckpts = train_all(cfg, tiny_splits["train"])
    assert sorted(ckpts) == ["ac", "finetune", "mlac", "random"]
    assert sorted(ckpts["finetune"].heads) == ["desired"]
    assert ckpts["mlac"].log_lr is not None
    assert all(c.config_hash == config_hash(cfg) for c in ckpts.values())
    # the blocked models start from the shared pretrained extractor, then move
    assert not np.array_equal(
        ckpts["mlac"].extractor.entries["layer0.weight"].data,
        ckpts["finetune"].extractor.entries["layer0.weight"].data,
    )
    with pytest.raises(ValueError):
        train_baseline(cfg, tiny_splits["train"], "distill")


def test_blocking_experiment(tmp_path, cfg, tiny_splits):
    out = tmp_path / "blocking.csv"
    frame = blocking_experiment(cfg, tiny_splits, out=out)
    assert sorted(frame["model"]) == ["ac", "finetune", "mlac", "random"]
    assert frame.loc[frame["model"] == "random", "e_data_n"].item() == 0.0
    assert out.exists()


def test_depth_and_calibration_experiments(cfg, tiny_splits):
    depth = depth_experiment(cfg, tiny_splits, depths=(0, 2))
    assert list(depth["k_max"]) == [0, 2]

    calib = calibration_experiment(cfg, tiny_splits, depths=(0, 1))
    pooled = calib[calib["k_max"] == "pooled"]
    assert list(pooled["calibration"]) == [False, True]
    assert len(calib) == 6


def test_retention_experiment(cfg, tiny_splits):
    frame = retention_experiment(cfg, tiny_splits)
    zero_shot = frame[frame["n"] == 0]
    assert sorted(zero_shot["model"]) == ["ac", "finetune", "mlac", "random"]
    assert frame["mean_accuracy"].between(0.0, 1.0).all()
    assert set(EXPERIMENTS) == {"blocking", "depth", "calibration", "retention"}
