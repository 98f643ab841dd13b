"""Test the task-blocking command line end to end on a tiny configuration.

Module Information:
    - Filename: test_cli.py
    - Module: test_cli
    - Location: tests/
"""

import json

import pandas as pd
import pytest

from task_blocking.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, main
from task_blocking.config import RunConfig, config_hash
from task_blocking.models import load_checkpoint

TINY = {
    "version": 1,
    "data": {"input_dim": 16, "size": 200},
    "model": {"hidden_dims": [8, 4]},
    "blocking": {"total_steps": 2, "k_max": 2, "batch_size_desired": 8, "batch_size_harmful": 8, "log_every": 1},
    "pretrain": {"steps": 5, "batch_size": 8},
    "search": {"trials": 2, "seeds": 2, "n_grid": [4], "steps": [5], "batch_sizes": [4]},
}


@pytest.fixture
def workspace(tmp_path):
    config = tmp_path / "run.json"
    config.write_text(json.dumps(TINY), encoding="utf-8")
    data = tmp_path / "synth.jsonl"
    assert main(["gen-data", "--config", str(config), "--out", str(data)]) == EXIT_OK
    return tmp_path, config, data


def _train(workspace, baseline: str, name: str, *extra: str) -> str:
    tmp_path, config, data = workspace
    out = tmp_path / f"{name}.json"
    code = main(["train", "--config", str(config), "--data", str(data), "--baseline", baseline, "--out", str(out), *extra])
    assert code == EXIT_OK
    return str(out)


def test_print_config(capsys):
    assert main(["gen-data", "--out", "unused.jsonl", "--print-config"]) == EXIT_OK
    text, digest = capsys.readouterr().out.rsplit("config_hash:", 1)
    assert json.loads(text)["version"] == 1
    assert digest.strip() == config_hash(RunConfig())


def test_config_errors_exit_2(tmp_path):
    config = tmp_path / "bad.json"
    config.write_text(json.dumps({"version": 1, "blocking": {"k_maximum": 3}}), encoding="utf-8")
    assert main(["gen-data", "--config", str(config), "--out", str(tmp_path / "d.jsonl")]) == EXIT_CONFIG


def test_runtime_errors_exit_1(tmp_path):
    missing = tmp_path / "missing.jsonl"
    assert main(["train", "--data", str(missing), "--out", str(tmp_path / "m.json")]) == EXIT_RUNTIME


def test_train_is_deterministic(workspace):
    tmp_path = workspace[0]
    init = _train(workspace, "finetune", "finetune")
    first = _train(workspace, "mlac", "mlac_a", "--init", init)
    second = _train(workspace, "mlac", "mlac_b", "--init", init)
    with open(first, encoding="utf-8") as a, open(second, encoding="utf-8") as b:
        assert a.read() == b.read()
    log = pd.read_csv(tmp_path / "mlac_a_log.csv")
    assert list(log.columns) == ["step", "desired_nll", "mean_harmful_nll", "alpha_h"]
    assert len(log) == 2
    assert sorted(load_checkpoint(first).heads) == ["desired", "harmful"]


def test_attack_and_report(workspace):
    tmp_path, config, data = workspace
    random_ckpt = _train(workspace, "random", "random")
    ac_ckpt = _train(workspace, "ac", "ac")

    reports = {}
    for name, ckpt in (("random", random_ckpt), ("ac", ac_ckpt)):
        reports[name] = tmp_path / f"{name}_report.json"
        code = main(
            ["attack", "--config", str(config), "--data", str(data), "--checkpoint", ckpt, "--out", str(reports[name])]
        )
        assert code == EXIT_OK
    assert len(pd.read_csv(tmp_path / "ac_report.csv")) == 2

    curve = tmp_path / "curve.csv"
    code = main(["report", "--model", str(reports["ac"]), "--random", str(reports["random"]), "--out", str(curve)])
    assert code == EXIT_OK
    assert list(pd.read_csv(curve)["n"]) == [4]

    other = tmp_path / "other_report.json"
    code = main(
        ["attack", "--config", str(config), "--data", str(data), "--checkpoint", random_ckpt,
         "--trials", "1", "--out", str(other)]
    )
    assert code == EXIT_OK
    code = main(["report", "--model", str(reports["ac"]), "--random", str(other), "--out", str(curve)])
    assert code == EXIT_RUNTIME


def test_attack_with_baseline_attaches_e_data(workspace):
    tmp_path, config, data = workspace
    ckpt = _train(workspace, "random", "random")
    base = tmp_path / "base.json"
    args = ["attack", "--config", str(config), "--data", str(data), "--checkpoint", ckpt]
    assert main([*args, "--out", str(base)]) == EXIT_OK
    against = tmp_path / "against.json"
    assert main([*args, "--out", str(against), "--against", str(base)]) == EXIT_OK
    doc = json.loads(against.read_text(encoding="utf-8"))
    assert doc["e_data_n"] == {"4": 0.0}


def test_compute_cost(workspace):
    tmp_path, config, data = workspace
    model = _train(workspace, "finetune", "finetune")
    random_ckpt = _train(workspace, "random", "random")
    out = tmp_path / "cost.csv"
    code = main(
        ["compute-cost", "--config", str(config), "--data", str(data), "--model", model, "--random", random_ckpt,
         "--p", "0.3", "--step-cap", "10", "--out", str(out)]
    )
    assert code == EXIT_OK
    assert list(pd.read_csv(out)["model"]) == ["model", "random"]


def test_prepare_bios(tmp_path):
    raw = tmp_path / "bios.csv"
    pd.DataFrame(
        {
            "text": ["She is a nurse.", "He argues in court.", "He argues in court."],
            "desired_label": ["nurse", "attorney", "attorney"],
            "harmful_label": ["female", "male", "male"],
        }
    ).to_csv(raw, index=False)
    out = tmp_path / "bios.jsonl"
    assert main(["prepare-bios", "--input", str(raw), "--out", str(out)]) == EXIT_OK
    rows = [json.loads(line) for line in out.read_text(encoding="utf-8").splitlines()]
    assert [r["text"] for r in rows] == ["they is a nurse.", "they argues in court."]


def test_attack_is_independent_of_jobs(workspace):
    tmp_path, config, data = workspace
    ckpt = _train(workspace, "random", "random")
    outputs = []
    for jobs in ("1", "4"):
        out = tmp_path / f"jobs{jobs}.json"
        args = ["attack", "--config", str(config), "--data", str(data), "--checkpoint", ckpt, "--jobs", jobs]
        assert main([*args, "--out", str(out)]) == EXIT_OK
        outputs.append(out.read_text(encoding="utf-8"))
    assert outputs[0] == outputs[1]


def test_gen_data_is_byte_identical(workspace):
    tmp_path, config, data = workspace
    again = tmp_path / "again.jsonl"
    assert main(["gen-data", "--config", str(config), "--out", str(again)]) == EXIT_OK
    assert again.read_bytes() == data.read_bytes()
