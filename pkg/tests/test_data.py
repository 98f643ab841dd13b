"""Test dataset generation, text ingestion and sampling.

Module Information:
    - Filename: test_data.py
    - Module: test_data
    - Location: tests/
"""

import json

import numpy as np
import pandas as pd
import pytest
from scipy import optimize, special

from task_blocking.data import (
    DatasetError,
    SynthConfig,
    TaskDataset,
    batches,
    censor_pronouns,
    dataset_summary,
    fnv1a_64,
    gen_synthetic,
    hash_vector,
    load_jsonl,
    prepare_bios,
    read_splits,
    split_dataset,
    subsample,
    tokenize,
    write_jsonl,
)


def test_censor_pronouns():
    assert censor_pronouns("She said his book was hers") == "they said their book was their"
    assert censor_pronouns("He met him and her") == "they met they and they"
    assert censor_pronouns("Sheriff helps the heron") == "Sheriff helps the heron"


def test_censor_possessive_her():
    assert censor_pronouns("She wrote her thesis") == "they wrote their thesis"
    assert censor_pronouns("They gave her the prize.") == "They gave they the prize."
    assert censor_pronouns("A colleague of hers thanked her.") == "A colleague of their thanked they."
    assert censor_pronouns("HER research") == "their research"
    assert censor_pronouns("The theory holds") == "The theory holds"


def test_censoring_is_idempotent():
    text = "She said her students liked him and his lectures; he thanked her."
    once = censor_pronouns(text)
    assert censor_pronouns(once) == once


def test_tokenize_and_hash():
    assert tokenize("Hello, World_42!") == ["hello", "world", "42"]
    assert fnv1a_64("") == 0xCBF29CE484222325
    assert fnv1a_64("a") == 0xAF63DC4C8601EC8C
    v = hash_vector("nurse nurse clinic", 32)
    assert v.shape == (32,)
    assert np.linalg.norm(v) == pytest.approx(1.0)
    np.testing.assert_array_equal(hash_vector("", 8), np.zeros(8))


def test_gen_synthetic_is_deterministic():
    cfg = SynthConfig(input_dim=16, size=100, seed=3)
    a, b = gen_synthetic(cfg), gen_synthetic(cfg)
    np.testing.assert_array_equal(a.x, b.x)
    np.testing.assert_array_equal(a.y_harmful, b.y_harmful)
    assert a.x.shape == (100, 16)
    assert sum(cfg.block_dims) == 16


def test_label_correlation_ties_labels():
    ds = gen_synthetic(SynthConfig(input_dim=16, size=400, label_correlation=1.0, seed=0))
    np.testing.assert_array_equal(ds.y_harmful, ds.y_desired % ds.num_harmful_classes)


def test_synth_config_validation():
    with pytest.raises(DatasetError):
        SynthConfig(label_correlation=1.5)
    with pytest.raises(DatasetError):
        SynthConfig(num_harmful_classes=1)


def test_dataset_rejects_bad_labels():
    with pytest.raises(DatasetError, match="harmful labels"):
        TaskDataset(np.zeros((2, 3)), [0, 1], [0, 2], 2, 2)
    with pytest.raises(DatasetError):
        TaskDataset(np.zeros((0, 3)), [], [], 2, 2)


def test_splits_are_disjoint_and_cover_everything(tiny_data):
    splits = split_dataset(tiny_data, (0.7, 0.15, 0.15), seed=1)
    assert list(splits) == ["train", "val", "eval"]
    assert sum(len(s) for s in splits.values()) == len(tiny_data)
    rows = [tuple(r) for s in splits.values() for r in s.x]
    assert len(set(rows)) == len(rows)
    assert splits["eval"].split == "eval"


def test_split_fractions_are_checked(tiny_data):
    with pytest.raises(DatasetError):
        split_dataset(tiny_data, (0.5, 0.5, 0.5))


def test_subsample_and_batches(tiny_data):
    sub = subsample(tiny_data, 10, seed=0)
    assert len(sub) == 10
    np.testing.assert_array_equal(sub.x, subsample(tiny_data, 10, seed=0).x)
    with pytest.raises(DatasetError):
        subsample(tiny_data, len(tiny_data) + 1, seed=0)

    sizes = [len(b) for b in batches(tiny_data, 64, seed=0)]
    assert sizes == [64, 64, 64, 8]
    stream = batches(tiny_data, 64, seed=0, epochs=None)
    assert len([next(stream) for _ in range(9)]) == 9


def test_prepare_bios_cleans_and_censors():
    raw = pd.DataFrame(
        {
            "text": ["  She is a nurse. ", "She is a nurse.", "   ", "He is a surgeon."],
            "desired_label": ["nurse", "nurse", "nurse", "surgeon"],
            "harmful_label": ["female", "female", "female", "male"],
        }
    )
    df = prepare_bios(raw)
    assert list(df["text"]) == ["they is a nurse.", "they is a surgeon."]
    assert list(df.columns[:3]) == ["text", "desired_label", "harmful_label"]
    assert list(prepare_bios(raw, censor=False)["text"])[0] == "She is a nurse."

    with pytest.raises(DatasetError, match="harmful_label"):
        prepare_bios(raw.drop(columns=["harmful_label"]))


def test_load_jsonl_maps_labels_in_order(tmp_path):
    path = tmp_path / "bios.jsonl"
    rows = [
        {"text": "nurse clinic", "desired_label": "nurse", "harmful_label": "f"},
        {"text": "court law", "desired_label": "attorney", "harmful_label": "m"},
        {"text": "ward care", "desired_label": "nurse", "harmful_label": "m"},
    ]
    path.write_text("\n".join(json.dumps(r) for r in rows) + "\n", encoding="utf-8")
    ds = load_jsonl(path, hash_dim=16)
    assert ds.desired_names == ("nurse", "attorney")
    np.testing.assert_array_equal(ds.y_desired, [0, 1, 0])
    np.testing.assert_array_equal(ds.y_harmful, [0, 1, 1])
    assert ds.input_dim == 16


def test_load_jsonl_reports_line_numbers(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"text": "a", "desired_label": 0, "harmful_label": 1}\n{"text": "b"}\n', encoding="utf-8")
    with pytest.raises(DatasetError, match="line 2: missing field 'desired_label'"):
        load_jsonl(path, hash_dim=8)
    path.write_text("not json\n", encoding="utf-8")
    with pytest.raises(DatasetError, match="line 1"):
        load_jsonl(path, hash_dim=8)


def test_vector_file_keeps_its_splits(tmp_path, tiny_splits):
    path = write_jsonl(tiny_splits, tmp_path / "synth.jsonl")
    loaded = read_splits(path)
    for name in ("train", "val", "eval"):
        np.testing.assert_array_equal(loaded[name].x, tiny_splits[name].x)
        np.testing.assert_array_equal(loaded[name].y_desired, tiny_splits[name].y_desired)


def test_dataset_summary(tiny_splits):
    summary = dataset_summary(tiny_splits)
    assert list(summary["split"]) == ["train", "val", "eval"]
    assert summary["size"].sum() == 200


def _logistic_accuracy(train: TaskDataset, eval_: TaskDataset) -> float:
    """L2-regularized logistic regression on raw x, fit with L-BFGS, harmful labels."""
    x, y = train.x, train.y_harmful.astype(np.float64)

    def objective(params: np.ndarray) -> tuple[float, np.ndarray]:
        w, b = params[:-1], params[-1]
        z = x @ w + b
        residual = special.expit(z) - y
        loss = float(np.sum(np.logaddexp(0.0, z) - y * z) + 0.5 * w @ w)
        return loss, np.append(x.T @ residual + w, residual.sum())

    fit = optimize.minimize(objective, np.zeros(x.shape[1] + 1), jac=True, method="L-BFGS-B")
    w, b = fit.x[:-1], fit.x[-1]
    return float(np.mean((eval_.x @ w + b > 0).astype(int) == eval_.y_harmful))


def _harmful_splits(censored: bool) -> tuple[TaskDataset, TaskDataset]:
    ds = gen_synthetic(SynthConfig(censored=censored, size=6000, seed=0))
    return ds.take(np.arange(4096)), ds.take(np.arange(4096, 6000))


def _few_shot_accuracies(train: TaskDataset, eval_: TaskDataset, n: int, draws: int) -> list[float]:
    scores, seed = [], 0
    while len(scores) < draws:
        sub = subsample(train, n, seed)
        seed += 1
        if len(set(sub.y_harmful.tolist())) < 2:
            continue
        scores.append(_logistic_accuracy(sub, eval_))
    return scores


def test_censored_harmful_task_is_learnable_but_not_few_shot():
    train, eval_ = _harmful_splits(censored=True)
    assert np.mean(_few_shot_accuracies(train, eval_, 10, draws=10)) < 0.7
    assert _logistic_accuracy(train, eval_) > 0.85


def test_uncensored_harmful_task_is_few_shot():
    train, eval_ = _harmful_splits(censored=False)
    assert min(_few_shot_accuracies(train, eval_, 10, draws=3)) > 0.9


def test_independent_labels_are_uncorrelated():
    ds = gen_synthetic(SynthConfig(size=10_000, label_correlation=0.0, seed=0))
    assert abs(np.corrcoef(ds.y_desired, ds.y_harmful)[0, 1]) < 0.05


def test_subsample_is_uniform():
    ds = gen_synthetic(SynthConfig(input_dim=8, size=10, seed=0))
    hits = sum(np.array_equal(subsample(ds, 1, seed).x[0], ds.x[3]) for seed in range(10_000))
    assert hits / 10_000 == pytest.approx(0.1, abs=0.01)


def test_load_jsonl_hashes_into_hand_computed_buckets(tmp_path):
    # FNV-1a 64 low bytes: "a" ..8c, "b" ..a5, "c" ..f2, so mod 8 they land in 4, 5, 2
    assert fnv1a_64("b") == 0xAF63DF4C8601F1A5
    assert fnv1a_64("c") % 8 == 2
    path = tmp_path / "hand.jsonl"
    rows = [
        {"text": "a A b", "desired_label": "x", "harmful_label": "f"},
        {"text": "b, c!", "desired_label": "y", "harmful_label": "m"},
        {"text": "", "desired_label": "x", "harmful_label": "m"},
    ]
    path.write_text("\n".join(json.dumps(r) for r in rows) + "\n", encoding="utf-8")

    expected = np.zeros((3, 8))
    expected[0, 4], expected[0, 5] = 2.0, 1.0
    expected[0] /= np.sqrt(5.0)
    expected[1, 5] = expected[1, 2] = 1.0 / np.sqrt(2.0)
    np.testing.assert_allclose(load_jsonl(path, hash_dim=8).x, expected)


def test_written_dataset_is_byte_identical(tmp_path, tiny_splits):
    first = write_jsonl(tiny_splits, tmp_path / "a.jsonl").read_bytes()
    again = split_dataset(gen_synthetic(SynthConfig(input_dim=16, size=200, seed=0)), seed=0)
    assert write_jsonl(again, tmp_path / "b.jsonl").read_bytes() == first
