"""Test the extractor, heads and checkpoint files.

Module Information:
    - Filename: test_models.py
    - Module: test_models
    - Location: tests/
"""

import json
import math

import numpy as np
import pytest

from task_blocking.autodiff import ShapeError, Tape, Tensor
from task_blocking.models import (
    Checkpoint,
    CheckpointError,
    ParameterSet,
    accuracy,
    checkpoint_from_document,
    features,
    head_logits,
    init_adversary,
    init_head,
    init_mlp,
    load_checkpoint,
    nll,
    save_checkpoint,
)


def _checkpoint(seed: int = 0) -> Checkpoint:
    return Checkpoint(
        extractor=init_mlp((5, 4, 3), seed=seed),
        heads={"desired": init_head(3, 4, seed), "harmful": init_head(3, 2, seed + 1)},
        seed=seed,
        config_hash="abc123",
        log_lr=math.log(0.01),
    )


def test_init_is_deterministic_in_seed():
    a, b, c = init_mlp((6, 8, 4), seed=1), init_mlp((6, 8, 4), seed=1), init_mlp((6, 8, 4), seed=2)
    for name in a.entries:
        np.testing.assert_array_equal(a.entries[name].data, b.entries[name].data)
    assert not np.array_equal(a.entries["layer0.weight"].data, c.entries["layer0.weight"].data)
    assert list(a.entries) == ["layer0.weight", "layer0.bias", "layer1.weight", "layer1.bias"]
    assert a.depth == 2 and a.input_dim == 6 and a.feature_dim == 4


def test_init_rejects_bad_dims():
    with pytest.raises(ValueError):
        init_mlp((4,))
    with pytest.raises(ValueError):
        init_mlp((4, 0, 2))


def test_parameter_set_rejects_mismatched_shapes():
    arrays = init_mlp((3, 2)).arrays()
    arrays["layer0.bias"] = np.zeros(5)
    with pytest.raises(ValueError, match="layer0"):
        ParameterSet.from_arrays(arrays, (3, 2))


def test_parameter_arithmetic():
    p = init_mlp((3, 2), seed=0)
    q = p + p.scaled(2.0)
    np.testing.assert_allclose(q.entries["layer0.weight"].data, 3 * p.entries["layer0.weight"].data)
    np.testing.assert_allclose((q - p).entries["layer0.weight"].data, 2 * p.entries["layer0.weight"].data)


def test_zero_extractor_and_head_give_uniform_nll():
    params = init_mlp((5, 3), seed=0).map(lambda _, v: Tensor(np.zeros(v.shape)))
    head = init_head(3, 4, seed=0)
    head = type(head)(Tensor(np.zeros((3, 4))), Tensor(np.zeros(4)))
    x = np.random.default_rng(0).standard_normal((6, 5))
    loss = nll(head_logits(head, features(params, Tensor(x))), [0, 1, 2, 3, 0, 1])
    assert loss.item() == pytest.approx(math.log(4))


def test_nll_label_checks():
    logits = Tensor(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        nll(logits, [0, 3])
    with pytest.raises(ShapeError):
        nll(logits, [0, 1, 2])


def test_features_rejects_wrong_input_dim():
    with pytest.raises(ShapeError):
        features(init_mlp((5, 3)), Tensor(np.zeros((2, 4))))


def test_accuracy_of_perfect_head():
    params = init_mlp((2, 2)).map(lambda _, v: Tensor(np.eye(2) * 5 if v.ndim == 2 else np.zeros(2)))
    head = type(init_head(2, 2, 0))(Tensor(np.eye(2)), Tensor(np.zeros(2)))
    x = np.array([[1.0, 0.0], [0.0, 1.0], [2.0, -1.0]])
    assert accuracy(params, head, x, np.array([0, 1, 0])) == 1.0
    assert accuracy(params, head, x[:0], np.array([], dtype=int)) == 0.0


def test_adversary_learning_rate_is_exp_of_log():
    adversary = init_adversary(3, 2, seed=0, inner_lr=0.05)
    assert adversary.inner_lr.item() == pytest.approx(0.05)
    assert len(adversary.tensors()) == 3

    tape = Tape()
    on_tape = adversary.on_tape(tape)
    assert all(t.tape is tape for t in on_tape.tensors())
    assert all(t.node is None for t in on_tape.detached().tensors())


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    ckpt = _checkpoint()
    path = tmp_path / "model.json"
    saved = save_checkpoint(
        ckpt.extractor, ckpt.heads, {"seed": 0, "config_hash": "abc123", "log_lr": ckpt.log_lr}, path
    )
    loaded = load_checkpoint(path)

    assert loaded.to_json() == saved.to_json() == ckpt.to_json()
    assert loaded.content_hash() == ckpt.content_hash()
    for name, t in ckpt.extractor.entries.items():
        np.testing.assert_array_equal(loaded.extractor.entries[name].data, t.data)
    assert loaded.log_lr == ckpt.log_lr
    assert sorted(loaded.heads) == ["desired", "harmful"]


def test_checkpoint_head_lookup():
    ckpt = _checkpoint()
    assert ckpt.head("desired").num_classes == 4
    with pytest.raises(KeyError, match="no 'other' head"):
        ckpt.head("other")


def test_content_hash_changes_with_weights():
    assert _checkpoint(seed=0).content_hash() != _checkpoint(seed=1).content_hash()


@pytest.mark.parametrize(
    ("mutate", "message"),
    [
        (lambda d: d.pop("seed"), "seed: missing"),
        (lambda d: d.update(format_version=9), "format_version"),
        (lambda d: d["architecture"].pop("dims"), "architecture.dims: missing"),
        (lambda d: d["tensors"]["extractor.layer0.weight"]["data"].pop(), "tensors.extractor.layer0.weight.data"),
        (lambda d: d["tensors"]["extractor.layer0.weight"].update(shape=[0, 4]), "shape"),
        (lambda d: d["tensors"].pop("head.harmful.bias"), "tensors.head.harmful"),
        (lambda d: d["tensors"].pop("extractor.layer1.bias"), "tensors.extractor"),
    ],
)
def test_malformed_checkpoint_names_the_field(mutate, message):
    doc = json.loads(_checkpoint().to_json())
    mutate(doc)
    with pytest.raises(CheckpointError, match=message):
        checkpoint_from_document(doc)


def test_malformed_json_file(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{not json", encoding="utf-8")
    with pytest.raises(CheckpointError, match="broken.json"):
        load_checkpoint(path)
