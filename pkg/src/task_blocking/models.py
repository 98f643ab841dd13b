"""Feature extractor, task heads, adversarial parameters, and checkpoints.

The extractor is an MLP ``x -> act(x W0 + b0) -> act(. W1 + b1) -> ...``
whose last activation is the shared feature output. Heads are affine maps
from features to class logits. All parameters are ``autodiff.Tensor``
values so the same code runs on and off a tape.

Checkpoints are one JSON document:

    {"format_version": 1, "seed": ..., "config_hash": ...,
     "architecture": {"dims": [...], "activation": "tanh"},
     "tensors": {name: {"shape": [...], "data": [...]}}}

Floats are written with Python's shortest round-trip repr, so a save/load
cycle is bit-exact.
"""

from __future__ import annotations

from collections.abc import Callable, Mapping
from dataclasses import dataclass, field
import hashlib
import json
import math
import pathlib
from typing import Any

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tape, Tensor

FORMAT_VERSION = 1
DEFAULT_INNER_LR = 1e-2

ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {"tanh": ad.tanh, "relu": ad.relu}


class CheckpointError(ValueError):
    """Raised for malformed checkpoint files; the message names the field."""


# ---------- parameter containers ----------


def _layer_names(depth: int) -> list[str]:
    names = []
    for i in range(depth):
        names += [f"layer{i}.weight", f"layer{i}.bias"]
    return names


@dataclass(frozen=True)
class ParameterSet:
    """Named extractor tensors plus the architecture they realize."""

    entries: dict[str, Tensor]
    dims: tuple[int, ...]
    activation: str = "tanh"

    def __post_init__(self) -> None:
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"Unknown activation '{self.activation}'")
        expected = _layer_names(self.depth)
        if list(self.entries) != expected:
            raise ValueError(f"Parameter names {list(self.entries)} do not match {expected}")
        for i, (fan_in, fan_out) in enumerate(zip(self.dims, self.dims[1:])):
            w, b = self.layer(i)
            if w.shape != (fan_in, fan_out) or b.shape != (fan_out,):
                raise ValueError(
                    f"layer{i}: shapes {w.shape}/{b.shape} do not match dims {self.dims}"
                )

    @property
    def depth(self) -> int:
        return len(self.dims) - 1

    @property
    def input_dim(self) -> int:
        return self.dims[0]

    @property
    def feature_dim(self) -> int:
        return self.dims[-1]

    def layer(self, i: int) -> tuple[Tensor, Tensor]:
        return self.entries[f"layer{i}.weight"], self.entries[f"layer{i}.bias"]

    def tensors(self) -> list[Tensor]:
        return list(self.entries.values())

    def map(self, fn: Callable[[str, Tensor], Tensor]) -> ParameterSet:
        return ParameterSet({k: fn(k, v) for k, v in self.entries.items()}, self.dims, self.activation)

    def zip_map(self, other: ParameterSet, fn: Callable[[Tensor, Tensor], Tensor]) -> ParameterSet:
        if list(other.entries) != list(self.entries) or other.dims != self.dims:
            raise ValueError("ParameterSets differ in names or architecture")
        return self.map(lambda k, v: fn(v, other.entries[k]))

    def __add__(self, other: ParameterSet) -> ParameterSet:
        return self.zip_map(other, ad.add)

    def __sub__(self, other: ParameterSet) -> ParameterSet:
        return self.zip_map(other, ad.sub)

    def scaled(self, factor: Tensor | float) -> ParameterSet:
        return self.map(lambda _, v: v * factor)

    def on_tape(self, tape: Tape) -> ParameterSet:
        """Copy every tensor onto ``tape`` as a fresh leaf."""
        return self.map(lambda _, v: tape.variable(v.data))

    def detached(self) -> ParameterSet:
        return self.map(lambda _, v: v.detach())

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.entries.items()}

    @classmethod
    def from_arrays(
        cls, arrays: Mapping[str, np.ndarray], dims: tuple[int, ...], activation: str = "tanh"
    ) -> ParameterSet:
        return cls({k: Tensor(v) for k, v in arrays.items()}, tuple(dims), activation)


@dataclass(frozen=True)
class Head:
    """Affine map from features to class logits."""

    weight: Tensor
    bias: Tensor

    def __post_init__(self) -> None:
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise ValueError(f"Head shapes {self.weight.shape}/{self.bias.shape} are inconsistent")

    @property
    def feature_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def num_classes(self) -> int:
        return self.weight.shape[1]

    def tensors(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def on_tape(self, tape: Tape) -> Head:
        return Head(tape.variable(self.weight.data), tape.variable(self.bias.data))

    def detached(self) -> Head:
        return Head(self.weight.detach(), self.bias.detach())


@dataclass(frozen=True)
class AdversarialParams:
    """The inner-loop adversary: harmful head and learning rate exp(log_lr)."""

    head: Head
    log_lr: Tensor = field(default_factory=lambda: Tensor(math.log(DEFAULT_INNER_LR)))

    @property
    def inner_lr(self) -> Tensor:
        return ad.exp(self.log_lr)

    def tensors(self) -> list[Tensor]:
        return [*self.head.tensors(), self.log_lr]

    def on_tape(self, tape: Tape) -> AdversarialParams:
        return AdversarialParams(self.head.on_tape(tape), tape.variable(self.log_lr.data))

    def detached(self) -> AdversarialParams:
        return AdversarialParams(self.head.detached(), self.log_lr.detach())


# ---------- initialization ----------


def init_mlp(dims: list[int] | tuple[int, ...], activation: str = "tanh", seed: int = 0) -> ParameterSet:
    """Gaussian weights scaled by 1/sqrt(fan_in), zero biases, deterministic in seed."""
    dims = tuple(int(d) for d in dims)
    if len(dims) < 2:
        raise ValueError(f"init_mlp needs at least an input and an output size, got {list(dims)}")
    if min(dims) < 1:
        raise ValueError(f"Layer sizes must be positive, got {list(dims)}")
    rng = np.random.default_rng(seed)
    arrays: dict[str, np.ndarray] = {}
    for i, (fan_in, fan_out) in enumerate(zip(dims, dims[1:])):
        arrays[f"layer{i}.weight"] = rng.standard_normal((fan_in, fan_out)) / math.sqrt(fan_in)
        arrays[f"layer{i}.bias"] = np.zeros(fan_out)
    return ParameterSet.from_arrays(arrays, dims, activation)


def init_head(feature_dim: int, num_classes: int, seed: int) -> Head:
    rng = np.random.default_rng(seed)
    weight = rng.standard_normal((feature_dim, num_classes)) / math.sqrt(feature_dim)
    return Head(Tensor(weight), Tensor(np.zeros(num_classes)))


def init_adversary(
    feature_dim: int, num_classes: int, seed: int, inner_lr: float = DEFAULT_INNER_LR
) -> AdversarialParams:
    return AdversarialParams(init_head(feature_dim, num_classes, seed), Tensor(math.log(inner_lr)))


# ---------- forward pass ----------


def features(params: ParameterSet, x: Tensor) -> Tensor:
    """Extractor output of shape (batch, feature_dim)."""
    if x.ndim != 2 or x.shape[1] != params.input_dim:
        raise ShapeError(f"features: input shape {x.shape} does not match input_dim {params.input_dim}")
    act = ACTIVATIONS[params.activation]
    h = x
    for i in range(params.depth):
        w, b = params.layer(i)
        h = act(ad.add(ad.matmul(h, w), b))
    return h


def head_logits(head: Head, feats: Tensor) -> Tensor:
    if feats.ndim != 2 or feats.shape[1] != head.feature_dim:
        raise ShapeError(f"head_logits: features {feats.shape} do not match head {head.weight.shape}")
    return ad.add(ad.matmul(feats, head.weight), head.bias)


def nll(logits: Tensor, labels: Any) -> Tensor:
    """Mean negative log-likelihood of integer labels under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    num_classes = logits.shape[-1]
    if labels.shape != logits.shape[:-1]:
        raise ShapeError(f"nll: labels shape {labels.shape} does not match logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"nll: labels must lie in [0, {num_classes}), got {labels.min()}..{labels.max()}")
    return ad.neg(ad.mean(ad.gather(ad.log_softmax(logits), labels)))


def predict(params: ParameterSet, head: Head, x: np.ndarray) -> np.ndarray:
    """Class predictions, evaluated off-tape."""
    logits = head_logits(head, features(params.detached(), Tensor(x)))
    return np.argmax(logits.data, axis=-1)


def accuracy(params: ParameterSet, head: Head, x: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        return 0.0
    return float(np.mean(predict(params, head.detached(), x) == labels))


# ---------- checkpoints ----------


@dataclass(frozen=True)
class Checkpoint:
    """A published model: extractor, named heads, optional adversary rate, metadata."""

    extractor: ParameterSet
    heads: dict[str, Head]
    seed: int
    config_hash: str
    log_lr: float | None = None

    def head(self, name: str) -> Head:
        try:
            return self.heads[name]
        except KeyError:
            raise KeyError(f"Checkpoint has no '{name}' head (has {sorted(self.heads)})") from None

    def to_document(self) -> dict[str, Any]:
        tensors: dict[str, Tensor] = {f"extractor.{k}": v for k, v in self.extractor.entries.items()}
        for name, head in self.heads.items():
            tensors[f"head.{name}.weight"] = head.weight
            tensors[f"head.{name}.bias"] = head.bias
        if self.log_lr is not None:
            tensors["adversary.log_lr"] = Tensor(self.log_lr)
        return {
            "format_version": FORMAT_VERSION,
            "seed": int(self.seed),
            "config_hash": self.config_hash,
            "architecture": {
                "dims": list(self.extractor.dims),
                "activation": self.extractor.activation,
            },
            "tensors": {
                name: {"shape": list(t.shape), "data": [float(v) for v in t.values]}
                for name, t in tensors.items()
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_document(), separators=(",", ":"), allow_nan=False) + "\n"

    def content_hash(self) -> str:
        return hashlib.sha256(self.to_json().encode("utf-8")).hexdigest()


def save_checkpoint(
    params: ParameterSet,
    heads: Mapping[str, Head],
    metadata: Mapping[str, Any],
    path: str | pathlib.Path,
) -> Checkpoint:
    """Write a checkpoint; ``metadata`` carries ``seed``, ``config_hash`` and optionally ``log_lr``."""
    checkpoint = Checkpoint(
        extractor=params.detached(),
        heads={k: v.detached() for k, v in heads.items()},
        seed=int(metadata.get("seed", 0)),
        config_hash=str(metadata.get("config_hash", "")),
        log_lr=metadata.get("log_lr"),
    )
    write_checkpoint(checkpoint, path)
    return checkpoint


def write_checkpoint(checkpoint: Checkpoint, path: str | pathlib.Path) -> pathlib.Path:
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(checkpoint.to_json(), encoding="utf-8")
    return path


def _require(doc: Mapping[str, Any], key: str, kind: type | tuple[type, ...], where: str) -> Any:
    if key not in doc:
        raise CheckpointError(f"{where}{key}: missing")
    value = doc[key]
    if not isinstance(value, kind) or isinstance(value, bool) and kind is not bool:
        raise CheckpointError(f"{where}{key}: expected {kind}, got {type(value).__name__}")
    return value


def _parse_tensor(name: str, entry: Any) -> np.ndarray:
    where = f"tensors.{name}."
    if not isinstance(entry, dict):
        raise CheckpointError(f"tensors.{name}: expected an object")
    shape = _require(entry, "shape", list, where)
    data = _require(entry, "data", list, where)
    if not all(isinstance(d, int) and not isinstance(d, bool) and d > 0 for d in shape):
        raise CheckpointError(f"{where}shape: dimensions must be positive integers, got {shape}")
    expected = math.prod(shape)
    if len(data) != expected:
        raise CheckpointError(f"{where}data: expected {expected} values, got {len(data)}")
    if not all(isinstance(v, int | float) and not isinstance(v, bool) for v in data):
        raise CheckpointError(f"{where}data: values must be numbers")
    return np.asarray(data, dtype=np.float64).reshape(shape)


def checkpoint_from_document(doc: Any) -> Checkpoint:
    if not isinstance(doc, dict):
        raise CheckpointError("document: expected a JSON object")
    version = _require(doc, "format_version", int, "")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"format_version: unsupported version {version}")
    seed = _require(doc, "seed", int, "")
    config_hash = _require(doc, "config_hash", str, "")
    arch = _require(doc, "architecture", dict, "")
    dims = _require(arch, "dims", list, "architecture.")
    activation = _require(arch, "activation", str, "architecture.")
    raw = _require(doc, "tensors", dict, "")
    arrays = {name: _parse_tensor(name, entry) for name, entry in raw.items()}

    extractor = {k.removeprefix("extractor."): v for k, v in arrays.items() if k.startswith("extractor.")}
    try:
        params = ParameterSet.from_arrays(extractor, tuple(dims), activation)
    except (ValueError, TypeError) as exc:
        raise CheckpointError(f"tensors.extractor: {exc}") from exc

    heads: dict[str, Head] = {}
    head_names = sorted({k.split(".")[1] for k in arrays if k.startswith("head.")})
    for name in head_names:
        w, b = arrays.get(f"head.{name}.weight"), arrays.get(f"head.{name}.bias")
        if w is None or b is None:
            raise CheckpointError(f"tensors.head.{name}: needs both weight and bias")
        try:
            heads[name] = Head(Tensor(w), Tensor(b))
        except ValueError as exc:
            raise CheckpointError(f"tensors.head.{name}: {exc}") from exc
        if heads[name].feature_dim != params.feature_dim:
            raise CheckpointError(
                f"tensors.head.{name}.weight: feature dim {heads[name].feature_dim} "
                f"does not match extractor output {params.feature_dim}"
            )

    log_lr = arrays.get("adversary.log_lr")
    return Checkpoint(
        extractor=params,
        heads=heads,
        seed=seed,
        config_hash=config_hash,
        log_lr=None if log_lr is None else float(log_lr.reshape(-1)[0]),
    )


def load_checkpoint(path: str | pathlib.Path) -> Checkpoint:
    path = pathlib.Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path.name}: malformed JSON ({exc.msg} at char {exc.pos})") from exc
    return checkpoint_from_document(doc)


__all__ = [
    "ACTIVATIONS",
    "AdversarialParams",
    "Checkpoint",
    "CheckpointError",
    "Head",
    "ParameterSet",
    "accuracy",
    "checkpoint_from_document",
    "features",
    "head_logits",
    "init_adversary",
    "init_head",
    "init_mlp",
    "load_checkpoint",
    "nll",
    "predict",
    "save_checkpoint",
    "write_checkpoint",
]
