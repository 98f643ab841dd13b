"""Dual-labeled datasets: synthetic generation, JSONL ingestion, batching.

Every example carries one input vector and two labels: the desired task
(think profession) and the harmful task (think gender identity). The
synthetic generator places the two tasks on disjoint blocks of the input
so tests can tell blocking apart from collateral damage to the desired
task.

Module Information:
    - Filename: data.py
    - Module: data
    - Location: src/task_blocking/

Key Concepts:
    - Synthetic layout: [desired block | harmful block | leak block]
    - Censoring: the leak block stands in for gendered pronouns; censoring
      weakens it and ties its sign to the desired class
    - Hashing vectorizer: FNV-1a 64-bit over UTF-8 tokens, modulo hash_dim
    - Every generator and loader is a pure function of (config, seed)
"""

from __future__ import annotations

from collections.abc import Iterator, Mapping
from dataclasses import dataclass, field
import json
import math
import pathlib
import re
from typing import Any, Literal

from loguru import logger
import numpy as np
import pandas as pd

Target = Literal["desired", "harmful"]
SPLITS = ("train", "val", "eval")
DEFAULT_FRACTIONS = (0.7, 0.15, 0.15)

# leak-block scale left after censoring; its sign then depends on the desired class
CENSORED_LEAK_FRACTION = 0.25

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


class DatasetError(ValueError):
    """Raised for invalid dataset contents or requests."""


#####################################
# Types
#####################################


@dataclass(frozen=True)
class Example:
    x: np.ndarray
    y_desired: int
    y_harmful: int


@dataclass(frozen=True)
class Batch:
    x: np.ndarray
    y_desired: np.ndarray
    y_harmful: np.ndarray

    def __len__(self) -> int:
        return len(self.x)

    def labels(self, target: Target) -> np.ndarray:
        return self.y_desired if target == "desired" else self.y_harmful


@dataclass(frozen=True)
class TaskDataset:
    """Immutable collection of dual-labeled examples."""

    x: np.ndarray
    y_desired: np.ndarray
    y_harmful: np.ndarray
    num_desired_classes: int
    num_harmful_classes: int
    split: str = "train"
    desired_names: tuple[Any, ...] = field(default=(), compare=False)
    harmful_names: tuple[Any, ...] = field(default=(), compare=False)

    def __post_init__(self) -> None:
        x = np.array(self.x, dtype=np.float64)
        y_d = np.array(self.y_desired, dtype=np.int64)
        y_h = np.array(self.y_harmful, dtype=np.int64)
        if x.ndim != 2 or len(x) == 0:
            raise DatasetError(f"{self.split}: expected a nonempty (n, dim) array, got {x.shape}")
        if y_d.shape != (len(x),) or y_h.shape != (len(x),):
            raise DatasetError(f"{self.split}: label arrays do not match {len(x)} examples")
        for name, y, k in (
            ("desired", y_d, self.num_desired_classes),
            ("harmful", y_h, self.num_harmful_classes),
        ):
            if y.min() < 0 or y.max() >= k:
                raise DatasetError(f"{self.split}: {name} labels outside [0, {k})")
        for arr in (x, y_d, y_h):
            arr.flags.writeable = False
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y_desired", y_d)
        object.__setattr__(self, "y_harmful", y_h)

    def __len__(self) -> int:
        return len(self.x)

    @property
    def input_dim(self) -> int:
        return self.x.shape[1]

    @property
    def examples(self) -> list[Example]:
        return [
            Example(self.x[i], int(self.y_desired[i]), int(self.y_harmful[i])) for i in range(len(self))
        ]

    def labels(self, target: Target) -> np.ndarray:
        return self.y_desired if target == "desired" else self.y_harmful

    def num_classes(self, target: Target) -> int:
        return self.num_desired_classes if target == "desired" else self.num_harmful_classes

    def take(self, indices: np.ndarray, split: str | None = None) -> TaskDataset:
        indices = np.asarray(indices, dtype=np.int64)
        return TaskDataset(
            self.x[indices],
            self.y_desired[indices],
            self.y_harmful[indices],
            self.num_desired_classes,
            self.num_harmful_classes,
            split or self.split,
            self.desired_names,
            self.harmful_names,
        )

    def batch(self, indices: np.ndarray | None = None) -> Batch:
        if indices is None:
            return Batch(self.x, self.y_desired, self.y_harmful)
        return Batch(self.x[indices], self.y_desired[indices], self.y_harmful[indices])


@dataclass(frozen=True)
class SynthConfig:
    input_dim: int = 64
    num_desired_classes: int = 4
    num_harmful_classes: int = 2
    leak_strength: float = 4.0
    censored: bool = True
    label_correlation: float = 0.0
    size: int = 4000
    seed: int = 0
    harmful_signal: float = 1.2
    desired_separation: float = 1.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.label_correlation <= 1.0:
            raise DatasetError(f"label_correlation must lie in [0, 1], got {self.label_correlation}")
        if self.leak_strength < 0:
            raise DatasetError(f"leak_strength must be nonnegative, got {self.leak_strength}")
        if self.input_dim < 3:
            raise DatasetError(f"input_dim must be at least 3, got {self.input_dim}")
        if min(self.num_desired_classes, self.num_harmful_classes) < 2:
            raise DatasetError("each task needs at least 2 classes")

    @property
    def block_dims(self) -> tuple[int, int, int]:
        """Sizes of the (desired, harmful, leak) blocks."""
        desired = max(1, self.input_dim // 4)
        leak = max(1, min(4, self.input_dim // 8))
        return desired, self.input_dim - desired - leak, leak


#####################################
# Synthetic generation
#####################################


def _centered_prototypes(rng: np.random.Generator, classes: int, dim: int, norm: float) -> np.ndarray:
    raw = rng.standard_normal((classes, dim))
    if dim > 1:
        raw = raw - raw.mean(axis=0, keepdims=True)
    lengths = np.linalg.norm(raw, axis=1, keepdims=True)
    return raw / np.where(lengths > 0, lengths, 1.0) * norm


def gen_synthetic(cfg: SynthConfig) -> TaskDataset:
    """Generate a dual-labeled dataset, deterministic in ``cfg.seed``."""
    if cfg.size < max(cfg.num_desired_classes, cfg.num_harmful_classes):
        raise DatasetError(f"size {cfg.size} is smaller than the number of classes")
    rng = np.random.default_rng(cfg.seed)
    d_dim, h_dim, l_dim = cfg.block_dims

    y_d = rng.integers(0, cfg.num_desired_classes, cfg.size)
    tied = rng.random(cfg.size) < cfg.label_correlation
    y_h = np.where(tied, y_d % cfg.num_harmful_classes, rng.integers(0, cfg.num_harmful_classes, cfg.size))

    desired_protos = rng.standard_normal((cfg.num_desired_classes, d_dim)) * cfg.desired_separation
    harmful_protos = _centered_prototypes(rng, cfg.num_harmful_classes, h_dim, cfg.harmful_signal)
    leak_protos = _centered_prototypes(rng, cfg.num_harmful_classes, l_dim, cfg.leak_strength)
    noise = rng.standard_normal((cfg.size, cfg.input_dim))

    leak = leak_protos[y_h]
    if cfg.censored:
        sign = np.where(y_d % 2 == 0, 1.0, -1.0)[:, None]
        leak = CENSORED_LEAK_FRACTION * sign * leak

    x = np.concatenate([desired_protos[y_d], harmful_protos[y_h], leak], axis=1) + noise
    return TaskDataset(x, y_d, y_h, cfg.num_desired_classes, cfg.num_harmful_classes, "train")


def split_dataset(
    ds: TaskDataset, fractions: tuple[float, ...] = DEFAULT_FRACTIONS, seed: int = 0
) -> dict[str, TaskDataset]:
    """Partition indices into train/val/eval; the splits are disjoint by construction."""
    if len(fractions) != 3 or min(fractions) < 0 or not math.isclose(sum(fractions), 1.0):
        raise DatasetError(f"split fractions must be three nonnegative numbers summing to 1, got {fractions}")
    order = np.random.default_rng(seed).permutation(len(ds))
    n_train = int(math.floor(fractions[0] * len(ds)))
    n_val = int(math.floor(fractions[1] * len(ds)))
    bounds = {"train": (0, n_train), "val": (n_train, n_train + n_val), "eval": (n_train + n_val, len(ds))}
    out = {}
    for name, (lo, hi) in bounds.items():
        if hi <= lo:
            raise DatasetError(f"split '{name}' would be empty for {len(ds)} examples")
        out[name] = ds.take(order[lo:hi], split=name)
    return out


#####################################
# Text ingestion
#####################################

_TOKEN_SPLIT = re.compile(r"[\W_]+")


def tokenize(text: str) -> list[str]:
    """Lowercase, then split on whitespace and punctuation."""
    return [t for t in _TOKEN_SPLIT.split(text.lower()) if t]


def fnv1a_64(token: str) -> int:
    h = FNV_OFFSET
    for byte in token.encode("utf-8"):
        h ^= byte
        h = (h * FNV_PRIME) & _MASK64
    return h


def hash_vector(text: str, hash_dim: int) -> np.ndarray:
    """L2-normalized hashed bag of words; empty text gives the zero vector."""
    counts = np.zeros(hash_dim)
    for token in tokenize(text):
        counts[fnv1a_64(token) % hash_dim] += 1.0
    norm = np.linalg.norm(counts)
    return counts / norm if norm > 0 else counts


def _read_rows(path: pathlib.Path) -> list[tuple[int, dict[str, Any]]]:
    rows = []
    with path.open(encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{path.name} line {line_no}: invalid JSON ({exc.msg})") from exc
            if not isinstance(row, dict):
                raise DatasetError(f"{path.name} line {line_no}: expected a JSON object")
            rows.append((line_no, row))
    if not rows:
        raise DatasetError(f"{path.name}: file is empty")
    return rows


def _check_fields(path: pathlib.Path, line_no: int, row: Mapping[str, Any], fields: tuple[str, ...]) -> None:
    for name in fields:
        if name not in row:
            raise DatasetError(f"{path.name} line {line_no}: missing field '{name}'")


def load_jsonl(path: str | pathlib.Path, hash_dim: int) -> TaskDataset:
    """Read ``text``/``desired_label``/``harmful_label`` rows into hashed vectors."""
    if hash_dim < 1:
        raise DatasetError(f"hash_dim must be positive, got {hash_dim}")
    path = pathlib.Path(path)
    desired_ids: dict[Any, int] = {}
    harmful_ids: dict[Any, int] = {}
    xs, y_d, y_h = [], [], []
    for line_no, row in _read_rows(path):
        _check_fields(path, line_no, row, ("text", "desired_label", "harmful_label"))
        xs.append(hash_vector(str(row["text"]), hash_dim))
        y_d.append(desired_ids.setdefault(_label_key(row["desired_label"]), len(desired_ids)))
        y_h.append(harmful_ids.setdefault(_label_key(row["harmful_label"]), len(harmful_ids)))
    logger.info(f"Loaded {len(xs)} texts from {path.name} into {hash_dim} hash buckets")
    return TaskDataset(
        np.stack(xs),
        np.array(y_d),
        np.array(y_h),
        max(2, len(desired_ids)),
        max(2, len(harmful_ids)),
        "train",
        tuple(desired_ids),
        tuple(harmful_ids),
    )


def _label_key(value: Any) -> Any:
    return json.dumps(value) if isinstance(value, list | dict) else value


_PRONOUN = re.compile(r"\b(he|she|him|her|his|hers)\b(?=(\s+([A-Za-z]+))?)", re.IGNORECASE)
_REPLACEMENT = {"he": "they", "she": "they", "him": "they", "his": "their", "hers": "their"}
# words after "her" that mark it as an object rather than a determiner
_NOT_A_NOUN = frozenset(
    "a an the and or but nor so to in on at by of for from with into onto about as than that this "
    "these those again back up down out off away too also".split()
)


def _replace_pronoun(match: re.Match[str]) -> str:
    word = match.group(1).lower()
    if word != "her":
        return _REPLACEMENT[word]
    following = match.group(3)
    return "their" if following and following.lower() not in _NOT_A_NOUN else "they"


def censor_pronouns(text: str) -> str:
    """Replace gendered pronouns with "they"/"their"; everything else is untouched.

    "her" becomes "their" when a word other than a function word follows it
    on the same clause ("her thesis") and "they" otherwise ("met her", "gave her the book").
    """
    return _PRONOUN.sub(_replace_pronoun, text)


def prepare_bios(frame: pd.DataFrame, *, censor: bool = True) -> pd.DataFrame:
    """Clean a raw biography table: trim text, drop empty and duplicate rows, censor."""
    required = ["text", "desired_label", "harmful_label"]
    missing = [c for c in required if c not in frame.columns]
    if missing:
        raise DatasetError(f"Missing expected columns: {missing}")

    df = frame.copy()
    df["text"] = df["text"].astype(str).str.strip()
    before = len(df)
    df = df[df["text"].ne("") & df["desired_label"].notna() & df["harmful_label"].notna()]
    logger.info(f"Dropped {before - len(df)} rows with empty text or missing labels.")

    before = len(df)
    df = df.drop_duplicates(subset=["text", "desired_label", "harmful_label"])
    logger.info(f"Duplicates removed: {before - len(df)}")

    if censor:
        df["text"] = df["text"].map(censor_pronouns)
    return df[required + [c for c in df.columns if c not in required]].reset_index(drop=True)


#####################################
# Sampling
#####################################


def subsample(ds: TaskDataset, n: int, seed: int) -> TaskDataset:
    """Uniform draw of ``n`` examples without replacement."""
    if n < 1 or n > len(ds):
        raise DatasetError(f"cannot subsample {n} of {len(ds)} examples")
    picks = np.random.default_rng(seed).choice(len(ds), size=n, replace=False)
    return ds.take(picks)


def batches(
    ds: TaskDataset, batch_size: int, seed: int, *, epochs: int | None = 1
) -> Iterator[Batch]:
    """Shuffled minibatches, final short batch included; ``epochs=None`` streams forever."""
    if batch_size < 1:
        raise DatasetError(f"batch_size must be at least 1, got {batch_size}")
    rng = np.random.default_rng(seed)
    epoch = 0
    while epochs is None or epoch < epochs:
        order = rng.permutation(len(ds))
        for start in range(0, len(ds), batch_size):
            yield ds.batch(order[start : start + batch_size])
        epoch += 1


#####################################
# Export / import of vector datasets
#####################################


def write_jsonl(splits: Mapping[str, TaskDataset], path: str | pathlib.Path) -> pathlib.Path:
    """Write vector rows (``x``, labels, ``split``) in split order."""
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as f:
        for name, ds in splits.items():
            for i in range(len(ds)):
                row = {
                    "x": [float(v) for v in ds.x[i]],
                    "desired_label": int(ds.y_desired[i]),
                    "harmful_label": int(ds.y_harmful[i]),
                    "split": name,
                }
                f.write(json.dumps(row, separators=(",", ":")) + "\n")
    return path


def read_dataset(path: str | pathlib.Path) -> dict[str, TaskDataset]:
    """Read vector rows written by ``write_jsonl``; labels are kept as given."""
    path = pathlib.Path(path)
    parsed = []
    for line_no, row in _read_rows(path):
        _check_fields(path, line_no, row, ("x", "desired_label", "harmful_label"))
        parsed.append((row.get("split", "train"), row["x"], int(row["desired_label"]), int(row["harmful_label"])))
    dims = {len(p[1]) for p in parsed}
    if len(dims) != 1:
        raise DatasetError(f"{path.name}: inconsistent x dimensions {sorted(dims)}")
    k_d = max(2, 1 + max(p[2] for p in parsed))
    k_h = max(2, 1 + max(p[3] for p in parsed))
    out: dict[str, TaskDataset] = {}
    for name in dict.fromkeys(p[0] for p in parsed):
        rows = [p for p in parsed if p[0] == name]
        out[name] = TaskDataset(
            np.array([p[1] for p in rows]), np.array([p[2] for p in rows]), np.array([p[3] for p in rows]), k_d, k_h, name
        )
    return out


def read_splits(
    path: str | pathlib.Path,
    *,
    hash_dim: int = 256,
    seed: int = 0,
    fractions: tuple[float, ...] = DEFAULT_FRACTIONS,
) -> dict[str, TaskDataset]:
    """Load either file flavor and return train/val/eval splits."""
    path = pathlib.Path(path)
    _, first = _read_rows(path)[0]
    if "text" in first:
        return split_dataset(load_jsonl(path, hash_dim), fractions, seed)
    found = read_dataset(path)
    if set(SPLITS) <= set(found):
        return {name: found[name] for name in SPLITS}
    if len(found) == 1:
        return split_dataset(next(iter(found.values())), fractions, seed)
    raise DatasetError(f"{path.name}: expected splits {SPLITS}, found {sorted(found)}")


def dataset_summary(splits: Mapping[str, TaskDataset]) -> pd.DataFrame:
    """Size and class balance per split."""
    records = []
    for name, ds in splits.items():
        desired = np.bincount(ds.y_desired, minlength=ds.num_desired_classes) / len(ds)
        harmful = np.bincount(ds.y_harmful, minlength=ds.num_harmful_classes) / len(ds)
        records.append(
            {
                "split": name,
                "size": len(ds),
                "desired_balance": " ".join(f"{p:.2f}" for p in desired),
                "harmful_balance": " ".join(f"{p:.2f}" for p in harmful),
            }
        )
    return pd.DataFrame.from_records(records)


__all__ = [
    "Batch",
    "DatasetError",
    "Example",
    "SynthConfig",
    "TaskDataset",
    "batches",
    "censor_pronouns",
    "dataset_summary",
    "fnv1a_64",
    "gen_synthetic",
    "hash_vector",
    "load_jsonl",
    "prepare_bios",
    "read_dataset",
    "read_splits",
    "split_dataset",
    "subsample",
    "tokenize",
    "write_jsonl",
]
