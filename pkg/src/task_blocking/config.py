"""Run configuration: one versioned JSON document, validated before any compute.

Module Information:
    - Filename: config.py
    - Module: config
    - Location: src/task_blocking/

Key Concepts:
    - Sections: data, model, blocking, pretrain, search, calibration; all optional
    - Unknown keys, wrong types and out-of-range values raise ConfigError naming
      the dotted field path
    - config_hash: SHA-256 of the canonical JSON of the fully resolved config;
      paths and worker counts are CLI flags and never enter it

Example file:
    {"version": 1, "blocking": {"total_steps": 500, "k_max": 4},
     "search": {"trials": 10, "n_grid": [8, 32]}}
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
import hashlib
import json
import math
import pathlib
from typing import Any

from .adversary import DEFAULT_N_GRID, SearchSpace
from .calibration import CalibrationConfig
from .data import DEFAULT_FRACTIONS, SynthConfig
from .mlac import BlockingConfig, PretrainConfig

CONFIG_VERSION = 1


class ConfigError(ValueError):
    """Invalid configuration; ``path`` is the dotted location of the problem."""

    def __init__(self, path: str, message: str) -> None:
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass(frozen=True)
class DataConfig(SynthConfig):
    hash_dim: int = 256
    split_fractions: tuple[float, ...] = DEFAULT_FRACTIONS
    split_seed: int = 0

    def __post_init__(self) -> None:
        super().__post_init__()
        if self.hash_dim < 1:
            raise ValueError(f"hash_dim must be positive, got {self.hash_dim}")
        if len(self.split_fractions) != 3 or not math.isclose(sum(self.split_fractions), 1.0):
            raise ValueError(f"split_fractions must be three numbers summing to 1, got {self.split_fractions}")


@dataclass(frozen=True)
class ModelConfig:
    hidden_dims: tuple[int, ...] = (64, 32)
    activation: str = "tanh"
    init_seed: int = 0

    def __post_init__(self) -> None:
        if not self.hidden_dims or min(self.hidden_dims) < 1:
            raise ValueError(f"hidden_dims must be nonempty positive sizes, got {self.hidden_dims}")
        if self.activation not in ("tanh", "relu"):
            raise ValueError(f"activation must be 'tanh' or 'relu', got '{self.activation}'")

    def dims(self, input_dim: int) -> tuple[int, ...]:
        return (input_dim, *self.hidden_dims)


@dataclass(frozen=True)
class SearchConfig(SearchSpace):
    trials: int = 50
    seeds: int = 6
    n_grid: tuple[int, ...] = DEFAULT_N_GRID
    sampler: str = "random"
    seed: int = 0

    def __post_init__(self) -> None:
        super().__post_init__()
        if self.trials < 1 or self.seeds < 1:
            raise ValueError("trials and seeds must be at least 1")
        if not self.n_grid or min(self.n_grid) < 1:
            raise ValueError(f"n_grid must hold positive sizes, got {self.n_grid}")
        if self.sampler not in ("random", "tpe"):
            raise ValueError(f"sampler must be 'random' or 'tpe', got '{self.sampler}'")

    @property
    def space(self) -> SearchSpace:
        return SearchSpace(self.lr_range, self.batch_sizes, self.steps, self.optimizers)


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    blocking: BlockingConfig = field(default_factory=BlockingConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    search: SearchConfig = field(default_factory=SearchConfig)
    calibration: CalibrationConfig = field(default_factory=CalibrationConfig)


SECTIONS: dict[str, type] = {f.name: f.default_factory for f in fields(RunConfig)}  # type: ignore[misc]


# ---------- Helpers ----------


def _coerce(path: str, value: Any, default: Any) -> Any:
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, int | float):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, list):
            raise ConfigError(path, f"expected a list, got {value!r}")
        if not default:
            return tuple(value)
        return tuple(_coerce(f"{path}[{i}]", v, default[0]) for i, v in enumerate(value))
    raise ConfigError(path, f"unsupported setting type {type(default).__name__}")


def _section(name: str, cls: type, raw: Any) -> Any:
    if not isinstance(raw, dict):
        raise ConfigError(name, "expected an object")
    defaults = cls()
    known = {f.name for f in fields(cls)}
    values = {}
    for key, value in raw.items():
        if key not in known:
            raise ConfigError(f"{name}.{key}", f"unknown key (expected one of {sorted(known)})")
        values[key] = _coerce(f"{name}.{key}", value, getattr(defaults, key))
    try:
        return cls(**values)
    except ValueError as exc:
        bad = next((k for k in values if k in str(exc)), None)
        raise ConfigError(f"{name}.{bad}" if bad else name, str(exc)) from exc


def parse_run_config(doc: Any) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("<root>", "expected a JSON object")
    if "version" not in doc:
        raise ConfigError("version", "missing (expected 1)")
    if doc["version"] != CONFIG_VERSION:
        raise ConfigError("version", f"unsupported version {doc['version']!r}")
    unknown = set(doc) - set(SECTIONS) - {"version"}
    if unknown:
        raise ConfigError(sorted(unknown)[0], f"unknown section (expected {sorted(SECTIONS)})")
    return RunConfig(**{name: _section(name, cls, doc[name]) for name, cls in SECTIONS.items() if name in doc})


def load_run_config(path: str | pathlib.Path | None) -> RunConfig:
    """Read and validate a config file; None yields the defaults."""
    if path is None:
        return RunConfig()
    path = pathlib.Path(path)
    if not path.exists():
        raise ConfigError(str(path), "config file not found")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(str(path), f"malformed JSON ({exc.msg} at line {exc.lineno})") from exc
    return parse_run_config(doc)


def _plain(value: Any) -> Any:
    if isinstance(value, tuple | list):
        return [_plain(v) for v in value]
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    return value


def resolved_dict(cfg: RunConfig) -> dict[str, Any]:
    """The full configuration, defaults included, as JSON-ready data."""
    return {"version": CONFIG_VERSION, **_plain(asdict(cfg))}


def config_hash(cfg: RunConfig) -> str:
    canonical = json.dumps(resolved_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


__all__ = [
    "CONFIG_VERSION",
    "ConfigError",
    "DataConfig",
    "ModelConfig",
    "RunConfig",
    "SearchConfig",
    "config_hash",
    "load_run_config",
    "parse_run_config",
    "resolved_dict",
]
