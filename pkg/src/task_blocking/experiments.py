"""Baseline training and the comparison experiments built on the attack protocol.

Module Information:
    - Filename: experiments.py
    - Module: experiments
    - Location: src/task_blocking/

Key Concepts:
    - Baselines: random init, desired-task fine-tuned, adversarial censoring, MLAC
    - blocking: harmful-task attack on every baseline, E_data against random init
    - depth: MLAC at several inner depths k_max
    - calibration: MLAC with and without head adjustment, pooled over depths
    - retention: zero-shot and few-shot desired-task accuracy of every baseline
    - Every experiment returns a pandas DataFrame and can write it as CSV
"""

from __future__ import annotations

from collections.abc import Mapping, Sequence
from dataclasses import replace
import pathlib
from typing import Literal

from loguru import logger
import pandas as pd

from .adversary import AttackReport, attack_protocol, zero_shot_accuracy
from .config import RunConfig, config_hash
from .data import TaskDataset
from .metrics import confidence_interval, few_shot_improvement
from .mlac import adversarial_censoring_train, mlac_train, pretrain
from .models import Checkpoint, init_head, init_mlp

Baseline = Literal["mlac", "ac", "finetune", "random"]
BASELINES: tuple[str, ...] = ("mlac", "ac", "finetune", "random")
DEPTHS = (0, 4, 16)


#####################################
# Baselines
#####################################


def random_checkpoint(cfg: RunConfig, train: TaskDataset, digest: str = "") -> Checkpoint:
    extractor = init_mlp(cfg.model.dims(train.input_dim), cfg.model.activation, cfg.model.init_seed)
    heads = {
        "desired": init_head(extractor.feature_dim, train.num_desired_classes, cfg.model.init_seed + 1),
        "harmful": init_head(extractor.feature_dim, train.num_harmful_classes, cfg.model.init_seed + 2),
    }
    return Checkpoint(extractor, heads, cfg.model.init_seed, digest)


def train_baseline(
    cfg: RunConfig,
    train: TaskDataset,
    baseline: Baseline,
    *,
    init: Checkpoint | None = None,
    log_path: str | pathlib.Path | None = None,
) -> Checkpoint:
    """Produce one baseline checkpoint from the train split.

    MLAC and AC start from ``init`` when given, else from the desired-task
    pretrained model.
    """
    digest = config_hash(cfg)
    if baseline not in BASELINES:
        raise ValueError(f"Unknown baseline '{baseline}'; choose from {BASELINES}")
    base = random_checkpoint(cfg, train, digest)
    if baseline == "random":
        return base

    if init is None:
        extractor, desired_head = pretrain(cfg.pretrain, base.extractor, train, base.head("desired"))
    else:
        extractor, desired_head = init.extractor, init.head("desired")
    if baseline == "finetune":
        return Checkpoint(extractor, {"desired": desired_head}, cfg.pretrain.seed, digest)

    trainer = mlac_train if baseline == "mlac" else adversarial_censoring_train
    result = trainer(
        cfg.blocking,
        extractor,
        train,
        train,
        desired_head=desired_head,
        solver=cfg.calibration,
        config_hash=digest,
        log_path=log_path,
    )
    return result.checkpoint


def train_all(cfg: RunConfig, train: TaskDataset) -> dict[str, Checkpoint]:
    """Every baseline, sharing one pretraining run."""
    ckpts = {"random": train_baseline(cfg, train, "random")}
    ckpts["finetune"] = train_baseline(cfg, train, "finetune")
    for name in ("ac", "mlac"):
        ckpts[name] = train_baseline(cfg, train, name, init=ckpts["finetune"])  # type: ignore[arg-type]
    return ckpts


#####################################
# Shared helpers
#####################################


def attack(
    cfg: RunConfig,
    checkpoint: Checkpoint,
    splits: Mapping[str, TaskDataset],
    *,
    target: Literal["harmful", "desired"] = "harmful",
    jobs: int = 1,
) -> AttackReport:
    s = cfg.search
    return attack_protocol(
        checkpoint,
        splits["val"],
        splits["eval"],
        s.n_grid,
        s.seeds,
        s.trials,
        space=s.space,
        target=target,
        sampler=s.sampler,  # type: ignore[arg-type]
        jobs=jobs,
        seed=s.seed,
        config_hash=config_hash(cfg),
    )


def summarize(report: AttackReport, **labels: object) -> list[dict[str, object]]:
    return [
        {**labels, "n": n, "mean_accuracy": mean, "half_width": half}
        for n, (mean, half) in report.summary().items()
    ]


def _finish(frame: pd.DataFrame, out: str | pathlib.Path | None, name: str) -> pd.DataFrame:
    if out is not None:
        path = pathlib.Path(out)
        path.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(path, index=False, lineterminator="\n")
        logger.info(f"{name} experiment written to {path}")
    return frame


#####################################
# Experiments
#####################################


def blocking_experiment(
    cfg: RunConfig,
    splits: Mapping[str, TaskDataset],
    *,
    jobs: int = 1,
    out: str | pathlib.Path | None = None,
) -> pd.DataFrame:
    """Harmful-task attack on every baseline, with E_data against random init."""
    ckpts = train_all(cfg, splits["train"])
    reports = {name: attack(cfg, ckpt, splits, jobs=jobs) for name, ckpt in ckpts.items()}
    rows = []
    for name, report in reports.items():
        e_data = few_shot_improvement(report, reports["random"]).e_data_n
        for row in summarize(report, model=name):
            rows.append({**row, "e_data_n": e_data[row["n"]]})  # type: ignore[index]
    return _finish(pd.DataFrame(rows), out, "blocking")


def depth_experiment(
    cfg: RunConfig,
    splits: Mapping[str, TaskDataset],
    depths: Sequence[int] = DEPTHS,
    *,
    jobs: int = 1,
    out: str | pathlib.Path | None = None,
) -> pd.DataFrame:
    """Post-attack harmful accuracy of MLAC at each inner depth."""
    init = train_baseline(cfg, splits["train"], "finetune")
    rows = []
    for k in depths:
        run_cfg = replace(cfg, blocking=replace(cfg.blocking, k_max=k))
        ckpt = train_baseline(run_cfg, splits["train"], "mlac", init=init)
        rows += summarize(attack(run_cfg, ckpt, splits, jobs=jobs), k_max=k)
    return _finish(pd.DataFrame(rows), out, "depth")


def calibration_experiment(
    cfg: RunConfig,
    splits: Mapping[str, TaskDataset],
    depths: Sequence[int] = DEPTHS,
    *,
    jobs: int = 1,
    out: str | pathlib.Path | None = None,
) -> pd.DataFrame:
    """MLAC with and without head adjustment; a pooled row per setting closes the table."""
    init = train_baseline(cfg, splits["train"], "finetune")
    rows = []
    for calibrated in (False, True):
        pooled: list[float] = []
        for k in depths:
            run_cfg = replace(cfg, blocking=replace(cfg.blocking, k_max=k, calibration=calibrated))
            report = attack(run_cfg, train_baseline(run_cfg, splits["train"], "mlac", init=init), splits, jobs=jobs)
            rows += summarize(report, calibration=calibrated, k_max=k)
            pooled += [r.best_accuracy for r in report.records]
        mean, half = confidence_interval(pooled) if len(pooled) > 1 else (pooled[0], 0.0)
        rows.append({"calibration": calibrated, "k_max": "pooled", "n": "all", "mean_accuracy": mean, "half_width": half})
    return _finish(pd.DataFrame(rows), out, "calibration")


def retention_experiment(
    cfg: RunConfig,
    splits: Mapping[str, TaskDataset],
    *,
    jobs: int = 1,
    out: str | pathlib.Path | None = None,
) -> pd.DataFrame:
    """Desired-task accuracy per baseline: shipped head (n = 0) then the few-shot attack."""
    ckpts = train_all(cfg, splits["train"])
    rows = []
    for name, ckpt in ckpts.items():
        rows.append(
            {
                "model": name,
                "n": 0,
                "mean_accuracy": zero_shot_accuracy(ckpt, splits["eval"], "desired"),
                "half_width": 0.0,
            }
        )
        rows += summarize(attack(cfg, ckpt, splits, target="desired", jobs=jobs), model=name)
    return _finish(pd.DataFrame(rows), out, "retention")


EXPERIMENTS = {
    "blocking": blocking_experiment,
    "depth": depth_experiment,
    "calibration": calibration_experiment,
    "retention": retention_experiment,
}


__all__ = [
    "BASELINES",
    "EXPERIMENTS",
    "attack",
    "blocking_experiment",
    "calibration_experiment",
    "depth_experiment",
    "random_checkpoint",
    "retention_experiment",
    "summarize",
    "train_all",
    "train_baseline",
]
