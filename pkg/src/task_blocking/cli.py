"""Command-line entry point: data generation, training, attack, reporting.

Module Information:
    - Filename: cli.py
    - Module: cli
    - Location: src/task_blocking/

Commands:
    - gen-data       write a synthetic dataset (train/val/eval) as JSONL
    - prepare-bios   clean and censor a biography CSV into text JSONL
    - train          produce an mlac / ac / finetune / random checkpoint
    - attack         run the fine-tuning attack protocol on a checkpoint
    - report         few-shot improvement CSV from a model and a random-init report
    - experiment     blocking / depth / calibration / retention comparisons
    - compute-cost   steps to reach an accuracy threshold, model vs random init

Exit codes: 0 success, 1 runtime failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
from collections.abc import Sequence
from dataclasses import replace
import json
import pathlib

import pandas as pd

from . import __version__
from .adversary import AdaptationProcedure, ReportError, load_report
from .config import ConfigError, RunConfig, config_hash, load_run_config, resolved_dict
from .data import dataset_summary, gen_synthetic, prepare_bios, read_splits, split_dataset, write_jsonl
from .experiments import BASELINES, EXPERIMENTS, attack, train_baseline
from .metrics import compute_cost_improvement, few_shot_improvement
from .models import load_checkpoint, write_checkpoint
from .utils_logger import init_logger, logger

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2


# ---------- Helpers ----------


def _splits(cfg: RunConfig, path: str):
    return read_splits(
        path,
        hash_dim=cfg.data.hash_dim,
        seed=cfg.data.split_seed,
        fractions=cfg.data.split_fractions,
    )


def _with_search_overrides(cfg: RunConfig, args: argparse.Namespace) -> RunConfig:
    overrides = {
        key: value
        for key, value in (
            ("n_grid", tuple(args.n_grid) if args.n_grid else None),
            ("seeds", args.seeds),
            ("trials", args.trials),
            ("sampler", args.sampler),
        )
        if value is not None
    }
    if not overrides:
        return cfg
    try:
        return replace(cfg, search=replace(cfg.search, **overrides))
    except ValueError as exc:
        raise ConfigError("search", str(exc)) from exc


# ---------- Commands ----------


def cmd_gen_data(cfg: RunConfig, args: argparse.Namespace) -> int:
    splits = split_dataset(gen_synthetic(cfg.data), cfg.data.split_fractions, cfg.data.split_seed)
    path = write_jsonl(splits, args.out)
    summary = dataset_summary(splits)
    print(summary.to_string(index=False))
    logger.info(f"Wrote {sum(len(s) for s in splits.values())} examples to {path}")
    return EXIT_OK


def cmd_prepare_bios(cfg: RunConfig, args: argparse.Namespace) -> int:
    frame = prepare_bios(pd.read_csv(args.input), censor=not args.no_censor)
    out = pathlib.Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    frame[["text", "desired_label", "harmful_label"]].to_json(out, orient="records", lines=True, force_ascii=False)
    logger.info(f"Wrote {len(frame)} cleaned biographies to {out}")
    return EXIT_OK


def cmd_train(cfg: RunConfig, args: argparse.Namespace) -> int:
    splits = _splits(cfg, args.data)
    out = pathlib.Path(args.out)
    log_path = args.log or out.with_name(f"{out.stem}_log.csv")
    init = load_checkpoint(args.init) if args.init else None
    ckpt = train_baseline(cfg, splits["train"], args.baseline, init=init, log_path=log_path)
    write_checkpoint(ckpt, out)
    logger.info(f"{args.baseline} checkpoint written to {out} (sha256 {ckpt.content_hash()[:12]})")
    return EXIT_OK


def cmd_attack(cfg: RunConfig, args: argparse.Namespace) -> int:
    cfg = _with_search_overrides(cfg, args)
    splits = _splits(cfg, args.data)
    ckpt = load_checkpoint(args.checkpoint)
    report = attack(cfg, ckpt, splits, target=args.target, jobs=args.jobs)
    if args.against:
        report = report.with_e_data(few_shot_improvement(report, load_report(args.against)).e_data_n)
    path = report.write(args.out, args.csv)
    logger.info(f"Attack report written to {path}")
    return EXIT_OK


def cmd_report(cfg: RunConfig, args: argparse.Namespace) -> int:
    model, random = load_report(args.model), load_report(args.random)
    if model.config_hash != random.config_hash:
        raise ReportError(
            f"config hashes differ: {model.config_hash[:12]} vs {random.config_hash[:12]}; "
            "rerun both attacks with the same configuration"
        )
    curve = few_shot_improvement(model, random)
    curve.write_csv(args.out)
    print(curve.frame.to_string(index=False))
    logger.info(f"E_data = {curve.e_data:+.4f}; curve written to {args.out}")
    return EXIT_OK


def cmd_experiment(cfg: RunConfig, args: argparse.Namespace) -> int:
    cfg = _with_search_overrides(cfg, args)
    frame = EXPERIMENTS[args.name](cfg, _splits(cfg, args.data), jobs=args.jobs, out=args.out)
    print(frame.to_string(index=False))
    return EXIT_OK


def cmd_compute_cost(cfg: RunConfig, args: argparse.Namespace) -> int:
    splits = _splits(cfg, args.data)
    model, random = load_checkpoint(args.model), load_checkpoint(args.random)
    proc = AdaptationProcedure(
        args.optimizer,
        args.lr,
        max(1, args.step_cap),
        args.batch_size,
        tuple(False for _ in range(model.extractor.depth)),
    )
    report = compute_cost_improvement(
        model, random, proc, splits["train"], splits["eval"], args.p, args.step_cap, target=args.target
    )
    report.write_csv(args.out)
    print(report.frame().to_string(index=False))
    logger.info(f"Compute cost improvement @p={args.p}: {report.improvement} steps")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "prepare-bios": cmd_prepare_bios,
    "train": cmd_train,
    "attack": cmd_attack,
    "report": cmd_report,
    "experiment": cmd_experiment,
    "compute-cost": cmd_compute_cost,
}


# ---------- Parser ----------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration (defaults when omitted)")
    common.add_argument("--print-config", action="store_true", help="print the resolved configuration and exit")
    common.add_argument("--log-level", default=None, help="loguru level; defaults to $TASK_BLOCKING_LOG_LEVEL or INFO")

    search = argparse.ArgumentParser(add_help=False)
    search.add_argument("--n-grid", type=int, nargs="+", help="dataset sizes for the attack")
    search.add_argument("--seeds", type=int, help="searches per dataset size")
    search.add_argument("--trials", type=int, help="fine-tuning trials per search")
    search.add_argument("--sampler", choices=["random", "tpe"], help="procedure sampler")
    search.add_argument("--jobs", type=int, default=1, help="parallel worker processes (results do not change)")

    parser = argparse.ArgumentParser(prog="task-blocking", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--out", required=True)

    p = sub.add_parser("prepare-bios", parents=[common], help="clean a biography CSV into JSONL")
    p.add_argument("--input", required=True, help="CSV with text, desired_label, harmful_label columns")
    p.add_argument("--out", required=True)
    p.add_argument("--no-censor", action="store_true", help="keep gendered pronouns")

    p = sub.add_parser("train", parents=[common], help="train a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--baseline", choices=BASELINES, default="mlac")
    p.add_argument("--init", help="checkpoint to start mlac/ac from instead of pretraining")
    p.add_argument("--out", required=True)
    p.add_argument("--log", help="training log CSV (default: <out>_log.csv)")

    p = sub.add_parser("attack", parents=[common, search], help="fine-tuning attack on a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--target", choices=["harmful", "desired"], default="harmful")
    p.add_argument("--against", help="random-init report; attaches per-n E_data")
    p.add_argument("--out", required=True, help="report JSON")
    p.add_argument("--csv", help="companion CSV (default: report path with .csv)")

    p = sub.add_parser("report", parents=[common], help="few-shot improvement CSV")
    p.add_argument("--model", required=True, help="attack report of the model")
    p.add_argument("--random", required=True, help="attack report of random init")
    p.add_argument("--out", required=True)

    p = sub.add_parser("experiment", parents=[common, search], help="run a comparison experiment")
    p.add_argument("name", choices=sorted(EXPERIMENTS))
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("compute-cost", parents=[common], help="steps to reach accuracy p")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--random", required=True)
    p.add_argument("--p", type=float, required=True)
    p.add_argument("--step-cap", type=int, default=1000)
    p.add_argument("--optimizer", choices=["sgd", "adam"], default="adam")
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--target", choices=["harmful", "desired"], default="desired")
    p.add_argument("--out", required=True)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    """Parse arguments, run one command, and return its exit code."""
    args = build_parser().parse_args(argv)
    init_logger(args.log_level)
    try:
        cfg = load_run_config(args.config)
        if args.print_config:
            print(json.dumps(resolved_dict(cfg), indent=2, sort_keys=True))
            print(f"config_hash: {config_hash(cfg)}")
            return EXIT_OK
        logger.info(f"Running {args.command} (config_hash {config_hash(cfg)[:12]})")
        return COMMANDS[args.command](cfg, args)
    except ConfigError as e:
        logger.error(f"Configuration error at {e.path}: {e}")
        return EXIT_CONFIG
    except Exception as e:
        logger.error(f"{args.command} failed: {type(e).__name__}: {e}")
        return EXIT_RUNTIME


if __name__ == "__main__":
    raise SystemExit(main())


__all__ = ["build_parser", "main"]
