"""Meta-learned adversarial censoring: the blocking trainer.

Each meta-step samples a simulated fine-tuning procedure, unrolls it on the
harmful task starting from the blocked extractor, and then updates three
parameter groups from the same recorded step:

    blocked extractor   descends  desired_nll - mean(harmful_nll_k)
    adversary (head, rho) descends mean(harmful_nll_k)
    desired head        descends  desired_nll

where harmful_nll_k is measured on a held-out harmful batch after inner
step k. With ``k_max = 0`` and calibration off the procedure reduces to
adversarial censoring (gradient reversal on the unadapted model).

Module Information:
    - Filename: mlac.py
    - Module: mlac
    - Location: src/task_blocking/

Key Concepts:
    - Inner loop: plain or adaptive-moment descent at rate exp(rho), recorded on the tape
    - Outer loop: three numpy Adam optimizers, one per parameter group
    - K = 0 convention: the harmful loss sequence holds the single unadapted evaluation
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, field, replace
import math
import pathlib
from typing import Literal

from loguru import logger
import numpy as np
import pandas as pd

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .calibration import CalibrationConfig, calibrated_nll
from .data import Batch, DatasetError, TaskDataset, batches
from .models import (
    DEFAULT_INNER_LR,
    AdversarialParams,
    Checkpoint,
    Head,
    ParameterSet,
    features,
    head_logits,
    init_adversary,
    init_head,
    nll,
)

InnerOptimizer = Literal["sgd", "adam"]
INNER_OPTIMIZERS: tuple[str, ...] = ("sgd", "adam")
LOG_COLUMNS = ["step", "desired_nll", "mean_harmful_nll", "alpha_h"]


class NonFiniteLossError(RuntimeError):
    """Raised when a meta-step produces a NaN or infinite loss."""


#####################################
# Configuration
#####################################


@dataclass(frozen=True)
class BlockingConfig:
    total_steps: int = 3000
    k_max: int = 16
    optimizers: tuple[str, ...] = INNER_OPTIMIZERS
    outer_lr: float = 1e-3
    adversary_lr: float = 1e-3
    desired_lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    calibration: bool = False
    batch_size_desired: int = 32
    batch_size_harmful: int = 32
    seed: int = 0
    log_every: int = 100
    inner_lr_init: float = DEFAULT_INNER_LR

    def __post_init__(self) -> None:
        if self.total_steps < 0:
            raise ValueError(f"total_steps must be nonnegative, got {self.total_steps}")
        if self.k_max < 0:
            raise ValueError(f"k_max must be nonnegative, got {self.k_max}")
        for name in ("outer_lr", "adversary_lr", "desired_lr"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative, got {getattr(self, name)}")
        if self.inner_lr_init <= 0:
            raise ValueError(f"inner_lr_init must be positive, got {self.inner_lr_init}")
        if min(self.batch_size_desired, self.batch_size_harmful) < 1:
            raise ValueError("batch sizes must be positive")
        unknown = set(self.optimizers) - set(INNER_OPTIMIZERS)
        if unknown:
            raise ValueError(f"Unknown inner optimizers {sorted(unknown)}; choose from {INNER_OPTIMIZERS}")
        if not all(0.0 <= b < 1.0 for b in self.betas):
            raise ValueError(f"betas must lie in [0, 1), got {self.betas}")

    @property
    def family(self) -> InnerFamily:
        return InnerFamily(tuple(self.optimizers), self.k_max)


@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 500
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0

    def __post_init__(self) -> None:
        if self.steps < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError(f"Invalid pretraining settings: {self}")


#####################################
# Types
#####################################


@dataclass(frozen=True)
class InnerFamily:
    """The training-time proxy for the adversary's fine-tuning procedures."""

    optimizers: tuple[str, ...] = INNER_OPTIMIZERS
    k_max: int = 16


@dataclass(frozen=True)
class InnerProcedure:
    optimizer: InnerOptimizer
    steps: int


@dataclass(frozen=True)
class InnerTrajectory:
    params_at_step: tuple[ParameterSet, ...]
    head_at_step: tuple[Head, ...]
    procedure: InnerProcedure

    def __post_init__(self) -> None:
        k = self.procedure.steps
        assert len(self.params_at_step) == k and len(self.head_at_step) == k, "trajectory length != K"


@dataclass(frozen=True)
class OuterLosses:
    desired_nll: float
    harmful_nlls: tuple[float, ...]

    @property
    def mean_harmful_nll(self) -> float:
        return float(np.mean(self.harmful_nlls))

    @property
    def objective(self) -> float:
        """Value the blocked extractor descends."""
        return self.desired_nll - self.mean_harmful_nll

    @property
    def finite(self) -> bool:
        return math.isfinite(self.desired_nll) and all(math.isfinite(v) for v in self.harmful_nlls)


@dataclass(frozen=True)
class MetaBatches:
    """Everything one meta-step reads: the procedure and its data."""

    procedure: InnerProcedure
    desired: Batch
    harmful: Batch
    inner: tuple[Batch, ...]


@dataclass(frozen=True)
class AdamState:
    m: tuple[np.ndarray, ...]
    v: tuple[np.ndarray, ...]
    t: int = 0

    @classmethod
    def zeros_like(cls, arrays: Sequence[np.ndarray]) -> AdamState:
        return cls(tuple(np.zeros_like(a) for a in arrays), tuple(np.zeros_like(a) for a in arrays), 0)


def adam_update(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    state: AdamState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> tuple[list[np.ndarray], AdamState]:
    """One bias-corrected Adam step; returns new arrays and state, inputs untouched."""
    b1, b2 = betas
    t = state.t + 1
    m = tuple(b1 * mi + (1 - b1) * g for mi, g in zip(state.m, grads, strict=True))
    v = tuple(b2 * vi + (1 - b2) * g * g for vi, g in zip(state.v, grads, strict=True))
    out = []
    for p, mi, vi in zip(params, m, v, strict=True):
        m_hat = mi / (1 - b1**t)
        v_hat = vi / (1 - b2**t)
        out.append(p - lr * m_hat / (np.sqrt(v_hat) + eps))
    return out, AdamState(m, v, t)


@dataclass(frozen=True)
class MLACState:
    extractor: ParameterSet
    desired_head: Head
    adversary: AdversarialParams
    extractor_opt: AdamState
    adversary_opt: AdamState
    desired_opt: AdamState
    step: int = 0

    @classmethod
    def initial(cls, extractor: ParameterSet, desired_head: Head, adversary: AdversarialParams) -> MLACState:
        return cls(
            extractor=extractor.detached(),
            desired_head=desired_head.detached(),
            adversary=adversary.detached(),
            extractor_opt=AdamState.zeros_like([t.data for t in extractor.tensors()]),
            adversary_opt=AdamState.zeros_like([t.data for t in adversary.tensors()]),
            desired_opt=AdamState.zeros_like([t.data for t in desired_head.tensors()]),
        )

    @property
    def alpha_h(self) -> float:
        return float(np.exp(self.adversary.log_lr.data))

    def checkpoint(self, seed: int, config_hash: str) -> Checkpoint:
        return Checkpoint(
            extractor=self.extractor,
            heads={"desired": self.desired_head, "harmful": self.adversary.head},
            seed=seed,
            config_hash=config_hash,
            log_lr=float(self.adversary.log_lr.data),
        )


@dataclass(frozen=True)
class TrainingResult:
    checkpoint: Checkpoint
    log: pd.DataFrame = field(compare=False)


#####################################
# Inner loop
#####################################


def sample_procedure(family: InnerFamily, seed: int | np.random.Generator) -> InnerProcedure:
    """Draw an optimizer kind and K uniformly from ``family``; K = 0 when k_max = 0."""
    if not family.optimizers:
        raise ValueError("Cannot sample from an empty inner optimizer family")
    if family.k_max < 0:
        raise ValueError(f"k_max must be nonnegative, got {family.k_max}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    optimizer = family.optimizers[int(rng.integers(len(family.optimizers)))]
    steps = 0 if family.k_max == 0 else int(rng.integers(1, family.k_max + 1))
    return InnerProcedure(optimizer, steps)


def _harmful_loss(params: ParameterSet, head: Head, batch: Batch) -> Tensor:
    return nll(head_logits(head, features(params, Tensor(batch.x))), batch.y_harmful)


def inner_adapt(
    extractor: ParameterSet,
    adversary: AdversarialParams,
    procedure: InnerProcedure,
    harmful_batches: Sequence[Batch],
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> InnerTrajectory:
    """Unroll ``procedure`` on the harmful task, recording every update on the tape.

    Both the extractor copy and the harmful head move at rate
    ``alpha = exp(adversary.log_lr)``. Step k uses ``harmful_batches[k]``.

    sgd:   p <- p - alpha * g
    adam:  m <- b1 m + (1 - b1) g;  v <- b2 v + (1 - b2) g*g
           p <- p - alpha * (m / (1 - b1^k)) / (sqrt(v / (1 - b2^k)) + eps)
           with m = v = 0 at the start of every unroll.

    The inputs must live on a recording tape for outer gradients to flow;
    they are never modified.
    """
    k_steps = procedure.steps
    if len(harmful_batches) < k_steps:
        raise ValueError(f"inner_adapt: procedure needs {k_steps} batches, got {len(harmful_batches)}")
    if procedure.optimizer not in INNER_OPTIMIZERS:
        raise ValueError(f"Unknown inner optimizer '{procedure.optimizer}'")
    if k_steps and (extractor.tensors()[0].tape is None or adversary.log_lr.tape is None):
        raise ad.TapeError("inner_adapt: parameters must be recorded on a tape")

    b1, b2 = betas
    alpha = adversary.inner_lr
    params, head = extractor, adversary.head
    names = list(params.entries)
    moments: list[tuple[Tensor, Tensor]] | None = None
    params_at_step, head_at_step = [], []
    for k in range(k_steps):
        flat = params.tensors() + head.tensors()
        loss = _harmful_loss(params, head, harmful_batches[k])
        grads = ad.backward(loss, flat, create_graph=True)
        if procedure.optimizer == "sgd":
            updates = grads
        else:
            if moments is None:
                moments = [(Tensor(np.zeros(g.shape)), Tensor(np.zeros(g.shape))) for g in grads]
            t = k + 1
            moments = [
                (m * b1 + g * (1 - b1), v * b2 + ad.mul(g, g) * (1 - b2))
                for (m, v), g in zip(moments, grads, strict=True)
            ]
            updates = [
                ad.div(m * (1.0 / (1 - b1**t)), ad.sqrt(v * (1.0 / (1 - b2**t))) + eps)
                for m, v in moments
            ]
        stepped = [ad.sub(p, ad.mul(alpha, u)) for p, u in zip(flat, updates, strict=True)]
        params = ParameterSet(dict(zip(names, stepped[: len(names)])), params.dims, params.activation)
        head = Head(stepped[-2], stepped[-1])
        params_at_step.append(params)
        head_at_step.append(head)
    return InnerTrajectory(tuple(params_at_step), tuple(head_at_step), procedure)


#####################################
# Outer loop
#####################################


def outer_loss_tensors(
    trajectory: InnerTrajectory,
    extractor: ParameterSet,
    adversary: AdversarialParams,
    desired_head: Head,
    desired_batch: Batch,
    harmful_batch: Batch,
    solver: CalibrationConfig | None = None,
) -> tuple[Tensor, list[Tensor]]:
    """Recorded desired NLL at the unadapted extractor and harmful NLLs after each inner step."""
    if desired_head.num_classes <= int(desired_batch.y_desired.max()):
        raise ValueError("outer_losses: desired batch labels exceed the desired head's classes")
    if adversary.head.num_classes <= int(harmful_batch.y_harmful.max()):
        raise ValueError("outer_losses: harmful batch labels exceed the harmful head's classes")
    desired = nll(head_logits(desired_head, features(extractor, Tensor(desired_batch.x))), desired_batch.y_desired)
    stages = list(zip(trajectory.params_at_step, trajectory.head_at_step))
    if not stages:
        stages = [(extractor, adversary.head)]
    x_h = Tensor(harmful_batch.x)
    harmful = [
        calibrated_nll(head_logits(head, features(params, x_h)), harmful_batch.y_harmful, solver)
        for params, head in stages
    ]
    return desired, harmful


def outer_losses(
    trajectory: InnerTrajectory,
    extractor: ParameterSet,
    adversary: AdversarialParams,
    desired_head: Head,
    desired_batch: Batch,
    harmful_batch: Batch,
    solver: CalibrationConfig | None = None,
) -> OuterLosses:
    desired, harmful = outer_loss_tensors(
        trajectory, extractor, adversary, desired_head, desired_batch, harmful_batch, solver
    )
    return OuterLosses(desired.item(), tuple(h.item() for h in harmful))


def sample_meta_batches(
    cfg: BlockingConfig, desired_data: TaskDataset, harmful_data: TaskDataset, step: int
) -> MetaBatches:
    """Deterministic in (cfg.seed, step). The held-out harmful batch never overlaps the inner batches."""
    rng = np.random.default_rng([cfg.seed, step])
    procedure = sample_procedure(cfg.family, rng)
    d_idx = rng.choice(len(desired_data), size=min(cfg.batch_size_desired, len(desired_data)), replace=False)
    order = rng.permutation(len(harmful_data))
    held_size = min(cfg.batch_size_harmful, len(harmful_data) // 2)
    if held_size < 1:
        raise DatasetError(f"harmful dataset of size {len(harmful_data)} is too small to hold out a batch")
    held, pool = order[:held_size], order[held_size:]
    inner_size = min(cfg.batch_size_harmful, len(pool))
    inner = tuple(
        harmful_data.batch(rng.choice(pool, size=inner_size, replace=False)) for _ in range(procedure.steps)
    )
    return MetaBatches(procedure, desired_data.batch(d_idx), harmful_data.batch(held), inner)


def _forward(
    state: MLACState, meta: MetaBatches, cfg: BlockingConfig, solver: CalibrationConfig | None
) -> tuple[ParameterSet, AdversarialParams, Head, Tensor, list[Tensor]]:
    tape = Tape()
    extractor = state.extractor.on_tape(tape)
    adversary = state.adversary.on_tape(tape)
    desired_head = state.desired_head.on_tape(tape)
    trajectory = inner_adapt(extractor, adversary, meta.procedure, meta.inner, cfg.betas, cfg.eps)
    desired, harmful = outer_loss_tensors(
        trajectory, extractor, adversary, desired_head, meta.desired, meta.harmful, solver
    )
    return extractor, adversary, desired_head, desired, harmful


def evaluate_outer(
    state: MLACState, meta: MetaBatches, cfg: BlockingConfig, solver: CalibrationConfig | None = None
) -> OuterLosses:
    """Outer losses at the current state, without updating anything."""
    *_, desired, harmful = _forward(state, meta, cfg, solver)
    return OuterLosses(desired.item(), tuple(h.item() for h in harmful))


def mlac_step(
    state: MLACState, meta: MetaBatches, cfg: BlockingConfig, solver: CalibrationConfig | None = None
) -> tuple[MLACState, OuterLosses]:
    """One meta-step. Returns the new state; ``state`` itself is left as it was."""
    extractor, adversary, desired_head, desired, harmful = _forward(state, meta, cfg, solver)
    losses = OuterLosses(desired.item(), tuple(h.item() for h in harmful))
    if not losses.finite:
        logger.error(
            f"Step {state.step}: non-finite loss (desired={losses.desired_nll}, harmful={losses.harmful_nlls})"
        )
        raise NonFiniteLossError(
            f"step {state.step}: desired_nll={losses.desired_nll}, harmful_nlls={list(losses.harmful_nlls)}"
        )

    mean_harmful = ad.scale(_stack_sum(harmful), 1.0 / len(harmful))
    theta = extractor.tensors()
    phi = adversary.tensors()
    w_d = desired_head.tensors()

    g_theta_h = ad.backward(mean_harmful, theta)
    g_phi = ad.backward(mean_harmful, phi)
    g_desired = ad.backward(desired, theta + w_d)
    g_theta = [gd.data - gh.data for gd, gh in zip(g_desired[: len(theta)], g_theta_h, strict=True)]
    g_wd = [g.data for g in g_desired[len(theta) :]]

    new_theta, theta_opt = adam_update(
        [t.data for t in theta], g_theta, state.extractor_opt, cfg.outer_lr, cfg.betas, cfg.eps
    )
    new_phi, phi_opt = adam_update(
        [t.data for t in phi], [g.data for g in g_phi], state.adversary_opt, cfg.adversary_lr, cfg.betas, cfg.eps
    )
    new_wd, wd_opt = adam_update([t.data for t in w_d], g_wd, state.desired_opt, cfg.desired_lr, cfg.betas, cfg.eps)

    names = list(state.extractor.entries)
    new_state = MLACState(
        extractor=ParameterSet.from_arrays(
            dict(zip(names, new_theta)), state.extractor.dims, state.extractor.activation
        ),
        desired_head=Head(Tensor(new_wd[0]), Tensor(new_wd[1])),
        adversary=AdversarialParams(Head(Tensor(new_phi[0]), Tensor(new_phi[1])), Tensor(new_phi[2])),
        extractor_opt=theta_opt,
        adversary_opt=phi_opt,
        desired_opt=wd_opt,
        step=state.step + 1,
    )
    return new_state, losses


def _stack_sum(values: list[Tensor]) -> Tensor:
    total = values[0]
    for v in values[1:]:
        total = ad.add(total, v)
    return total


#####################################
# Training entry points
#####################################


def pretrain(
    cfg: PretrainConfig, init: ParameterSet, desired_data: TaskDataset, head: Head | None = None
) -> tuple[ParameterSet, Head]:
    """Adam on the desired task only: the standard pretrained model the blocker starts from."""
    head = head or init_head(init.feature_dim, desired_data.num_desired_classes, cfg.seed)
    params = init.detached()
    names = list(params.entries)
    opt = AdamState.zeros_like([t.data for t in params.tensors() + head.tensors()])
    stream = batches(desired_data, cfg.batch_size, cfg.seed, epochs=None)
    for step in range(cfg.steps):
        batch = next(stream)
        tape = Tape()
        p_tape, h_tape = params.on_tape(tape), head.on_tape(tape)
        loss = nll(head_logits(h_tape, features(p_tape, Tensor(batch.x))), batch.y_desired)
        if not math.isfinite(loss.item()):
            raise NonFiniteLossError(f"pretrain step {step}: desired_nll={loss.item()}")
        flat = p_tape.tensors() + h_tape.tensors()
        grads = ad.backward(loss, flat)
        arrays, opt = adam_update([t.data for t in flat], [g.data for g in grads], opt, cfg.lr)
        params = ParameterSet.from_arrays(dict(zip(names, arrays[: len(names)])), params.dims, params.activation)
        head = Head(Tensor(arrays[-2]), Tensor(arrays[-1]))
    logger.info(f"Pretrained {cfg.steps} steps on {len(desired_data)} desired examples")
    return params, head


def mlac_train(
    cfg: BlockingConfig,
    init: ParameterSet,
    desired_data: TaskDataset,
    harmful_data: TaskDataset,
    *,
    desired_head: Head | None = None,
    solver: CalibrationConfig | None = None,
    config_hash: str = "",
    log_path: str | pathlib.Path | None = None,
) -> TrainingResult:
    """Run ``cfg.total_steps`` meta-steps and return the blocked checkpoint and per-step log."""
    if desired_data.input_dim != harmful_data.input_dim or desired_data.input_dim != init.input_dim:
        raise DatasetError(
            f"input dims differ: extractor {init.input_dim}, desired {desired_data.input_dim}, "
            f"harmful {harmful_data.input_dim}"
        )
    solver = replace(solver or CalibrationConfig(), enabled=cfg.calibration)
    desired_head = desired_head or init_head(init.feature_dim, desired_data.num_desired_classes, cfg.seed)
    adversary = init_adversary(init.feature_dim, harmful_data.num_harmful_classes, cfg.seed + 1, cfg.inner_lr_init)
    state = MLACState.initial(init, desired_head, adversary)

    logger.info(
        f"Blocking for {cfg.total_steps} steps: k_max={cfg.k_max}, optimizers={list(cfg.optimizers)}, "
        f"calibration={cfg.calibration}"
    )
    rows = []
    for step in range(cfg.total_steps):
        meta = sample_meta_batches(cfg, desired_data, harmful_data, step)
        alpha = state.alpha_h
        state, losses = mlac_step(state, meta, cfg, solver)
        rows.append((step, losses.desired_nll, losses.mean_harmful_nll, alpha))
        if cfg.log_every and (step % cfg.log_every == 0 or step == cfg.total_steps - 1):
            logger.info(
                f"step {step}: desired_nll={losses.desired_nll:.4f} "
                f"mean_harmful_nll={losses.mean_harmful_nll:.4f} alpha_h={alpha:.3e} K={meta.procedure.steps}"
            )

    log = pd.DataFrame(rows, columns=LOG_COLUMNS)
    if log_path is not None:
        path = pathlib.Path(log_path)
        path.parent.mkdir(parents=True, exist_ok=True)
        log.to_csv(path, index=False)
        logger.info(f"Training log written to {path}")
    return TrainingResult(state.checkpoint(cfg.seed, config_hash), log)


def adversarial_censoring_train(
    cfg: BlockingConfig,
    init: ParameterSet,
    desired_data: TaskDataset,
    harmful_data: TaskDataset,
    **kwargs,
) -> TrainingResult:
    """The gradient-reversal baseline: blocking with no inner steps and no head adjustment."""
    return mlac_train(replace(cfg, k_max=0, calibration=False), init, desired_data, harmful_data, **kwargs)


__all__ = [
    "AdamState",
    "BlockingConfig",
    "InnerFamily",
    "InnerProcedure",
    "InnerTrajectory",
    "LOG_COLUMNS",
    "MLACState",
    "MetaBatches",
    "NonFiniteLossError",
    "OuterLosses",
    "PretrainConfig",
    "TrainingResult",
    "adam_update",
    "adversarial_censoring_train",
    "evaluate_outer",
    "inner_adapt",
    "mlac_step",
    "mlac_train",
    "outer_loss_tensors",
    "outer_losses",
    "pretrain",
    "sample_meta_batches",
    "sample_procedure",
]
