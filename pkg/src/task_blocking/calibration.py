"""Head adjustment: box-constrained optimal linear calibration of logits.

Given logits z_i and labels y_i, find W in [-1, 1]^(C x C) maximizing
sum_i logsoftmax(W z_i)[y_i]. The objective is concave in W, so projected
gradient ascent from the identity converges to the box optimum.

Steps are measured in units of the inverse curvature bound 0.5 * mean ||z_i||^2.
Each iteration runs a backtracking line search: the trial step starts at
twice the last accepted one (``step_size`` on the first iteration) and is
halved until the projected point lowers the loss. The solve stops early once
no trial does. Accepted updates, the curvature bound included, are built from
autodiff primitives, so when the incoming logits sit on a tape the calibrated
loss is differentiable with respect to them through the unrolled solver.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .models import nll

INCREASE_FACTOR = 2.0
DECREASE_FACTOR = 0.5
MAX_LINE_SEARCH = 30
MIN_CURVATURE = 1e-12


@dataclass(frozen=True)
class CalibrationConfig:
    enabled: bool = True
    max_iters: int = 25
    step_size: float = 0.5

    def __post_init__(self) -> None:
        if self.max_iters < 0:
            raise ValueError(f"max_iters must be nonnegative, got {self.max_iters}")
        if self.step_size <= 0:
            raise ValueError(f"step_size must be positive, got {self.step_size}")


@dataclass(frozen=True)
class CalibrationResult:
    W: Tensor
    achieved_nll: float
    iterations_used: int
    loss: Tensor

    def __post_init__(self) -> None:
        assert np.all(np.abs(self.W.data) <= 1.0), "calibration matrix left the [-1, 1] box"


def _calibrated_loss(logits: Tensor, W: Tensor, labels: np.ndarray) -> Tensor:
    return nll(ad.matmul(logits, ad.transpose(W)), labels)


def _unit_step(logits: Tensor, step_size: float) -> Tensor:
    """step_size / (0.5 * mean ||z_i||^2), kept on the logits' tape."""
    curvature = ad.scale(ad.mean(ad.reduce_sum(ad.mul(logits, logits), axis=1)), 0.5)
    if curvature.item() < MIN_CURVATURE:
        curvature = Tensor(MIN_CURVATURE)
    return ad.div(Tensor(step_size), curvature)


def solve_calibration(
    logits: Tensor, labels: Any, max_iters: int = 25, step_size: float = 0.5
) -> CalibrationResult:
    """Projected gradient ascent on the calibrated log-likelihood, started at W = I.

    Every accepted iterate lowers the loss, so the result is never worse than W = I.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or logits.shape[0] < 1 or logits.shape[1] < 2:
        raise ad.ShapeError(f"solve_calibration: expected (batch >= 1, classes >= 2) logits, got {logits.shape}")
    if not np.all(np.isfinite(logits.data)):
        raise ValueError("solve_calibration: logits contain non-finite values")

    batch, classes = logits.shape
    unit = _unit_step(logits, step_size)
    fixed = Tensor(logits.data)
    onehot = Tensor(np.eye(classes)[labels])
    W = Tensor(np.eye(classes))
    loss = _calibrated_loss(logits, W, labels)
    used, multiple = 0, 1.0 / INCREASE_FACTOR
    for it in range(1, max_iters + 1):
        # d/dW mean_i logsoftmax(W z_i)[y_i] = (Y - P)^T Z / batch
        probs = ad.exp(ad.log_softmax(ad.matmul(logits, ad.transpose(W))))
        grad = ad.scale(ad.matmul(ad.transpose(ad.sub(onehot, probs)), logits), 1.0 / batch)

        trial, accepted = multiple * INCREASE_FACTOR, None
        for _ in range(MAX_LINE_SEARCH):
            candidate = np.clip(W.data + trial * unit.item() * grad.data, -1.0, 1.0)
            if _calibrated_loss(fixed, Tensor(candidate), labels).item() < loss.item():
                accepted = trial
                break
            trial *= DECREASE_FACTOR
        if accepted is None:
            break

        multiple = accepted
        W = ad.clamp(ad.add(W, ad.mul(ad.scale(unit, accepted), grad)), -1.0, 1.0)
        loss = _calibrated_loss(logits, W, labels)
        used = it
    return CalibrationResult(W=W, achieved_nll=loss.item(), iterations_used=used, loss=loss)


def calibrated_nll(model_logits: Tensor, labels: Any, solver_cfg: CalibrationConfig | None = None) -> Tensor:
    """The harmful-task NLL used by the outer loop, with or without head adjustment."""
    if solver_cfg is None or not solver_cfg.enabled:
        return nll(model_logits, labels)
    return solve_calibration(model_logits, labels, solver_cfg.max_iters, solver_cfg.step_size).loss


def calibrated_nll_value(model_logits: np.ndarray, labels: Any, solver_cfg: CalibrationConfig | None = None) -> float:
    """Undifferentiated solve for evaluation paths."""
    return calibrated_nll(Tensor(model_logits), labels, solver_cfg).item()


__all__ = [
    "CalibrationConfig",
    "CalibrationResult",
    "calibrated_nll",
    "calibrated_nll_value",
    "solve_calibration",
]
