"""Training objective: winner-take-all regression plus classification.

The main loss supervises only the candidate trajectory closest to ground
truth (mean L2 over time) with a smooth-L1 regression term, and trains the
probability head with cross-entropy against a one-hot at that best index.
Two auxiliary terms supervise the decoupled query branches directly: the
unimodal time-query trajectory, and the per-mode trajectories decoded from
mode queries alone (with their own winner-take-all selection and scores).
All four terms carry equal weight.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .decoder import Forecast
from .tensor import Tensor

SMOOTH_L1_BETA = 1.0


@dataclass
class LossBreakdown:
    l_reg: Tensor
    l_cls: Tensor
    l_ts: Tensor
    l_m: Tensor
    total: Tensor

    def values(self) -> dict:
        return {"l_reg": float(self.l_reg.data), "l_cls": float(self.l_cls.data),
                "l_ts": float(self.l_ts.data), "l_m": float(self.l_m.data),
                "total": float(self.total.data)}


def _ensure_batched(trajs: Tensor, gt: np.ndarray):
    squeeze = trajs.ndim == 3
    if squeeze:
        trajs = T.reshape(trajs, (1,) + trajs.shape)
        gt = np.asarray(gt)[None]
    return trajs, np.asarray(gt, dtype=np.float64), squeeze


def select_best(trajs: Tensor, gt: np.ndarray):
    """Pick the trajectory with minimal mean L2 displacement to ``gt``.

    Selection runs on raw values outside the autodiff graph (the winner's
    identity is not differentiable); ties go to the lowest index. Accepts
    [K, T, 2] with gt [T, 2], or batched [B, K, T, 2] with gt [B, T, 2].
    Returns (best_index, best_trajectory) with the batch axis preserved.
    """
    trajs, gt, squeeze = _ensure_batched(trajs, gt)
    d = trajs.data.astype(np.float64) - gt[:, None]
    err = np.sqrt((d ** 2).sum(axis=-1)).mean(axis=-1)     # [B, K]
    best = err.argmin(axis=-1)                             # first min wins ties
    index = np.broadcast_to(best[:, None, None, None],
                            trajs.shape[:1] + (1,) + trajs.shape[2:])
    best_traj = T.reshape(T.gather(trajs, index, axis=1),
                          trajs.shape[:1] + trajs.shape[2:])
    if squeeze:
        return int(best[0]), T.reshape(best_traj, best_traj.shape[1:])
    return best, best_traj


def smooth_l1(pred: Tensor, target: np.ndarray,
              beta: float = SMOOTH_L1_BETA) -> Tensor:
    """Mean smooth-L1: 0.5 d^2 / beta for |d| < beta, else |d| - beta / 2."""
    if beta <= 0:
        raise ValueError(f"beta must be positive, got {beta}")
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise T.ShapeError(f"smooth_l1 shapes differ: {pred.shape} vs {target.shape}")
    diff = pred - target.astype(pred.dtype.type)
    dist = T.abs_(diff)
    quad = (diff * diff) * (0.5 / beta)
    lin = dist - 0.5 * beta
    return T.where(dist.data < beta, quad, lin).mean()


def cross_entropy(logits: Tensor, target_index) -> Tensor:
    """Mean CE of one-hot targets: -log softmax(logits)[target]."""
    if logits.ndim == 1:
        logits = T.reshape(logits, (1,) + logits.shape)
        target_index = np.asarray(target_index).reshape(1)
    log_p = T.log_softmax(logits, axis=-1)
    idx = np.asarray(target_index, dtype=np.int64)[:, None]
    picked = T.gather(log_p, idx, axis=-1)
    return -picked.mean()


def reg_cls_loss(forecast: Forecast, gt: np.ndarray):
    """WTA regression on the main trajectories + CE on their scores."""
    best, best_traj = select_best(forecast.trajectories, gt)
    l_reg = smooth_l1(best_traj, np.asarray(gt))
    l_cls = cross_entropy(forecast.logits, best)
    return l_reg, l_cls


def aux_ts_loss(aux_state_traj: Tensor, gt: np.ndarray) -> Tensor:
    """Smooth-L1 between the unimodal time-query trajectory and gt."""
    return smooth_l1(aux_state_traj, np.asarray(gt))


def aux_m_loss(aux_mode_trajs: Tensor, aux_mode_logits: Tensor,
               gt: np.ndarray) -> Tensor:
    """WTA smooth-L1 + CE over the mode-query branch, re-selected on it."""
    best, best_traj = select_best(aux_mode_trajs, gt)
    l = smooth_l1(best_traj, np.asarray(gt))
    return l + cross_entropy(aux_mode_logits, best)


def total_loss(forecast: Forecast, gt: np.ndarray,
               use_aux: bool = True) -> LossBreakdown:
    """Equal-weight sum of the four terms; aux terms zeroed when disabled."""
    l_reg, l_cls = reg_cls_loss(forecast, gt)
    if use_aux:
        l_ts = aux_ts_loss(forecast.aux_state_traj, gt)
        l_m = aux_m_loss(forecast.aux_mode_trajs, forecast.aux_mode_logits, gt)
    else:
        zero = np.zeros((), dtype=forecast.trajectories.dtype)
        l_ts, l_m = Tensor(zero), Tensor(zero)
    total = l_reg + l_cls + l_ts + l_m
    if not np.isfinite(total.data):
        raise FloatingPointError(
            f"non-finite loss: reg={float(l_reg.data)} cls={float(l_cls.data)} "
            f"ts={float(l_ts.data)} m={float(l_m.data)}")
    return LossBreakdown(l_reg=l_reg, l_cls=l_cls, l_ts=l_ts, l_m=l_m, total=total)
