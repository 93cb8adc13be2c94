"""Adaptive optimizer with decoupled weight decay, clipping, and lr schedule."""

from __future__ import annotations

import math

import numpy as np


def lr_at_epoch(epoch: int, base_lr: float, total_epochs: int,
                warmup_epochs: int) -> float:
    """Learning rate for a 1-indexed epoch: linear ramp, then cosine to 0.

    During warmup the rate is ``base_lr * epoch / warmup_epochs``; afterwards
    it follows ``0.5 * base_lr * (1 + cos(pi * (e - W) / (T - W)))``, reaching
    exactly 0 at the final epoch.
    """
    if epoch < 1 or epoch > total_epochs:
        raise ValueError(f"epoch {epoch} outside 1..{total_epochs}")
    if warmup_epochs < 0 or warmup_epochs > total_epochs:
        raise ValueError("warmup_epochs must lie in [0, total_epochs]")
    if epoch <= warmup_epochs:
        return base_lr * epoch / warmup_epochs
    phase = (epoch - warmup_epochs) / (total_epochs - warmup_epochs)
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * phase))


def clip_grad_norm(params, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``.

    Returns the pre-clip norm. Parameters without gradients are ignored.
    """
    if max_norm <= 0:
        raise ValueError(f"max_norm must be positive, got {max_norm}")
    grads = [p.grad for p in params if p.grad is not None]
    total = 0.0
    for g in grads:
        total += float((g.astype(np.float64) ** 2).sum())
    norm = math.sqrt(total)
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads:
            g *= scale
    return norm


class AdamW:
    """Adam with decoupled weight decay.

    Decay is applied only to parameters flagged ``decay`` (weights, not
    biases or norm gains). Moment buffers live under the parameter names so
    they can be checkpointed alongside the model.
    """

    def __init__(self, named_params, lr: float = 3e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.01):
        named_params = list(named_params)
        if not named_params:
            raise ValueError("optimizer needs at least one parameter")
        if not (0.0 <= betas[0] < 1.0 and 0.0 <= betas[1] < 1.0):
            raise ValueError(f"betas must lie in [0, 1), got {betas}")
        if lr < 0 or eps <= 0 or weight_decay < 0:
            raise ValueError("lr/weight_decay must be >= 0 and eps > 0")
        self.names = [n for n, _ in named_params]
        self.params = [p for _, p in named_params]
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {n: np.zeros_like(p.data) for n, p in named_params}
        self.v = {n: np.zeros_like(p.data) for n, p in named_params}

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float = None) -> None:
        """One update over all parameters that currently hold a gradient."""
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        self.step_count += 1
        bc1 = 1.0 - b1 ** self.step_count
        bc2 = 1.0 - b2 ** self.step_count
        for name, p in zip(self.names, self.params):
            if p.grad is None:
                continue
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * np.square(g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if p.decay and self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data -= lr * update

    def state_dict(self) -> dict:
        return {"step": self.step_count,
                "m": {n: a.copy() for n, a in self.m.items()},
                "v": {n: a.copy() for n, a in self.v.items()}}

    def load_state_dict(self, state: dict) -> None:
        for key in ("step", "m", "v"):
            if key not in state:
                raise KeyError(f"optimizer state missing {key!r}")
        for buf_name in ("m", "v"):
            buf = state[buf_name]
            missing = [n for n in self.names if n not in buf]
            unexpected = [n for n in buf if n not in self.m]
            if missing or unexpected:
                raise KeyError(f"optimizer {buf_name} buffers do not match: "
                               f"missing {missing}, unexpected {unexpected}")
        self.step_count = int(state["step"])
        for n in self.names:
            self.m[n] = np.array(state["m"][n], dtype=self.m[n].dtype, copy=True)
            self.v[n] = np.array(state["v"][n], dtype=self.v[n].dtype, copy=True)
