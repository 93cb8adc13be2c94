"""Trajectory decoding from fused scene context.

Two decoupled query families drive the decoder: mode queries (one learnable
embedding per candidate future) and time-state queries (one embedding per
future timestamp, produced from normalized times by a shared MLP). Each
family is refined against the scene separately, the two are combined by a
broadcast sum into a [K, T_s] query grid, and a joint stack of attention and
bidirectional scans refines the grid before the output heads read it out.

All modules take batched inputs [B, ...]; the trajectory axes follow the
shapes noted per method.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from . import nn
from .encoder import SceneContext
from .tensor import Tensor


@dataclass
class Forecast:
    """Decoder outputs for a batch of scenes (focal frame, meters).

    ``trajectories`` [B, K, T_f, 2] with ``probabilities`` [B, K] summing to
    one per scene; ``logits`` are the pre-softmax scores used by the
    classification loss. The aux fields are the secondary supervision
    targets: one unimodal trajectory decoded from the time queries alone and
    one trajectory-per-mode decoded from the mode queries alone.
    """

    trajectories: Tensor
    probabilities: Tensor
    logits: Tensor
    aux_state_traj: Tensor
    aux_mode_trajs: Tensor
    aux_mode_probs: Tensor
    aux_mode_logits: Tensor

    @property
    def num_modes(self) -> int:
        return self.trajectories.shape[-3]


class TimeQueryInit(nn.Module):
    """Map normalized future timestamps (0, 1] to query vectors."""

    def __init__(self, dim: int, rng: np.random.Generator, dtype=np.float64):
        self.mlp = nn.MLP([1, dim, dim], rng, dtype)
        self.dtype = dtype

    def __call__(self, num_steps: int) -> Tensor:
        if num_steps < 1:
            raise ValueError(f"need at least one future step, got {num_steps}")
        ts = (np.arange(1, num_steps + 1, dtype=self.dtype) / num_steps)
        return self.mlp(Tensor(ts[:, None]))


class StateQueryRefiner(nn.Module):
    """Ground the time queries in the scene: cross-attention then bi-scans.

    The cross-attention stages let each future timestep gather scene
    evidence; the bidirectional scan stages propagate constraints along the
    time axis in both directions so the per-step states stay consistent.
    """

    def __init__(self, dim: int, rng: np.random.Generator, dtype=np.float64,
                 attn_depth: int = 2, scan_depth: int = 2, num_heads: int = 8,
                 dropout_rate: float = 0.0, state_dim: int = 16, expand: int = 2):
        self.cross = [nn.AttentionLayer(dim, num_heads, rng, dtype, dropout_rate)
                      for _ in range(attn_depth)]
        self.scans = [nn.BiMambaBlock(dim, rng, dtype, expand, state_dim)
                      for _ in range(scan_depth)]

    def __call__(self, q_s: Tensor, ctx: SceneContext,
                 rng: np.random.Generator = None) -> Tensor:
        for layer in self.cross:
            q_s = layer(q_s, kv=ctx.tokens, key_valid=ctx.token_mask, rng=rng)
        for block in self.scans:
            q_s = block(q_s)
        return q_s


class ModeQueryRefiner(nn.Module):
    """Localize intents: alternate cross-attention to the scene with
    self-attention among the K mode queries."""

    def __init__(self, dim: int, rng: np.random.Generator, dtype=np.float64,
                 depth: int = 3, num_heads: int = 8, dropout_rate: float = 0.0):
        self.cross = [nn.AttentionLayer(dim, num_heads, rng, dtype, dropout_rate)
                      for _ in range(depth)]
        self.among = [nn.AttentionLayer(dim, num_heads, rng, dtype, dropout_rate)
                      for _ in range(depth)]

    def __call__(self, q_m: Tensor, ctx: SceneContext,
                 rng: np.random.Generator = None) -> Tensor:
        for cross, among in zip(self.cross, self.among):
            q_m = cross(q_m, kv=ctx.tokens, key_valid=ctx.token_mask, rng=rng)
            q_m = among(q_m, rng=rng)
        return q_m


class QueryCoupler(nn.Module):
    """Joint refinement of the [K, T_s] query grid.

    Starts from the broadcast sum of mode and time queries. Each depth runs
    cross-attention of all K*T_s tokens over the scene, self-attention across
    the whole grid (mixing modes and times jointly), and self-attention among
    modes at each fixed timestep; a final stack of bidirectional scans runs
    along the time axis independently per mode.
    """

    def __init__(self, dim: int, rng: np.random.Generator, dtype=np.float64,
                 attn_depth: int = 3, scan_depth: int = 2, num_heads: int = 8,
                 dropout_rate: float = 0.0, state_dim: int = 16, expand: int = 2):
        self.cross = [nn.AttentionLayer(dim, num_heads, rng, dtype, dropout_rate)
                      for _ in range(attn_depth)]
        self.grid = [nn.AttentionLayer(dim, num_heads, rng, dtype, dropout_rate)
                     for _ in range(attn_depth)]
        self.per_step = [nn.AttentionLayer(dim, num_heads, rng, dtype, dropout_rate)
                         for _ in range(attn_depth)]
        self.scans = [nn.BiMambaBlock(dim, rng, dtype, expand, state_dim)
                      for _ in range(scan_depth)]

    def __call__(self, q_m: Tensor, q_s: Tensor, ctx: SceneContext,
                 rng: np.random.Generator = None) -> Tensor:
        modes, dim = q_m.shape[-2], q_m.shape[-1]
        steps = q_s.shape[-2]
        lead = q_m.shape[:-2]
        q_h = (T.reshape(q_m, lead + (modes, 1, dim))
               + T.reshape(q_s, lead + (1, steps, dim)))
        flat_shape = lead + (modes * steps, dim)
        grid_shape = lead + (modes, steps, dim)
        for cross, grid, per_step in zip(self.cross, self.grid, self.per_step):
            flat = T.reshape(q_h, flat_shape)
            flat = cross(flat, kv=ctx.tokens, key_valid=ctx.token_mask, rng=rng)
            flat = grid(flat, rng=rng)
            q_h = T.reshape(flat, grid_shape)
            q_h = per_step(q_h.swapaxes(-3, -2), rng=rng).swapaxes(-3, -2)
        for block in self.scans:
            q_h = block(q_h)
        return q_h


class ForecastHeads(nn.Module):
    """Output heads reading trajectories and scores off the refined queries.

    Each grid query emits ``r = T_f / T_s`` consecutive waypoints, so
    waypoint index t_f (1-based) comes from grid step ceil(t_f / r). The
    score head ranks modes from the pooled grid features together with an
    embedding of the mode's own decoded waypoints (thirds of the horizon);
    ranking then tracks where each candidate actually goes instead of
    chasing the grid features alone, which keeps the classification target
    stable while the trajectories are still reorganizing. The aux heads
    have their own weights: the time-query head emits one unimodal
    trajectory, the mode-query head emits a full trajectory per mode.
    """

    def __init__(self, dim: int, modes: int, future_steps: int, query_steps: int,
                 rng: np.random.Generator, dtype=np.float64):
        if future_steps % query_steps != 0:
            raise ValueError(
                f"future steps {future_steps} not divisible by query steps "
                f"{query_steps}")
        self.future_steps = future_steps
        self.query_steps = query_steps
        self.ratio = future_steps // query_steps
        self.modes = modes
        self.traj = nn.MLP([dim, dim, 2 * self.ratio], rng, dtype)
        self.waypoint_embed = nn.Linear(6, dim, rng, dtype)
        self.score = nn.MLP([2 * dim, dim, 1], rng, dtype)
        self.state_traj = nn.MLP([dim, dim, 2 * self.ratio], rng, dtype)
        self.mode_traj = nn.MLP([dim, dim, 2 * future_steps], rng, dtype)
        self.mode_score = nn.MLP([dim, dim, 1], rng, dtype)

    def __call__(self, q_h: Tensor, q_s: Tensor, q_m: Tensor) -> Forecast:
        lead = q_h.shape[:-3]
        k, t_f = self.modes, self.future_steps
        traj = T.reshape(self.traj(q_h), lead + (k, t_f, 2))
        # Degenerate horizons (t_f < 3) repeat waypoints; separate slices keep
        # the gradient accumulation correct either way.
        w_idx = (-((-t_f) // 3) - 1, -((-2 * t_f) // 3) - 1, t_f - 1)
        waypoints = T.concat([traj[..., i, :] for i in w_idx], axis=-1)
        score_in = T.concat([q_h.mean(axis=-2), self.waypoint_embed(waypoints)],
                            axis=-1)
        logits = T.reshape(self.score(score_in), lead + (k,))
        probs = T.softmax(logits, axis=-1)
        aux_state = T.reshape(self.state_traj(q_s), lead + (t_f, 2))
        aux_mode = T.reshape(self.mode_traj(q_m), lead + (k, t_f, 2))
        aux_logits = T.reshape(self.mode_score(q_m), lead + (k,))
        aux_probs = T.softmax(aux_logits, axis=-1)
        return Forecast(trajectories=traj, probabilities=probs, logits=logits,
                        aux_state_traj=aux_state, aux_mode_trajs=aux_mode,
                        aux_mode_probs=aux_probs, aux_mode_logits=aux_logits)


class TrajectoryDecoder(nn.Module):
    """Full decoder: query init, separate refinement, coupling, heads."""

    def __init__(self, dim: int, modes: int, future_steps: int,
                 rng: np.random.Generator, dtype=np.float64,
                 query_steps: int = None, num_heads: int = 8,
                 dropout_rate: float = 0.0, state_dim: int = 16,
                 expand: int = 2, state_attn_depth: int = 2,
                 state_scan_depth: int = 2, mode_depth: int = 3,
                 grid_attn_depth: int = 3, grid_scan_depth: int = 2):
        query_steps = future_steps if query_steps is None else query_steps
        if query_steps < 1:
            raise ValueError(f"query steps must be >= 1, got {query_steps}")
        if future_steps % query_steps != 0:
            raise ValueError(
                f"future steps {future_steps} not divisible by query steps "
                f"{query_steps}")
        self.query_steps = query_steps
        self.mode_queries = nn.Parameter(
            rng.normal(0.0, 0.02, (modes, dim)).astype(dtype))
        self.time_init = TimeQueryInit(dim, rng, dtype)
        self.state_refiner = StateQueryRefiner(
            dim, rng, dtype, state_attn_depth, state_scan_depth, num_heads,
            dropout_rate, state_dim, expand)
        self.mode_refiner = ModeQueryRefiner(
            dim, rng, dtype, mode_depth, num_heads, dropout_rate)
        self.coupler = QueryCoupler(
            dim, rng, dtype, grid_attn_depth, grid_scan_depth, num_heads,
            dropout_rate, state_dim, expand)
        self.heads = ForecastHeads(dim, modes, future_steps, query_steps,
                                   rng, dtype)

    def __call__(self, ctx: SceneContext,
                 rng: np.random.Generator = None) -> Forecast:
        batch = ctx.tokens.shape[:-2]
        k, dim = self.mode_queries.shape
        q_m = T.broadcast_to(self.mode_queries, batch + (k, dim))
        q_s0 = self.time_init(self.query_steps)
        q_s = T.broadcast_to(q_s0, batch + q_s0.shape)
        q_s = self.state_refiner(q_s, ctx, rng=rng)
        q_m = self.mode_refiner(q_m, ctx, rng=rng)
        q_h = self.coupler(q_m, q_s, ctx, rng=rng)
        return self.heads(q_h, q_s, q_m)
