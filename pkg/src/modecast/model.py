"""Full forecaster: scene encoder + trajectory decoder behind one config."""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import nn
from .decoder import Forecast, TrajectoryDecoder
from .encoder import SceneContext, SceneEncoder


@dataclass
class ModelConfig:
    """Architecture hyperparameters; depths follow the default layer layout."""

    dim: int = 128
    modes: int = 6
    future_steps: int = 30
    query_steps: int = None        # None -> future_steps (one query per step)
    num_heads: int = 8
    state_dim: int = 16
    expand: int = 2
    dropout: float = 0.2
    agent_depth: int = 4
    fusion_depth: int = 5
    state_attn_depth: int = 2
    state_scan_depth: int = 2
    mode_depth: int = 3
    grid_attn_depth: int = 3
    grid_scan_depth: int = 2
    dtype: str = "float32"

    def __post_init__(self):
        if self.query_steps is None:
            self.query_steps = self.future_steps
        for name in ("dim", "modes", "future_steps", "query_steps", "num_heads",
                     "state_dim", "expand", "agent_depth"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.future_steps % self.query_steps != 0:
            raise ValueError(
                f"query_steps {self.query_steps} must divide future_steps "
                f"{self.future_steps}")
        if self.dim % self.num_heads != 0:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.num_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype}")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class Forecaster(nn.Module):
    """End-to-end model mapping padded scene batches to forecasts."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        dt = cfg.np_dtype
        self.encoder = SceneEncoder(
            cfg.dim, rng, dt, fusion_depth=cfg.fusion_depth,
            agent_depth=cfg.agent_depth, num_heads=cfg.num_heads,
            dropout_rate=cfg.dropout, state_dim=cfg.state_dim,
            expand=cfg.expand)
        self.decoder = TrajectoryDecoder(
            cfg.dim, cfg.modes, cfg.future_steps, rng, dt,
            query_steps=cfg.query_steps, num_heads=cfg.num_heads,
            dropout_rate=cfg.dropout, state_dim=cfg.state_dim,
            expand=cfg.expand, state_attn_depth=cfg.state_attn_depth,
            state_scan_depth=cfg.state_scan_depth, mode_depth=cfg.mode_depth,
            grid_attn_depth=cfg.grid_attn_depth,
            grid_scan_depth=cfg.grid_scan_depth)

    def encode(self, map_feat, map_mask, agents, agent_mask,
               rng: np.random.Generator = None) -> SceneContext:
        return self.encoder(map_feat, map_mask, agents, agent_mask, rng=rng)

    def __call__(self, map_feat, map_mask, agents, agent_mask,
                 rng: np.random.Generator = None) -> Forecast:
        """Forward a padded batch; ``rng`` enables dropout (training mode)."""
        dt = self.cfg.np_dtype
        ctx = self.encode(np.ascontiguousarray(map_feat, dtype=dt), map_mask,
                          np.ascontiguousarray(agents, dtype=dt), agent_mask,
                          rng=rng)
        return self.decoder(ctx, rng=rng)
