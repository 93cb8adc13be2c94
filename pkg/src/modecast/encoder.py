"""Scene encoding: polyline and agent-history features fused by attention.

The pipeline is ``normalize_scene`` (focal-frame transform + radius filter)
producing a :class:`SceneInput`, per-polyline and per-agent encoders producing
one token each, and a token-level attention stack producing the fused scene
context. All encoder modules accept a leading batch axis; padding across a
batch is handled by the data module.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from . import nn
from .tensor import Tensor

# Per-segment map features: start xy, end xy, heading, length, type one-hot.
MAP_TYPES = ("lane", "crossing")
MAP_FEATURES = 6 + len(MAP_TYPES)
# Per-step agent features: xy, cos/sin heading, velocity xy, valid flag.
AGENT_FEATURES = 7
DEFAULT_RADIUS_M = 150.0


@dataclass
class WorldScene:
    """World-frame scene arrays before focal normalization.

    ``map_segments`` holds raw segment endpoints [N_m, L, 4] as
    (sx, sy, ex, ey); ``map_types`` one type id per polyline token;
    ``agents`` holds (x, y, heading, vx, vy) histories [N_a, T_h, 5].
    """

    map_segments: np.ndarray
    map_types: np.ndarray
    map_mask: np.ndarray
    agents: np.ndarray
    agent_mask: np.ndarray
    focal_index: int = 0


@dataclass
class SceneInput:
    """Focal-frame model input for one scene.

    Masked rows are zeroed. The focal agent is guaranteed valid at the last
    history step (the current time).
    """

    map: np.ndarray          # [N_m, L, MAP_FEATURES]
    map_mask: np.ndarray     # [N_m, L] bool
    agents: np.ndarray       # [N_a, T_h, AGENT_FEATURES]
    agent_mask: np.ndarray   # [N_a, T_h] bool
    focal_index: int = 0


@dataclass
class SceneContext:
    """Fused scene tokens: agents first, then map polylines."""

    tokens: Tensor           # [B, N_a + N_m, C]
    token_mask: np.ndarray   # [B, N_a + N_m] bool
    provenance: np.ndarray   # [B, N_a + N_m] int8, 0 = agent, 1 = map


def _rotate(xy: np.ndarray, cos_t: float, sin_t: float) -> np.ndarray:
    """Rotate points by -theta (into the frame whose +x axis has heading theta)."""
    x = cos_t * xy[..., 0] + sin_t * xy[..., 1]
    y = -sin_t * xy[..., 0] + cos_t * xy[..., 1]
    return np.stack([x, y], axis=-1)


def normalize_scene(world: WorldScene, focal_index: int = None,
                    radius_m: float = DEFAULT_RADIUS_M) -> SceneInput:
    """Translate/rotate into the focal agent's frame and filter by radius.

    The focal agent's current position maps to the origin and its heading to
    +x. Map polylines and agents with no valid point within ``radius_m`` of
    the origin are dropped (the focal agent itself is always kept).
    """
    focal = world.focal_index if focal_index is None else focal_index
    n_agents = world.agents.shape[0]
    if not 0 <= focal < n_agents:
        raise ValueError(f"focal index {focal} out of range for {n_agents} agents")
    if not world.agent_mask[focal, -1]:
        raise ValueError(
            f"focal agent {focal} has no valid observation at the current step")

    origin = world.agents[focal, -1, :2].copy()
    theta = float(world.agents[focal, -1, 2])
    c, s = np.cos(theta), np.sin(theta)

    # --- map ---
    seg = world.map_segments.astype(np.float64)
    start = _rotate(seg[..., 0:2] - origin, c, s)
    end = _rotate(seg[..., 2:4] - origin, c, s)
    heading = np.arctan2(end[..., 1] - start[..., 1], end[..., 0] - start[..., 0])
    length = np.hypot(end[..., 0] - start[..., 0], end[..., 1] - start[..., 1])
    one_hot = np.zeros(world.map_types.shape + (len(MAP_TYPES),))
    if world.map_types.size:
        one_hot[np.arange(world.map_types.shape[0]), world.map_types] = 1.0
    one_hot = np.broadcast_to(one_hot[:, None, :], heading.shape + (len(MAP_TYPES),))
    map_feat = np.concatenate(
        [start, end, heading[..., None], length[..., None], one_hot], axis=-1)
    map_mask = world.map_mask.astype(bool)
    map_feat = map_feat * map_mask[..., None]

    point_dist = np.minimum(np.hypot(start[..., 0], start[..., 1]),
                            np.hypot(end[..., 0], end[..., 1]))
    keep_map = (map_mask & (point_dist <= radius_m)).any(axis=-1)
    map_feat, map_mask = map_feat[keep_map], map_mask[keep_map]

    # --- agents ---
    ag = world.agents.astype(np.float64)
    pos = _rotate(ag[..., 0:2] - origin, c, s)
    head = ag[..., 2] - theta
    vel = _rotate(ag[..., 3:5], c, s)
    agent_mask = world.agent_mask.astype(bool)
    agent_feat = np.concatenate(
        [pos, np.cos(head)[..., None], np.sin(head)[..., None], vel,
         agent_mask[..., None].astype(np.float64)], axis=-1)
    agent_feat = agent_feat * agent_mask[..., None]

    dist = np.hypot(pos[..., 0], pos[..., 1])
    keep_agent = (agent_mask & (dist <= radius_m)).any(axis=-1)
    keep_agent[focal] = True
    new_focal = int(keep_agent[:focal].sum())
    agent_feat, agent_mask = agent_feat[keep_agent], agent_mask[keep_agent]

    return SceneInput(map=map_feat, map_mask=map_mask, agents=agent_feat,
                      agent_mask=agent_mask, focal_index=new_focal)


def world_to_focal(points: np.ndarray, origin: np.ndarray, theta: float) -> np.ndarray:
    """Apply the normalization transform to position arrays [..., 2]."""
    return _rotate(points - origin, np.cos(theta), np.sin(theta))


def focal_to_world(points: np.ndarray, origin: np.ndarray, theta: float) -> np.ndarray:
    """Inverse of the normalization transform for position arrays [..., 2]."""
    c, s = np.cos(theta), np.sin(theta)
    x = c * points[..., 0] - s * points[..., 1]
    y = s * points[..., 0] + c * points[..., 1]
    return np.stack([x, y], axis=-1) + origin


class PolylineEncoder(nn.Module):
    """Per-point MLP followed by a masked max-pool over each polyline.

    Pooling makes the encoding invariant to point order within a polyline;
    a learned provenance tag is added so map tokens are distinguishable from
    agent tokens after fusion. Fully-masked polylines yield zero vectors.
    """

    def __init__(self, dim: int, rng: np.random.Generator, dtype=np.float64,
                 in_dim: int = MAP_FEATURES):
        self.point_mlp = nn.MLP([in_dim, dim, dim], rng, dtype)
        self.tag = nn.Parameter(rng.normal(0.0, 0.02, dim).astype(dtype))

    def __call__(self, map_feat: np.ndarray, map_mask: np.ndarray):
        valid = np.asarray(map_mask, dtype=bool).any(axis=-1)
        x = Tensor(map_feat) if not isinstance(map_feat, Tensor) else map_feat
        h = self.point_mlp(x)
        h = T.where(np.asarray(map_mask, dtype=bool)[..., None], h, nn.MASK_FILL)
        pooled = T.max_(h, axis=-2)
        out = (pooled + self.tag) * valid[..., None].astype(pooled.dtype.type)
        return out, valid


def last_valid_index(mask: np.ndarray) -> np.ndarray:
    """Index of the last True along the trailing axis (0 if none)."""
    mask = np.asarray(mask, dtype=bool)
    steps = mask.shape[-1]
    rev = np.flip(mask, axis=-1)
    idx = steps - 1 - rev.argmax(axis=-1)
    return np.where(mask.any(axis=-1), idx, 0)


class AgentEncoder(nn.Module):
    """Per-step embedding, a causal scan stack, and a last-valid readout.

    Each agent history becomes one token: the feature of the causal stack at
    the agent's most recent valid step. Agents with no valid step yield zero
    vectors and are masked downstream.
    """

    def __init__(self, dim: int, rng: np.random.Generator, dtype=np.float64,
                 depth: int = 4, in_dim: int = AGENT_FEATURES,
                 state_dim: int = 16, expand: int = 2):
        self.step_mlp = nn.MLP([in_dim, dim, dim], rng, dtype)
        self.blocks = [nn.MambaBlock(dim, rng, dtype, expand, state_dim)
                       for _ in range(depth)]
        self.tag = nn.Parameter(rng.normal(0.0, 0.02, dim).astype(dtype))

    def __call__(self, agents: np.ndarray, agent_mask: np.ndarray):
        mask = np.asarray(agent_mask, dtype=bool)
        valid = mask.any(axis=-1)
        x = Tensor(agents) if not isinstance(agents, Tensor) else agents
        h = self.step_mlp(x)
        for block in self.blocks:
            h = block(h, step_valid=mask)
        idx = last_valid_index(mask)
        index = np.broadcast_to(idx[..., None, None],
                                h.shape[:-2] + (1, h.shape[-1]))
        feat = T.reshape(T.gather(h, index, axis=-2), h.shape[:-2] + (h.shape[-1],))
        out = (feat + self.tag) * valid[..., None].astype(feat.dtype.type)
        return out, valid


class SceneEncoder(nn.Module):
    """Full scene encoding: agent tokens + map tokens fused by attention."""

    def __init__(self, dim: int, rng: np.random.Generator, dtype=np.float64,
                 fusion_depth: int = 5, agent_depth: int = 4,
                 num_heads: int = 8, dropout_rate: float = 0.0,
                 state_dim: int = 16, expand: int = 2):
        self.polylines = PolylineEncoder(dim, rng, dtype)
        self.agents = AgentEncoder(dim, rng, dtype, depth=agent_depth,
                                   state_dim=state_dim, expand=expand)
        self.fusion = [nn.AttentionLayer(dim, num_heads, rng, dtype, dropout_rate)
                       for _ in range(fusion_depth)]

    def fuse(self, f_a: Tensor, f_m: Tensor, valid_a: np.ndarray,
             valid_m: np.ndarray, rng: np.random.Generator = None) -> SceneContext:
        """Concatenate token streams and run the attention stack.

        With zero fusion depth the tokens are the exact concatenation of the
        inputs. There is no positional encoding across tokens, so permuting
        map tokens (with their mask) permutes outputs identically.
        """
        tokens = T.concat([f_a, f_m], axis=-2)
        token_mask = np.concatenate([valid_a, valid_m], axis=-1)
        for layer in self.fusion:
            tokens = layer(tokens, key_valid=token_mask, rng=rng)
        n_a = f_a.shape[-2]
        provenance = np.zeros(token_mask.shape, dtype=np.int8)
        provenance[..., n_a:] = 1
        return SceneContext(tokens=tokens, token_mask=token_mask,
                            provenance=provenance)

    def __call__(self, map_feat, map_mask, agents, agent_mask,
                 rng: np.random.Generator = None) -> SceneContext:
        f_m, valid_m = self.polylines(map_feat, map_mask)
        f_a, valid_a = self.agents(agents, agent_mask)
        return self.fuse(f_a, f_m, valid_a, valid_m, rng=rng)
