"""Synthetic driving scenarios: road templates, motion programs, file I/O.

A :class:`Scenario` stores full world-frame agent trajectories over
``history_steps + future_steps`` at a fixed ``dt``, plus the map polylines
they drive on. Scenes are generated from three road templates (straight,
curve, 4-way junction) populated with agents running simple motion
programs. The junction template samples the focal agent's branch (through,
left, right), so the ground-truth future is genuinely multimodal across
seeds.

Scene files are JSON with a small documented schema; loading validates
every field and names the offending one on failure.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np

from .encoder import (DEFAULT_RADIUS_M, MAP_TYPES, WorldScene, normalize_scene,
                      world_to_focal)

SCENARIO_FILE_VERSION = 1
MAX_SPEED_MPS = 30.0
SPLITS = ("train", "val", "test")
PROGRAMS = ("constant_velocity", "constant_turn", "lane_follow", "lane_change")
LAYOUTS = ("random", "straight", "curve", "junction")

# Junction geometry (template frame, right-hand traffic).
_JUNCTION_HALF = 8.0
_LANE_W = 3.5
_LEG = 60.0


@dataclass(eq=False)
class MapPolyline:
    """One map element: a 2-D point sequence tagged lane or crossing."""

    kind: str
    points: np.ndarray  # [P, 2] float64, P >= 2


@dataclass(eq=False)
class AgentTrack:
    """Full trajectory of one agent: rows (x, y, heading, vx, vy, valid)."""

    agent_id: str
    states: np.ndarray  # [T_h + T_f, 6] float64


@dataclass(eq=False)
class Scenario:
    """One synthetic scene with map, agents, and focal designation."""

    dt: float
    history_steps: int
    future_steps: int
    seed: int
    split: str
    polylines: list
    agents: list
    focal_ids: list

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.history_steps < 1 or self.future_steps < 1:
            raise ValueError("history_steps and future_steps must be >= 1")
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")
        n_steps = self.history_steps + self.future_steps
        for i, p in enumerate(self.polylines):
            if p.kind not in MAP_TYPES:
                raise ValueError(
                    f"polylines[{i}] has kind {p.kind!r}, expected one of {MAP_TYPES}")
            if p.points.ndim != 2 or p.points.shape[1] != 2 or p.points.shape[0] < 2:
                raise ValueError(f"polylines[{i}] must be [P>=2, 2] points")
        ids = [a.agent_id for a in self.agents]
        if len(set(ids)) != len(ids):
            raise ValueError("agent ids must be unique")
        for a in self.agents:
            if a.states.shape != (n_steps, 6):
                raise ValueError(
                    f"agent {a.agent_id!r} states must be [{n_steps}, 6], "
                    f"got {a.states.shape}")
            valid = a.states[:, 5] > 0.5
            speed = np.hypot(a.states[:, 3], a.states[:, 4])
            if np.any(speed[valid] > MAX_SPEED_MPS + 1e-9):
                raise ValueError(
                    f"agent {a.agent_id!r} exceeds {MAX_SPEED_MPS} m/s")
        for fid in self.focal_ids:
            if fid not in ids:
                raise ValueError(f"focal id {fid!r} not among agent ids")
            st = self.agents[ids.index(fid)].states
            if not np.all(st[self.history_steps - 1:, 5] > 0.5):
                raise ValueError(
                    f"focal agent {fid!r} must be valid from the current "
                    "step through the full future")

    def agent(self, agent_id: str) -> AgentTrack:
        for a in self.agents:
            if a.agent_id == agent_id:
                return a
        raise ValueError(f"unknown agent id {agent_id!r}")

    def equals(self, other: "Scenario") -> bool:
        """Exact (bitwise) equality of every field."""
        if (self.dt != other.dt or self.history_steps != other.history_steps
                or self.future_steps != other.future_steps
                or self.seed != other.seed or self.split != other.split
                or self.focal_ids != other.focal_ids
                or len(self.polylines) != len(other.polylines)
                or len(self.agents) != len(other.agents)):
            return False
        for p, q in zip(self.polylines, other.polylines):
            if p.kind != q.kind or not np.array_equal(p.points, q.points):
                return False
        for a, b in zip(self.agents, other.agents):
            if a.agent_id != b.agent_id or not np.array_equal(a.states, b.states):
                return False
        return True


@dataclass
class GenConfig:
    """Knobs for :func:`generate_scenario`; invalid settings are rejected."""

    min_lanes: int = 4
    max_lanes: int = 12
    min_agents: int = 2
    max_agents: int = 8
    history_steps: int = 20
    future_steps: int = 30
    dt: float = 0.1
    noise_sigma: float = 0.1
    layout: str = "random"
    programs: tuple = PROGRAMS

    def __post_init__(self):
        if not (1 <= self.min_lanes <= self.max_lanes):
            raise ValueError("need 1 <= min_lanes <= max_lanes")
        if not (1 <= self.min_agents <= self.max_agents):
            raise ValueError("need 1 <= min_agents <= max_agents")
        if self.history_steps < 1 or self.future_steps < 1:
            raise ValueError("history_steps and future_steps must be >= 1")
        if self.dt <= 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.layout not in LAYOUTS:
            raise ValueError(f"layout must be one of {LAYOUTS}, got {self.layout!r}")
        if not self.programs or any(p not in PROGRAMS for p in self.programs):
            raise ValueError(f"programs must be a non-empty subset of {PROGRAMS}")


class _Path:
    """Arc-length parameterized polyline; queries clamp to the endpoints."""

    def __init__(self, points: np.ndarray):
        self.points = np.asarray(points, dtype=np.float64)
        seg = np.diff(self.points, axis=0)
        self.cum = np.concatenate(
            [[0.0], np.cumsum(np.hypot(seg[:, 0], seg[:, 1]))])
        self.length = float(self.cum[-1])

    def pos(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=np.float64)
        x = np.interp(s, self.cum, self.points[:, 0])
        y = np.interp(s, self.cum, self.points[:, 1])
        return np.stack([x, y], axis=-1)

    def tangent_angle(self, s) -> np.ndarray:
        # Probe inside the domain so clamped queries keep the end tangent.
        eps = 0.25
        sc = np.clip(np.asarray(s, dtype=np.float64), eps,
                     max(eps, self.length - eps))
        d = self.pos(sc + eps) - self.pos(sc - eps)
        return np.arctan2(d[..., 1], d[..., 0])


def _line(p0, p1) -> np.ndarray:
    return np.array([p0, p1], dtype=np.float64)


def _arc(center, radius, a0, a1, step=1.0) -> np.ndarray:
    n = max(2, int(math.ceil(abs(a1 - a0) * radius / step)) + 1)
    ang = np.linspace(a0, a1, n)
    return np.stack([center[0] + radius * np.cos(ang),
                     center[1] + radius * np.sin(ang)], axis=1)


def _straight_template(rng: np.random.Generator, cfg: GenConfig):
    n_lanes = int(rng.integers(cfg.min_lanes, cfg.max_lanes + 1))
    half = 80.0
    polylines = []
    for i in range(n_lanes):
        y = (i - (n_lanes - 1) / 2.0) * _LANE_W
        polylines.append(MapPolyline("lane", _line((-half, y), (half, y))))
    if rng.uniform() < 0.5:
        x = rng.uniform(-40.0, 40.0)
        span = n_lanes * _LANE_W / 2.0 + 1.0
        polylines.append(MapPolyline("crossing", _line((x, -span), (x, span))))
    lane_paths = [_Path(p.points) for p in polylines if p.kind == "lane"]
    return polylines, lane_paths, None


def _curve_template(rng: np.random.Generator, cfg: GenConfig):
    n_lanes = int(rng.integers(cfg.min_lanes, cfg.max_lanes + 1))
    radius = rng.uniform(30.0, 80.0)
    span = float(np.clip(140.0 / radius, 1.2, 3.5))
    a0 = rng.uniform(0.0, 2.0 * np.pi)
    polylines = []
    for i in range(n_lanes):
        pts = _arc((0.0, 0.0), radius + i * _LANE_W, a0, a0 + span)
        polylines.append(MapPolyline("lane", pts))
    lane_paths = [_Path(p.points) for p in polylines]
    return polylines, lane_paths, None


def _junction_template(rng: np.random.Generator, cfg: GenConfig):
    """4-way junction. The focal agent approaches from the west; its branch
    (through / left / right) is sampled elsewhere from the returned paths."""
    h, off, leg = _JUNCTION_HALF, _LANE_W / 2.0, _LEG
    through = {
        "we": _line((-leg, -off), (leg, -off)),
        "ew": _line((leg, off), (-leg, off)),
        "ns": _line((-off, leg), (-off, -leg)),
        "sn": _line((off, -leg), (off, leg)),
    }
    # Quarter-circle connectors off the west approach; radii follow from
    # matching the incoming and outgoing lane offsets.
    left_arc = _arc((-h, h), h + off, -np.pi / 2.0, 0.0)
    right_arc = _arc((-h, -h), h - off, np.pi / 2.0, 0.0)
    polylines = [MapPolyline("lane", pts) for pts in through.values()]
    polylines.append(MapPolyline("lane", left_arc))
    polylines.append(MapPolyline("lane", right_arc))
    walk = h + 1.5
    span = 2.0 * _LANE_W * 0.7
    for a, b in [((-walk, -span), (-walk, span)), ((walk, -span), (walk, span)),
                 ((-span, -walk), (span, -walk)), ((-span, walk), (span, walk))]:
        polylines.append(MapPolyline("crossing", _line(a, b)))

    approach = _line((-leg, -off), (-h, -off))
    branches = {
        "through": _Path(through["we"]),
        "left": _Path(np.concatenate(
            [approach, left_arc[1:], _line((off, h), (off, leg))[1:]])),
        "right": _Path(np.concatenate(
            [approach, right_arc[1:], _line((-off, -h), (-off, -leg))[1:]])),
    }
    lane_paths = [_Path(through[k]) for k in ("we", "ew", "ns", "sn")]
    return polylines, lane_paths, branches


def _smooth_noise(rng: np.random.Generator, n: int, sigma: float,
                  window: int = 9) -> np.ndarray:
    """Low-pass positional jitter with per-sample std ~= sigma."""
    white = rng.normal(0.0, 1.0, size=(n + window - 1, 2))
    kernel = np.full(window, 1.0 / window)
    smooth = np.stack(
        [np.convolve(white[:, d], kernel, mode="valid") for d in range(2)],
        axis=1)
    return sigma * math.sqrt(window) * smooth


def _cv_positions(p0, heading, speed, n, dt):
    u = np.array([math.cos(heading), math.sin(heading)])
    return np.asarray(p0) + (speed * dt) * np.arange(n + 1)[:, None] * u


def _turn_positions(p0, heading, speed, omega, n, dt):
    th = heading + omega * dt * np.arange(n + 1)
    x = p0[0] + (speed / omega) * (np.sin(th) - math.sin(heading))
    y = p0[1] - (speed / omega) * (np.cos(th) - math.cos(heading))
    return np.stack([x, y], axis=1)


def _follow_positions(path, s0, speeds, dt):
    s = s0 + np.concatenate([[0.0], np.cumsum(speeds * dt)])
    return path.pos(s)


def _lane_change_positions(path, s0, speed, d_lat, t0, dur, n, dt):
    t = dt * np.arange(n + 1)
    s = s0 + speed * t
    base = path.pos(s)
    ang = path.tangent_angle(s)
    normal = np.stack([-np.sin(ang), np.cos(ang)], axis=1)
    blend = 0.5 * (1.0 - np.cos(np.pi * np.clip((t - t0) / dur, 0.0, 1.0)))
    return base + (d_lat * blend)[:, None] * normal


def _focal_positions(layout, lane_paths, branches, rng, cfg, n_steps):
    dt = cfg.dt
    if layout == "junction":
        # Speed/start ranges put the branch divergence inside the future
        # window, keeping the endpoint classifiable.
        branch = ("through", "left", "right")[int(rng.integers(3))]
        path = branches[branch]
        speed = rng.uniform(7.0, 12.0)
        entry_s = _LEG - _JUNCTION_HALF
        s0 = max(0.0, entry_s - rng.uniform(1.0, 6.0)
                 - speed * cfg.history_steps * dt)
        speeds = np.full(n_steps, speed)
        return _follow_positions(path, s0, speeds, dt)
    path = lane_paths[int(rng.integers(len(lane_paths)))]
    s0 = rng.uniform(8.0, 20.0)
    speed = rng.uniform(3.0, 12.0)
    if "lane_follow" in cfg.programs:
        accel = rng.uniform(-0.8, 0.8)
        speeds = np.clip(speed + accel * dt * np.arange(n_steps), 0.5, 16.0)
        return _follow_positions(path, s0, speeds, dt)
    program = cfg.programs[0]
    p0 = path.pos(s0)
    heading = float(path.tangent_angle(s0))
    if program == "constant_velocity":
        return _cv_positions(p0, heading, speed, n_steps, dt)
    if program == "constant_turn":
        omega = rng.uniform(0.05, 0.25) * (1.0 if rng.uniform() < 0.5 else -1.0)
        return _turn_positions(p0, heading, speed, omega, n_steps, dt)
    return _lane_change_positions(path, s0, speed, _LANE_W, rng.uniform(0.3, 1.5),
                                  rng.uniform(1.5, 2.5), n_steps, dt)


def _other_positions(lane_paths, rng, cfg, n_steps):
    dt = cfg.dt
    program = cfg.programs[int(rng.integers(len(cfg.programs)))]
    path = lane_paths[int(rng.integers(len(lane_paths)))]
    if program == "lane_follow" or (program == "lane_change" and len(lane_paths) < 2):
        s0 = rng.uniform(0.0, max(1.0, path.length - 20.0))
        v0 = rng.uniform(3.0, 12.0)
        accel = rng.uniform(-1.0, 1.0)
        speeds = np.clip(v0 + accel * dt * np.arange(n_steps), 0.5, 16.0)
        return _follow_positions(path, s0, speeds, dt)
    if program == "lane_change":
        s0 = rng.uniform(0.0, max(1.0, path.length - 30.0))
        d_lat = _LANE_W * (1.0 if rng.uniform() < 0.5 else -1.0)
        return _lane_change_positions(path, s0, rng.uniform(4.0, 12.0), d_lat,
                                      rng.uniform(0.3, 2.0),
                                      rng.uniform(1.5, 2.5), n_steps, dt)
    anchor = path.pos(rng.uniform(0.0, path.length)) + rng.uniform(-8.0, 8.0, 2)
    heading = rng.uniform(0.0, 2.0 * np.pi)
    speed = rng.uniform(3.0, 12.0)
    if program == "constant_velocity":
        return _cv_positions(anchor, heading, speed, n_steps, dt)
    omega = rng.uniform(0.05, 0.25) * (1.0 if rng.uniform() < 0.5 else -1.0)
    return _turn_positions(anchor, heading, speed, omega, n_steps, dt)


def _finish_track(positions, n_steps, dt, sigma, rng, lead_invalid=0):
    if sigma > 0:
        positions = positions + _smooth_noise(rng, positions.shape[0], sigma)
    vel = np.diff(positions, axis=0) / dt
    heading = np.arctan2(vel[:, 1], vel[:, 0])
    valid = np.ones(n_steps)
    valid[:lead_invalid] = 0.0
    return np.column_stack(
        [positions[:n_steps], heading[:, None], vel, valid[:, None]])


def generate_scenario(seed: int, config: GenConfig = None) -> Scenario:
    """Build one deterministic scenario from a seed.

    The focal agent drives a lane (at a junction, a sampled branch); other
    agents run programs sampled from ``config.programs``. All positions get
    zero-mean smooth noise of ``config.noise_sigma`` meters, after which
    velocities and headings are recomputed from forward differences so the
    stored states stay self-consistent.
    """
    cfg = config if config is not None else GenConfig()
    rng = np.random.default_rng(seed)
    n_steps = cfg.history_steps + cfg.future_steps

    layout = cfg.layout
    if layout == "random":
        layout = ("straight", "curve", "junction")[int(rng.integers(3))]
    builder = {"straight": _straight_template, "curve": _curve_template,
               "junction": _junction_template}[layout]
    polylines, lane_paths, branches = builder(rng, cfg)

    n_agents = int(rng.integers(cfg.min_agents, cfg.max_agents + 1))
    plans = [(_focal_positions(layout, lane_paths, branches, rng, cfg, n_steps), 0)]
    for _ in range(n_agents - 1):
        pos = _other_positions(lane_paths, rng, cfg, n_steps)
        lead = 0
        if rng.uniform() < 0.25:
            lead = int(rng.integers(1, cfg.history_steps // 2 + 1))
        plans.append((pos, lead))

    # Rigid world transform so scenes exercise the focal normalization.
    phi = rng.uniform(0.0, 2.0 * np.pi)
    trans = rng.uniform(-40.0, 40.0, 2)
    c, s = math.cos(phi), math.sin(phi)

    def place(pts):
        x = c * pts[..., 0] - s * pts[..., 1]
        y = s * pts[..., 0] + c * pts[..., 1]
        return np.stack([x, y], axis=-1) + trans

    polylines = [MapPolyline(p.kind, place(p.points)) for p in polylines]
    tracks = [_finish_track(place(pos), n_steps, cfg.dt, cfg.noise_sigma, rng, lead)
              for pos, lead in plans]

    order = rng.permutation(n_agents)
    agents = [AgentTrack(f"a{i}", tracks[order[i]]) for i in range(n_agents)]
    focal_ids = [f"a{int(np.where(order == 0)[0][0])}"]
    return Scenario(dt=cfg.dt, history_steps=cfg.history_steps,
                    future_steps=cfg.future_steps, seed=seed, split="train",
                    polylines=polylines, agents=agents, focal_ids=focal_ids)


# --- file I/O ---

def _require(obj: dict, fld: str, where: str):
    if fld not in obj:
        raise ValueError(f"{where} missing field {fld!r}")
    return obj[fld]


def save_scenario(s: Scenario, path: str) -> None:
    payload = {
        "version": SCENARIO_FILE_VERSION,
        "dt": s.dt,
        "history_steps": s.history_steps,
        "future_steps": s.future_steps,
        "seed": s.seed,
        "split": s.split,
        "polylines": [{"type": p.kind, "points": p.points.tolist()}
                      for p in s.polylines],
        "agents": [{"id": a.agent_id, "states": a.states.tolist()}
                   for a in s.agents],
        "focal": list(s.focal_ids),
    }
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, separators=(",", ":"))
    os.replace(tmp, path)


def load_scenario(path: str) -> Scenario:
    with open(path, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    where = "scenario file"
    version = _require(raw, "version", where)
    if version != SCENARIO_FILE_VERSION:
        raise ValueError(f"unsupported scenario file version {version!r}")
    dt = float(_require(raw, "dt", where))
    history = int(_require(raw, "history_steps", where))
    future = int(_require(raw, "future_steps", where))
    seed = int(_require(raw, "seed", where))
    split = _require(raw, "split", where)
    polylines = []
    for i, p in enumerate(_require(raw, "polylines", where)):
        kind = _require(p, "type", f"polylines[{i}]")
        pts = np.asarray(_require(p, "points", f"polylines[{i}]"), dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise ValueError(f"polylines[{i}].points must be [P, 2] numbers")
        polylines.append(MapPolyline(kind, pts))
    agents = []
    for i, a in enumerate(_require(raw, "agents", where)):
        aid = _require(a, "id", f"agents[{i}]")
        states = np.asarray(_require(a, "states", f"agents[{i}]"), dtype=np.float64)
        if states.ndim != 2 or states.shape[1] != 6:
            raise ValueError(
                f"agents[{i}].states rows must have 6 values "
                "(x, y, heading, vx, vy, valid)")
        agents.append(AgentTrack(aid, states))
    focal = list(_require(raw, "focal", where))
    return Scenario(dt=dt, history_steps=history, future_steps=future, seed=seed,
                    split=split, polylines=polylines, agents=agents,
                    focal_ids=focal)


# --- model input conversion ---

def _chunk_segments(seg: np.ndarray, token_segments: int):
    n = seg.shape[0]
    m = (n + token_segments - 1) // token_segments
    tokens = np.zeros((m, token_segments, 4))
    mask = np.zeros((m, token_segments), dtype=bool)
    tokens.reshape(-1, 4)[:n] = seg
    mask.reshape(-1)[:n] = True
    return tokens, mask


def to_world_scene(s: Scenario, focal_id: str, token_segments: int = 20,
                   spacing: float = 1.0) -> WorldScene:
    """Resample polylines at ~``spacing`` meters and chop them into tokens of
    ``token_segments`` consecutive segments; slice agent histories."""
    tok_list, type_list, mask_list = [], [], []
    for p in s.polylines:
        path = _Path(p.points)
        n_seg = max(1, int(round(path.length / spacing)))
        pts = path.pos(np.linspace(0.0, path.length, n_seg + 1))
        seg = np.concatenate([pts[:-1], pts[1:]], axis=1)
        tokens, mask = _chunk_segments(seg, token_segments)
        tok_list.append(tokens)
        mask_list.append(mask)
        type_list.extend([MAP_TYPES.index(p.kind)] * tokens.shape[0])
    if tok_list:
        map_segments = np.concatenate(tok_list, axis=0)
        map_mask = np.concatenate(mask_list, axis=0)
    else:
        map_segments = np.zeros((0, token_segments, 4))
        map_mask = np.zeros((0, token_segments), dtype=bool)

    ids = [a.agent_id for a in s.agents]
    if focal_id not in ids:
        raise ValueError(f"unknown focal id {focal_id!r}")
    hist = np.stack([a.states[:s.history_steps] for a in s.agents])
    return WorldScene(map_segments=map_segments,
                      map_types=np.asarray(type_list, dtype=np.int64),
                      map_mask=map_mask,
                      agents=hist[..., :5],
                      agent_mask=hist[..., 5] > 0.5,
                      focal_index=ids.index(focal_id))


def scene_frame(s: Scenario, focal_id: str):
    """(origin, theta) of the focal frame at the current step."""
    cur = s.agent(focal_id).states[s.history_steps - 1]
    return cur[:2].copy(), float(cur[2])


def gt_future_world(s: Scenario, focal_id: str) -> np.ndarray:
    return s.agent(focal_id).states[s.history_steps:, :2].copy()


def to_scene_input(s: Scenario, focal_id: str = None, token_segments: int = 20,
                   spacing: float = 1.0, radius_m: float = None):
    """Build the normalized model input and the focal-frame gt future."""
    if focal_id is None:
        focal_id = s.focal_ids[0]
    world = to_world_scene(s, focal_id, token_segments, spacing)
    radius = DEFAULT_RADIUS_M if radius_m is None else radius_m
    scene = normalize_scene(world, radius_m=radius)
    origin, theta = scene_frame(s, focal_id)
    gt = world_to_focal(gt_future_world(s, focal_id), origin, theta)
    return scene, gt


def cv_forecast(s: Scenario, focal_id: str = None) -> np.ndarray:
    """Constant-velocity baseline future in the focal frame, [T_f, 2]."""
    if focal_id is None:
        focal_id = s.focal_ids[0]
    cur = s.agent(focal_id).states[s.history_steps - 1]
    steps = np.arange(1, s.future_steps + 1, dtype=np.float64)[:, None]
    world = cur[:2] + steps * s.dt * cur[3:5]
    return world_to_focal(world, cur[:2].copy(), float(cur[2]))
