"""Dataset generation, manifests, and batch collation.

A dataset is a directory of scenario files plus a ``manifest.json`` listing
(path, split, focal ids) per scene. Scenario seeds are derived as
``base_seed * 1_000_000 + index`` so datasets are reproducible and
individual scenes can be regenerated in isolation.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .scenario import (GenConfig, cv_forecast, generate_scenario,
                       load_scenario, save_scenario, to_scene_input)

MANIFEST_VERSION = 1
DEFAULT_SPLIT_RATIOS = (0.8, 0.1, 0.1)


@dataclass
class ManifestEntry:
    path: str
    split: str
    focal_ids: list


@dataclass
class Manifest:
    version: int
    seed: int
    entries: list

    def split_entries(self, split: str) -> list:
        return [e for e in self.entries if e.split == split]


def split_counts(n: int, ratios=DEFAULT_SPLIT_RATIOS):
    """(train, val, test) sizes; the test split absorbs rounding."""
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must be 3 non-negative values summing to 1, "
                         f"got {ratios}")
    n_train = int(n * ratios[0])
    n_val = int(n * ratios[1])
    return n_train, n_val, n - n_train - n_val


def generate_dataset(out_dir: str, n: int, seed: int, config: GenConfig = None,
                     ratios=DEFAULT_SPLIT_RATIOS) -> str:
    """Write ``n`` scenarios plus a manifest; returns the manifest path."""
    if n < 1:
        raise ValueError(f"dataset size must be >= 1, got {n}")
    cfg = config if config is not None else GenConfig()
    n_train, n_val, _ = split_counts(n, ratios)
    scene_dir = os.path.join(out_dir, "scenes")
    os.makedirs(scene_dir, exist_ok=True)

    entries = []
    for i in range(n):
        split = "train" if i < n_train else ("val" if i < n_train + n_val else "test")
        s = generate_scenario(seed * 1_000_000 + i, cfg)
        s.split = split
        rel = os.path.join("scenes", f"s{i:05d}.json")
        save_scenario(s, os.path.join(out_dir, rel))
        entries.append({"path": rel, "split": split, "focal": list(s.focal_ids)})

    manifest_path = os.path.join(out_dir, "manifest.json")
    payload = {"version": MANIFEST_VERSION, "seed": seed, "scenarios": entries}
    tmp = f"{manifest_path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1)
    os.replace(tmp, manifest_path)
    return manifest_path


def load_manifest(path: str) -> Manifest:
    with open(path, "r", encoding="utf-8") as fh:
        raw = json.load(fh)

    def require(obj, fld, where):
        if fld not in obj:
            raise ValueError(f"{where} missing field {fld!r}")
        return obj[fld]

    version = require(raw, "version", "manifest")
    if version != MANIFEST_VERSION:
        raise ValueError(f"unsupported manifest version {version!r}")
    seed = int(require(raw, "seed", "manifest"))
    entries = []
    for i, e in enumerate(require(raw, "scenarios", "manifest")):
        entries.append(ManifestEntry(
            path=require(e, "path", f"scenarios[{i}]"),
            split=require(e, "split", f"scenarios[{i}]"),
            focal_ids=list(require(e, "focal", f"scenarios[{i}]"))))
    return Manifest(version=version, seed=seed, entries=entries)


@dataclass
class Example:
    """One training example: normalized scene plus focal-frame targets."""

    scene: object            # SceneInput
    gt: np.ndarray           # [T_f, 2] focal frame
    cv: np.ndarray           # [T_f, 2] constant-velocity baseline
    scene_path: str
    focal_id: str
    index: int


class Dataset:
    """Eagerly converted examples for one split of a manifest."""

    def __init__(self, examples: list):
        if not examples:
            raise ValueError("dataset split is empty")
        t_f = examples[0].gt.shape[0]
        if any(e.gt.shape != (t_f, 2) for e in examples):
            raise ValueError("all examples must share the same future horizon")
        self.examples = examples
        self.future_steps = t_f

    @classmethod
    def from_manifest(cls, manifest_path: str, split: str) -> "Dataset":
        manifest = load_manifest(manifest_path)
        root = os.path.dirname(os.path.abspath(manifest_path))
        examples = []
        for entry in manifest.split_entries(split):
            s = load_scenario(os.path.join(root, entry.path))
            for fid in entry.focal_ids:
                scene, gt = to_scene_input(s, fid)
                examples.append(Example(
                    scene=scene, gt=gt, cv=cv_forecast(s, fid),
                    scene_path=entry.path, focal_id=fid, index=len(examples)))
        return cls(examples)

    def __len__(self):
        return len(self.examples)

    def __getitem__(self, i):
        return self.examples[i]


@dataclass
class Batch:
    """Zero-padded scene arrays; padding is masked off."""

    map: np.ndarray          # [B, N_m, L, MAP_FEATURES]
    map_mask: np.ndarray     # [B, N_m, L] bool
    agents: np.ndarray       # [B, N_a, T_h, AGENT_FEATURES]
    agent_mask: np.ndarray   # [B, N_a, T_h] bool
    gt: np.ndarray           # [B, T_f, 2]
    indices: np.ndarray      # [B] dataset indices

    @property
    def size(self) -> int:
        return self.gt.shape[0]


def collate(examples: list, dtype=np.float32) -> Batch:
    """Stack examples, padding map tokens and agents to the batch maxima."""
    if not examples:
        raise ValueError("cannot collate an empty batch")
    b = len(examples)
    n_m = max(e.scene.map.shape[0] for e in examples)
    n_a = max(e.scene.agents.shape[0] for e in examples)
    seg_l = examples[0].scene.map.shape[1]
    c_map = examples[0].scene.map.shape[2]
    t_h = examples[0].scene.agents.shape[1]
    c_ag = examples[0].scene.agents.shape[2]
    t_f = examples[0].gt.shape[0]

    map_feat = np.zeros((b, n_m, seg_l, c_map), dtype=dtype)
    map_mask = np.zeros((b, n_m, seg_l), dtype=bool)
    agents = np.zeros((b, n_a, t_h, c_ag), dtype=dtype)
    agent_mask = np.zeros((b, n_a, t_h), dtype=bool)
    gt = np.zeros((b, t_f, 2), dtype=dtype)
    indices = np.zeros(b, dtype=np.int64)
    for i, e in enumerate(examples):
        m, a = e.scene.map.shape[0], e.scene.agents.shape[0]
        map_feat[i, :m] = e.scene.map
        map_mask[i, :m] = e.scene.map_mask
        agents[i, :a] = e.scene.agents
        agent_mask[i, :a] = e.scene.agent_mask
        gt[i] = e.gt
        indices[i] = e.index
    return Batch(map=map_feat, map_mask=map_mask, agents=agents,
                 agent_mask=agent_mask, gt=gt, indices=indices)
