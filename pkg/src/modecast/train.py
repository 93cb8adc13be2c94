"""Training loop, split evaluation, and run persistence.

Determinism contract: a run is a pure function of the config. Three rng
streams are spawned from the seed (weight init, epoch shuffling, dropout);
the latter two are checkpointed, so resuming from ``last.ckpt`` continues
the exact loss trajectory of the uninterrupted run. Log lines contain no
wall-clock values for the same reason.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import Dataset, collate
from .ensemble import kmeans_ensemble
from .losses import total_loss
from .metrics import MetricReport, compute_report
from .model import Forecaster, ModelConfig
from .optim import AdamW, clip_grad_norm, lr_at_epoch
from .tensor import no_grad

EVAL_BATCH_SIZE = 32


def spawn_rngs(seed: int):
    """(init, order, dropout) generators with independent streams."""
    init_ss, order_ss, dropout_ss = np.random.SeedSequence(seed).spawn(3)
    return (np.random.default_rng(init_ss), np.random.default_rng(order_ss),
            np.random.default_rng(dropout_ss))


def format_epoch_line(epoch: int, lr: float, train_loss: float,
                      val_min_ade: float, val_min_fde: float,
                      k: int = 6) -> str:
    return (f"epoch {epoch:03d} lr {lr:.8f} loss {train_loss:.6f} "
            f"val_minade{k} {val_min_ade:.6f} val_minfde{k} {val_min_fde:.6f}")


def predict_dataset(model: Forecaster, dataset: Dataset,
                    batch_size: int = EVAL_BATCH_SIZE):
    """Per-scene (trajectories [K,T,2], probabilities [K]) in float64."""
    trajs_list, probs_list = [], []
    with no_grad():
        for start in range(0, len(dataset), batch_size):
            batch = collate(dataset.examples[start:start + batch_size])
            forecast = model(batch.map, batch.map_mask, batch.agents,
                             batch.agent_mask)
            trajs = forecast.trajectories.data.astype(np.float64)
            probs = forecast.probabilities.data.astype(np.float64)
            for i in range(batch.size):
                trajs_list.append(trajs[i])
                probs_list.append(probs[i])
    return trajs_list, probs_list


def evaluate(model: Forecaster, dataset: Dataset, ks=(1, 6),
             split: str = "val") -> MetricReport:
    trajs_list, probs_list = predict_dataset(model, dataset)
    gt_list = [e.gt for e in dataset.examples]
    return compute_report(trajs_list, probs_list, gt_list, ks=ks, split=split)


def cv_report(dataset: Dataset, split: str = "test") -> MetricReport:
    """Constant-velocity baseline metrics (single mode, so k=1)."""
    trajs_list = [e.cv[None] for e in dataset.examples]
    probs_list = [np.ones(1)] * len(dataset)
    gt_list = [e.gt for e in dataset.examples]
    return compute_report(trajs_list, probs_list, gt_list, ks=(1,), split=split)


def ensemble_evaluate(models, dataset: Dataset, ks=(1, 6), split: str = "test",
                      n_clusters: int = 6, seed: int = 0) -> MetricReport:
    """Cluster the pooled per-scene candidates of several models."""
    if not models:
        raise ValueError("ensemble evaluation needs at least one model")
    per_model = [predict_dataset(m, dataset) for m in models]
    trajs_list, probs_list = [], []
    for i in range(len(dataset)):
        cands = np.concatenate([pm[0][i] for pm in per_model], axis=0)
        probs = np.concatenate([pm[1][i] for pm in per_model]) / len(models)
        rng = np.random.default_rng(seed * 100_003 + i)
        out_t, out_p = kmeans_ensemble(cands, probs, n_clusters=n_clusters,
                                       rng=rng)
        trajs_list.append(out_t)
        probs_list.append(out_p)
    gt_list = [e.gt for e in dataset.examples]
    return compute_report(trajs_list, probs_list, gt_list, ks=ks, split=split)


@dataclass
class TrainResult:
    best_path: str
    last_path: str
    best_val: float
    epochs_run: int
    log_lines: list = field(default_factory=list)


class Trainer:
    """Owns the model, optimizer, rng streams, and checkpoint files."""

    def __init__(self, cfg: RunConfig, train_ds: Dataset, val_ds: Dataset,
                 out_dir: str, log_fn=None):
        self.cfg = cfg
        self.train_ds = train_ds
        self.val_ds = val_ds
        self.out_dir = out_dir
        self.log_fn = log_fn
        os.makedirs(out_dir, exist_ok=True)
        init_rng, self.order_rng, self.dropout_rng = spawn_rngs(cfg.train.seed)
        self.model = Forecaster(cfg.model, init_rng)
        self.opt = AdamW(list(self.model.named_parameters()), lr=cfg.train.lr,
                         weight_decay=cfg.train.weight_decay)
        self.start_epoch = 1
        self.best_val = math.inf
        self.log_lines = []

    @property
    def best_path(self) -> str:
        return os.path.join(self.out_dir, "best.ckpt")

    @property
    def last_path(self) -> str:
        return os.path.join(self.out_dir, "last.ckpt")

    def _save(self, path: str, epoch: int, val_minade6: float) -> None:
        arrays = {f"model.{k}": v for k, v in self.model.state_dict().items()}
        opt_state = self.opt.state_dict()
        for name, arr in opt_state["m"].items():
            arrays[f"opt.m.{name}"] = arr
        for name, arr in opt_state["v"].items():
            arrays[f"opt.v.{name}"] = arr
        meta = {
            "epoch": epoch,
            "opt_step": opt_state["step"],
            "best_val": self.best_val,
            "val_minade6": val_minade6,
            "order_rng": self.order_rng.bit_generator.state,
            "dropout_rng": self.dropout_rng.bit_generator.state,
            "config": self.cfg.to_dict(),
        }
        save_checkpoint(path, arrays, meta)

    def resume(self, path: str) -> None:
        """Restore params, moments, rng streams, and progress counters."""
        arrays, meta = load_checkpoint(path)
        self.model.load_state_dict(
            {k[len("model."):]: v for k, v in arrays.items()
             if k.startswith("model.")})
        opt_state = {
            "step": meta["opt_step"],
            "m": {k[len("opt.m."):]: v for k, v in arrays.items()
                  if k.startswith("opt.m.")},
            "v": {k[len("opt.v."):]: v for k, v in arrays.items()
                  if k.startswith("opt.v.")},
        }
        self.opt.load_state_dict(opt_state)
        self.order_rng.bit_generator.state = meta["order_rng"]
        self.dropout_rng.bit_generator.state = meta["dropout_rng"]
        self.start_epoch = int(meta["epoch"]) + 1
        self.best_val = float(meta["best_val"])

    def _log(self, line: str) -> None:
        self.log_lines.append(line)
        if self.log_fn is not None:
            self.log_fn(line)

    def _train_epoch(self, epoch: int, lr: float) -> float:
        tcfg = self.cfg.train
        order = self.order_rng.permutation(len(self.train_ds))
        loss_sum = 0.0
        for bi, start in enumerate(range(0, len(order), tcfg.batch_size)):
            batch = collate([self.train_ds[i]
                             for i in order[start:start + tcfg.batch_size]])
            dropout = self.dropout_rng if self.cfg.model.dropout > 0 else None
            forecast = self.model(batch.map, batch.map_mask, batch.agents,
                                  batch.agent_mask, rng=dropout)
            try:
                breakdown = total_loss(forecast, batch.gt, use_aux=tcfg.use_aux)
            except FloatingPointError as err:
                raise FloatingPointError(
                    f"aborting at epoch {epoch} batch {bi} "
                    f"(examples {batch.indices.tolist()}): {err}") from err
            self.opt.zero_grad()
            breakdown.total.backward()
            if tcfg.clip_norm is not None:
                clip_grad_norm(self.opt.params, tcfg.clip_norm)
            self.opt.step(lr=lr)
            loss_sum += float(breakdown.total.data) * batch.size
        return loss_sum / len(order)

    def train(self, until_epoch: int = None) -> TrainResult:
        """Run epochs up to the configured total (or ``until_epoch``).

        Stopping early keeps the lr schedule of the full run, so a resumed
        trainer continues the identical trajectory.
        """
        tcfg = self.cfg.train
        last = tcfg.epochs if until_epoch is None else min(until_epoch, tcfg.epochs)
        val_k = min(6, self.cfg.model.modes)
        epochs_run = 0
        for epoch in range(self.start_epoch, last + 1):
            lr = lr_at_epoch(epoch, tcfg.lr, tcfg.epochs, tcfg.warmup_epochs)
            train_loss = self._train_epoch(epoch, lr)
            report = evaluate(self.model, self.val_ds, ks=(val_k,), split="val")
            val_ade = report.get("min_ade", val_k)
            val_fde = report.get("min_fde", val_k)
            self._log(format_epoch_line(epoch, lr, train_loss, val_ade, val_fde,
                                        k=val_k))
            if val_ade < self.best_val:
                self.best_val = val_ade
                self._save(self.best_path, epoch, val_ade)
            self._save(self.last_path, epoch, val_ade)
            epochs_run += 1
        return TrainResult(best_path=self.best_path, last_path=self.last_path,
                           best_val=self.best_val, epochs_run=epochs_run,
                           log_lines=list(self.log_lines))


def load_model(checkpoint_path: str) -> Forecaster:
    """Rebuild a model from a checkpoint's embedded config and weights."""
    arrays, meta = load_checkpoint(checkpoint_path)
    model_cfg = ModelConfig.from_dict(meta["config"]["model"])
    model = Forecaster(model_cfg, np.random.default_rng(0))
    model.load_state_dict({k[len("model."):]: v for k, v in arrays.items()
                           if k.startswith("model.")})
    return model
