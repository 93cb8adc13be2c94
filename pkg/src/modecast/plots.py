"""Figure rendering for the CLI report paths.

Everything draws through the Agg backend and writes straight to disk, so
the functions are safe in headless runs and tests. Overlay rendering
returns the world-frame bounding box it actually drew, which the tests use
to confirm the figure covers the scene.
"""

from __future__ import annotations

import re

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

_MAP_STYLES = {
    "lane": dict(color="0.70", linewidth=1.2, zorder=1),
    "crossing": dict(color="tab:orange", linewidth=1.2, linestyle="--", zorder=1),
}
_FALLBACK_STYLE = dict(color="0.85", linewidth=1.0, zorder=1)

EPOCH_LINE_RE = re.compile(
    r"epoch (\d+) lr (\S+) loss (\S+) val_minade(\d+) (\S+) val_minfde\d+ (\S+)")


def parse_epoch_lines(lines):
    """Parse training log lines into plottable arrays.

    Returns a dict with ``epoch``, ``lr``, ``loss``, ``val_min_ade``,
    ``val_min_fde`` arrays and the integer ``k`` the validation metrics
    were computed at. Non-matching lines are skipped.
    """
    rows = [m.groups() for line in lines if (m := EPOCH_LINE_RE.search(line))]
    if not rows:
        raise ValueError("no epoch lines found in the training log")
    cols = list(zip(*rows))
    return {
        "epoch": np.array(cols[0], dtype=int),
        "lr": np.array(cols[1], dtype=float),
        "loss": np.array(cols[2], dtype=float),
        "k": int(cols[3][0]),
        "val_min_ade": np.array(cols[4], dtype=float),
        "val_min_fde": np.array(cols[5], dtype=float),
    }


def _collect_points(polylines, *arrays):
    pts = [np.asarray(p, dtype=np.float64).reshape(-1, 2)
           for _, p in polylines]
    for arr in arrays:
        if arr is not None:
            pts.append(np.asarray(arr, dtype=np.float64).reshape(-1, 2))
    return np.concatenate(pts, axis=0) if pts else np.zeros((0, 2))


def render_forecast_overlay(path, polylines, trajectories, probabilities,
                            gt=None, history=None, title=None):
    """Draw map, history, ground truth, and predicted modes in one frame.

    ``polylines`` is an iterable of (kind, points [P, 2]); ``trajectories``
    is [K, T, 2] with ``probabilities`` [K]. All coordinates share one
    frame (the caller decides which). Returns the drawn data extent as
    (xmin, xmax, ymin, ymax).
    """
    trajectories = np.asarray(trajectories, dtype=np.float64)
    probabilities = np.asarray(probabilities, dtype=np.float64)
    if trajectories.ndim != 3 or trajectories.shape[-1] != 2:
        raise ValueError(f"trajectories must be [K, T, 2], got {trajectories.shape}")
    if probabilities.shape != trajectories.shape[:1]:
        raise ValueError(
            f"got {probabilities.shape[0] if probabilities.ndim else 0} "
            f"probabilities for {trajectories.shape[0]} trajectories")

    polylines = list(polylines)
    fig, ax = plt.subplots(figsize=(7.0, 7.0))
    for kind, points in polylines:
        points = np.asarray(points, dtype=np.float64)
        style = _MAP_STYLES.get(kind, _FALLBACK_STYLE)
        ax.plot(points[:, 0], points[:, 1], **style)

    if history is not None:
        history = np.asarray(history, dtype=np.float64)
        ax.plot(history[:, 0], history[:, 1], color="black", linewidth=1.8,
                zorder=3, label="history")
        ax.plot(history[-1, 0], history[-1, 1], "ko", markersize=5, zorder=3)
    if gt is not None:
        gt = np.asarray(gt, dtype=np.float64)
        ax.plot(gt[:, 0], gt[:, 1], color="tab:green", linewidth=2.2,
                zorder=4, label="ground truth")

    order = np.argsort(-probabilities, kind="stable")
    cmap = plt.get_cmap("plasma")
    for rank, idx in enumerate(order):
        traj = trajectories[idx]
        color = cmap(0.15 + 0.7 * rank / max(len(order) - 1, 1))
        ax.plot(traj[:, 0], traj[:, 1], color=color, linewidth=1.6, zorder=2,
                alpha=0.9, label=f"mode p={probabilities[idx]:.2f}")

    points = _collect_points(polylines, trajectories, gt, history)
    xmin, ymin = points.min(axis=0)
    xmax, ymax = points.max(axis=0)
    pad = 0.05 * max(xmax - xmin, ymax - ymin, 1.0)
    ax.set_xlim(xmin - pad, xmax + pad)
    ax.set_ylim(ymin - pad, ymax + pad)
    ax.set_aspect("equal")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    if title:
        ax.set_title(title)
    ax.legend(loc="upper right", fontsize=8)
    fig.savefig(path, bbox_inches="tight")
    plt.close(fig)
    return float(xmin), float(xmax), float(ymin), float(ymax)


def render_training_curves(path, log_lines):
    """Two-panel figure: training loss with the lr overlaid, and the two
    validation displacement metrics. Returns the number of epochs drawn."""
    hist = parse_epoch_lines(log_lines)
    fig, (ax_loss, ax_val) = plt.subplots(1, 2, figsize=(10.0, 4.0))

    ax_loss.plot(hist["epoch"], hist["loss"], color="tab:blue", label="train loss")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("loss")
    ax_lr = ax_loss.twinx()
    ax_lr.plot(hist["epoch"], hist["lr"], color="0.6", linewidth=1.0, label="lr")
    ax_lr.set_ylabel("learning rate")
    ax_loss.legend(loc="upper right", fontsize=8)

    k = hist["k"]
    ax_val.plot(hist["epoch"], hist["val_min_ade"], color="tab:green",
                label=f"val minADE_{k}")
    ax_val.plot(hist["epoch"], hist["val_min_fde"], color="tab:red",
                label=f"val minFDE_{k}")
    ax_val.set_xlabel("epoch")
    ax_val.set_ylabel("meters")
    ax_val.legend(loc="upper right", fontsize=8)

    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return len(hist["epoch"])


def render_metric_bars(path, reports):
    """Grouped bars comparing metric tables from several sources.

    ``reports`` maps a source label (e.g. "model", "baseline") to a
    MetricReport. Columns are the union of (metric, k) keys; missing cells
    are skipped. Returns the ordered list of column labels drawn.
    """
    if not reports:
        raise ValueError("need at least one report to plot")
    keys = sorted({key for rep in reports.values() for key in rep.rows})
    labels = [f"{metric}@{k}" for metric, k in keys]
    x = np.arange(len(keys), dtype=np.float64)
    width = 0.8 / len(reports)

    fig, ax = plt.subplots(figsize=(1.8 + 1.1 * len(keys), 4.0))
    for i, (source, rep) in enumerate(reports.items()):
        offs = (i - (len(reports) - 1) / 2.0) * width
        xs = [x[j] + offs for j, key in enumerate(keys) if key in rep.rows]
        ys = [rep.rows[key] for key in keys if key in rep.rows]
        ax.bar(xs, ys, width=width, label=source)
    ax.set_xticks(x)
    ax.set_xticklabels(labels, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("value")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return labels
