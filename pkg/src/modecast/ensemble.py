"""Trajectory ensembling by k-means over flattened candidate trajectories.

Candidates pooled from several models are clustered in flattened waypoint
space (Euclidean distance, no endpoint weighting). Each cluster emits the
member-average trajectory; its probability is the normalized sum of member
probabilities. Seeding is k-means++ style from the supplied RNG, so results
are reproducible given the seed.
"""

from __future__ import annotations

import numpy as np


def _kmeans_pp_seed(points: np.ndarray, n_clusters: int,
                    rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centers = np.empty((n_clusters, points.shape[1]))
    first = int(rng.integers(n))
    centers[0] = points[first]
    d2 = ((points - centers[0]) ** 2).sum(axis=1)
    for i in range(1, n_clusters):
        total = d2.sum()
        if total <= 0.0:
            # All remaining points coincide with a center; any choice works.
            pick = int(rng.integers(n))
        else:
            pick = int(rng.choice(n, p=d2 / total))
        centers[i] = points[pick]
        d2 = np.minimum(d2, ((points - centers[i]) ** 2).sum(axis=1))
    return centers


def kmeans_trajectories(points: np.ndarray, n_clusters: int,
                        rng: np.random.Generator, max_iter: int = 100):
    """Lloyd's algorithm. Returns (centers, assignment, wcss_history).

    Ties in the nearest-center choice go to the lowest cluster index. An
    empty cluster is re-seeded with the point farthest from its assigned
    center, which cannot increase the objective, so the recorded
    within-cluster sum of squares is non-increasing across iterations.
    """
    n = points.shape[0]
    idx = np.arange(n)
    centers = _kmeans_pp_seed(points, n_clusters, rng)
    prev_assign = np.full(n, -1)
    history = []
    for _ in range(max_iter):
        d2 = ((points[:, None] - centers[None]) ** 2).sum(axis=2)
        assign = d2.argmin(axis=1)
        for c in range(n_clusters):
            if not (assign == c).any():
                # Steal the farthest point whose cluster keeps >= 1 member,
                # so successive empty fixes cannot drain a single cluster.
                dist_own = d2[idx, assign].copy()
                sizes = np.bincount(assign, minlength=n_clusters)
                dist_own[sizes[assign] <= 1] = -1.0
                farthest = int(dist_own.argmax())
                centers[c] = points[farthest]
                d2[:, c] = ((points - centers[c]) ** 2).sum(axis=1)
                assign[farthest] = c
        history.append(float(d2[idx, assign].sum()))
        if (assign == prev_assign).all():
            break
        prev_assign = assign
        for c in range(n_clusters):
            centers[c] = points[assign == c].mean(axis=0)
    return centers, assign, history


def kmeans_ensemble(candidate_trajs: np.ndarray, candidate_probs: np.ndarray,
                    n_clusters: int = 6, rng: np.random.Generator = None,
                    return_history: bool = False):
    """Combine candidate trajectories [M, T, 2] into ``n_clusters`` outputs.

    Returns (trajectories [n_clusters, T, 2], probabilities [n_clusters]),
    ordered by descending probability, plus the within-cluster sum-of-squares
    history when ``return_history`` is set.
    """
    trajs = np.asarray(candidate_trajs, dtype=np.float64)
    probs = np.asarray(candidate_probs, dtype=np.float64)
    if trajs.ndim != 3 or trajs.shape[-1] != 2:
        raise ValueError(f"expected [M, T, 2] candidates, got {trajs.shape}")
    m = trajs.shape[0]
    if probs.shape != (m,):
        raise ValueError(
            f"probabilities shape {probs.shape} does not match {m} candidates")
    if m < n_clusters:
        raise ValueError(
            f"need at least {n_clusters} candidates, got {m}")
    if rng is None:
        rng = np.random.default_rng(0)
    points = trajs.reshape(m, -1)
    centers, assign, history = kmeans_trajectories(points, n_clusters, rng)

    out_trajs = np.empty((n_clusters,) + trajs.shape[1:])
    out_probs = np.empty(n_clusters)
    for c in range(n_clusters):
        members = assign == c
        out_trajs[c] = trajs[members].mean(axis=0)
        out_probs[c] = probs[members].sum()
    out_probs = out_probs / out_probs.sum()

    order = np.argsort(-out_probs, kind="stable")
    out_trajs, out_probs = out_trajs[order], out_probs[order]
    if return_history:
        return out_trajs, out_probs, history
    return out_trajs, out_probs
