"""Fixed-k clustering baseline over ray intersection points.

This is the comparison method for the EM pipeline: gather pairwise
forward intersections of the rays, run Lloyd's algorithm with a fixed k,
and score each center by its share of supporting intersection points.
No clutter rejection, no uncertainty: exactly the behavior the joint
model is meant to improve on.
"""

from __future__ import annotations

import math

import numpy as np

from .cluster import _pair_intersections
from .domain import SceneBatch, rays_to_arrays

__all__ = ["kmeans_baseline"]


def kmeans_baseline(batch: SceneBatch, k: int, seed: int = 0,
                    edge_radius: float = 150.0, min_angle_deg: float = 10.0,
                    iters: int = 50):
    """Cluster ray intersections with fixed-k Lloyd iterations.

    Returns a list of ((x, y), score) with score = cluster support fraction,
    usable directly by the evaluation module.
    """
    if k <= 0:
        raise ValueError("k must be positive")
    arr = rays_to_arrays(batch.rays)
    pts = _pair_intersections(arr, edge_radius, math.radians(min_angle_deg))
    if pts.shape[0] == 0:
        return []
    k = min(k, pts.shape[0])
    rng = np.random.default_rng(seed)

    # k-means++ style seeding
    centers = np.empty((k, 2))
    centers[0] = pts[rng.integers(pts.shape[0])]
    d2 = np.sum((pts - centers[0]) ** 2, axis=1)
    for i in range(1, k):
        prob = d2 / d2.sum() if d2.sum() > 0 else None
        centers[i] = pts[rng.choice(pts.shape[0], p=prob)]
        d2 = np.minimum(d2, np.sum((pts - centers[i]) ** 2, axis=1))

    assign = np.zeros(pts.shape[0], dtype=np.int64)
    for _ in range(iters):
        d2 = np.sum((pts[:, None, :] - centers[None, :, :]) ** 2, axis=2)
        new_assign = np.argmin(d2, axis=1)
        if np.array_equal(new_assign, assign):
            assign = new_assign
            break
        assign = new_assign
        for i in range(k):
            sel = assign == i
            if np.any(sel):
                centers[i] = pts[sel].mean(axis=0)

    counts = np.bincount(assign, minlength=k).astype(float)
    top = counts.max() if counts.max() > 0 else 1.0
    return [((float(centers[i, 0]), float(centers[i, 1])), counts[i] / top)
            for i in range(k)]
