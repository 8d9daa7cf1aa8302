"""Position priors: uniform over the region, or spike-and-slab at intersections.

The spike-and-slab density mixes isotropic Gaussians centered on road
intersections with a uniform slab over the region:

    p(x) = w * (1/K) * sum_k N(x; p_k, s^2 I) + (1 - w) / region_area

with one affinity w per object class.  ``fit_affinity`` estimates w per class
by MAP under a Beta prior, entirely offline.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .domain import InvariantError

__all__ = ["PriorDensity", "log_prior", "log_prior_batch", "fit_affinity"]

_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class PriorDensity:
    """Parameters of a position prior.

    ``affinity`` maps class id -> spike weight in [0, 1]; classes not listed
    fall back to ``default_affinity``.
    """

    kind: str = "uniform"
    region_area: float = 1e6
    intersections: np.ndarray | None = None
    intersection_radius: float = 15.0
    affinity: dict[int, float] = field(default_factory=dict)
    default_affinity: float = 0.5

    def __post_init__(self):
        if self.kind not in ("uniform", "spike_slab"):
            raise InvariantError(f"unknown prior kind {self.kind!r}")
        if not self.region_area > 0:
            raise InvariantError("region_area must be > 0")
        if self.kind == "spike_slab":
            if self.intersections is None or len(self.intersections) == 0:
                raise InvariantError("spike_slab prior needs intersections")
            object.__setattr__(
                self, "intersections",
                np.asarray(self.intersections, dtype=float).reshape(-1, 2))
            if not self.intersection_radius > 0:
                raise InvariantError("intersection_radius must be > 0")
        for c, w in self.affinity.items():
            if not 0.0 <= w <= 1.0:
                raise InvariantError(f"affinity[{c}] must be in [0,1]")
        if not 0.0 <= self.default_affinity <= 1.0:
            raise InvariantError("default_affinity must be in [0,1]")

    def affinity_for(self, class_id: int) -> float:
        return self.affinity.get(class_id, self.default_affinity)


def log_prior_batch(positions, prior: PriorDensity, class_id: int = 0):
    """Log-density, gradient, and Hessian of the prior at each position.

    Returns (logp (N,), grad (N,2), hess (N,2,2)).
    """
    x = np.asarray(positions, dtype=float).reshape(-1, 2)
    n = x.shape[0]
    if prior.kind == "uniform":
        return (np.full(n, -math.log(prior.region_area)),
                np.zeros((n, 2)), np.zeros((n, 2, 2)))

    w = prior.affinity_for(class_id)
    s2 = prior.intersection_radius ** 2
    pts = prior.intersections
    k = pts.shape[0]
    diff = x[:, None, :] - pts[None, :, :]          # (N, K, 2)
    q = np.sum(diff * diff, axis=2) / (2.0 * s2)    # (N, K)
    g = np.exp(-q) / (2.0 * math.pi * s2)           # Gaussian densities
    mix = g.mean(axis=1)                            # (N,)
    dens = w * mix + (1.0 - w) / prior.region_area
    dens = np.maximum(dens, 1e-300)
    logp = np.log(dens)

    # d dens/dx = (w/K) sum_k g_k * (-(x - p_k)/s2)
    gnum = -(w / k) * np.einsum("nk,nkd->nd", g, diff) / s2
    grad = gnum / dens[:, None]

    outer = np.einsum("nkd,nke->nkde", diff, diff) / (s2 * s2)
    eye = np.eye(2) / s2
    hnum = (w / k) * np.einsum("nk,nkde->nde", g, outer - eye[None, None])
    hess = hnum / dens[:, None, None] \
        - np.einsum("nd,ne->nde", grad, grad)
    return logp, grad, hess


def log_prior(x, prior: PriorDensity, class_id: int = 0):
    """Single-point variant of log_prior_batch."""
    logp, grad, hess = log_prior_batch(np.asarray(x, dtype=float)[None],
                                       prior, class_id)
    return float(logp[0]), grad[0], hess[0]


def _affinity_loglik(w, dists_mix, area, a, b):
    dens = w * dists_mix + (1.0 - w) / area
    ll = float(np.sum(np.log(np.maximum(dens, 1e-300))))
    ll += (a - 1.0) * math.log(w) + (b - 1.0) * math.log1p(-w)
    return ll


def fit_affinity(truth, prior_template: PriorDensity,
                 pseudo_counts: tuple[float, float] = (2.0, 2.0),
                 classes=None) -> dict[int, float]:
    """MAP estimate of the per-class intersection affinity.

    ``truth`` is a sequence of (position, class_id).  The Gaussian scale is
    taken from the template and held fixed; only the mixture weight w is
    fit, by golden-section search (the log-posterior is concave in w).
    Classes listed in ``classes`` but absent from the truth keep the Beta
    prior mode.
    """
    if prior_template.intersections is None or len(prior_template.intersections) == 0:
        raise InvariantError("fit_affinity needs a template with intersections")
    a, b = pseudo_counts
    if a <= 0 or b <= 0:
        raise ValueError("pseudo counts must be positive")
    mode = (a - 1.0) / (a + b - 2.0) if a + b > 2.0 else 0.5

    s2 = prior_template.intersection_radius ** 2
    pts = prior_template.intersections
    area = prior_template.region_area

    by_class: dict[int, list] = {}
    for pos, c in truth:
        by_class.setdefault(int(c), []).append((float(pos[0]), float(pos[1])))

    out: dict[int, float] = {}
    for c, positions in sorted(by_class.items()):
        x = np.asarray(positions)
        diff = x[:, None, :] - pts[None, :, :]
        q = np.sum(diff * diff, axis=2) / (2.0 * s2)
        mix = (np.exp(-q) / (2.0 * math.pi * s2)).mean(axis=1)

        lo, hi = 1e-12, 1.0 - 1e-12
        c1 = hi - _GOLDEN * (hi - lo)
        c2 = lo + _GOLDEN * (hi - lo)
        f1 = _affinity_loglik(c1, mix, area, a, b)
        f2 = _affinity_loglik(c2, mix, area, a, b)
        while hi - lo > 1e-6:
            if f1 < f2:
                lo, c1, f1 = c1, c2, f2
                c2 = lo + _GOLDEN * (hi - lo)
                f2 = _affinity_loglik(c2, mix, area, a, b)
            else:
                hi, c2, f2 = c2, c1, f1
                c1 = hi - _GOLDEN * (hi - lo)
                f1 = _affinity_loglik(c1, mix, area, a, b)
        out[c] = 0.5 * (lo + hi)
    for c in (classes or ()):
        out.setdefault(int(c), mode)
    return out
