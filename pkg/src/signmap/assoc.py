"""Soft data association: loopy BP marginals plus an exact enumeration oracle.

The joint model over existence bits e_i and one-of assignment variables is

    P(e, a) ~ gamma(e, a) * prod_i psi_i^{e_i} * prod_ij psi_ij^{a_ij}

where gamma enforces a_ij <= e_i and each ray is assigned to at most one
object (the leftover option is the implicit null/clutter assignment with
weight 1).  ``run_bp`` iterates the message equations in log domain;
``enumerate_exact`` brute-forces small instances for testing.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .domain import InvariantError

__all__ = ["AssociationProblem", "Marginals", "run_bp", "enumerate_exact"]

MAX_EXACT_OBJECTS = 4
MAX_EXACT_RAYS = 8


@dataclass(frozen=True)
class AssociationProblem:
    """Sparse bipartite factor graph between objects and rays."""

    n_objects: int
    n_rays: int
    edge_obj: np.ndarray     # (E,) int64 object index per edge
    edge_ray: np.ndarray     # (E,) int64 ray index per edge
    edge_logpsi: np.ndarray  # (E,) composed log assignment potential
    log_psi_e: np.ndarray    # (n_objects,) log existence potential

    def __post_init__(self):
        object.__setattr__(self, "edge_obj",
                           np.asarray(self.edge_obj, dtype=np.int64))
        object.__setattr__(self, "edge_ray",
                           np.asarray(self.edge_ray, dtype=np.int64))
        object.__setattr__(self, "edge_logpsi",
                           np.asarray(self.edge_logpsi, dtype=float))
        object.__setattr__(self, "log_psi_e",
                           np.asarray(self.log_psi_e, dtype=float))
        e = len(self.edge_obj)
        if not (len(self.edge_ray) == len(self.edge_logpsi) == e):
            raise InvariantError("edge arrays must have equal length")
        if self.log_psi_e.shape != (self.n_objects,):
            raise InvariantError("log_psi_e must have one entry per object")
        if e:
            if self.edge_obj.min() < 0 or self.edge_obj.max() >= self.n_objects:
                raise InvariantError("edge object index out of range")
            if self.edge_ray.min() < 0 or self.edge_ray.max() >= self.n_rays:
                raise InvariantError("edge ray index out of range")
            pairs = self.edge_obj * self.n_rays + self.edge_ray
            if len(np.unique(pairs)) != e:
                raise InvariantError("duplicate (object, ray) edge")
        if not np.all(np.isfinite(self.edge_logpsi)):
            raise InvariantError("log assignment potentials must be finite")
        if not np.all(np.isfinite(self.log_psi_e)):
            raise InvariantError("log existence potentials must be finite")

    @classmethod
    def from_edges(cls, n_objects, n_rays, edges, log_psi_e):
        """Build from an iterable of (object, ray, log_psi) triples."""
        edges = list(edges)
        return cls(
            n_objects=n_objects,
            n_rays=n_rays,
            edge_obj=np.array([e[0] for e in edges], dtype=np.int64),
            edge_ray=np.array([e[1] for e in edges], dtype=np.int64),
            edge_logpsi=np.array([e[2] for e in edges], dtype=float),
            log_psi_e=np.asarray(log_psi_e, dtype=float),
        )

    @property
    def n_edges(self) -> int:
        return len(self.edge_obj)


@dataclass
class Marginals:
    """Existence and assignment marginals, one entry per object/edge/ray."""

    existence: np.ndarray        # (n_objects,)
    assignment: np.ndarray       # (n_edges,) aligned with the problem edges
    null_mass: np.ndarray        # (n_rays,)
    converged: bool
    iterations_run: int
    existence_logit: np.ndarray = field(default=None)  # (n_objects,) logits
    messages: tuple = field(default=None, repr=False)  # final (lmu, lnu)

    def validate(self, problem: AssociationProblem, tol: float = 1e-6) -> None:
        """Check normalization and the assignment-implies-existence bound."""
        total = np.bincount(problem.edge_ray, weights=self.assignment,
                            minlength=problem.n_rays)
        err = np.abs(total + self.null_mass - 1.0)
        if err.size and err.max() > tol:
            raise InvariantError(
                f"per-ray assignment mass off by {err.max():.2e}")
        if problem.n_edges:
            slack = self.assignment - self.existence[problem.edge_obj]
            if slack.max() > tol:
                raise InvariantError(
                    f"assignment marginal exceeds existence by {slack.max():.2e}")


def seed_messages(problem: AssociationProblem):
    """Cold-start messages: mu = 1 and nu from one edge->object pass.

    Seeding nu with the competition-aware update at mu = 1 lets the first
    mu update see the ray evidence immediately; an all-ones nu start wastes
    several sweeps on dense problems before anything concentrates.
    """
    lpsi = np.minimum(problem.edge_logpsi, 60.0)
    active = problem.edge_logpsi > kernels.PSI_FLOOR
    w = np.where(active, np.exp(lpsi), 0.0)
    t = np.bincount(problem.edge_ray, weights=w, minlength=problem.n_rays)
    lnu = np.where(active,
                   np.logaddexp(0.0, lpsi - np.log1p(t[problem.edge_ray] - w)),
                   0.0)
    return np.zeros(problem.n_edges), lnu


def run_bp(problem: AssociationProblem, max_iters: int = 50,
           damping: float = 0.0, tol: float = 1e-6,
           init_messages=None) -> Marginals:
    """Loopy BP marginals for an association problem.

    Synchronous log-domain message schedule; deterministic given inputs.
    ``init_messages`` may carry (lmu, lnu) arrays from a previous run on the
    same edge list to warm-start the iteration.
    """
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    if not 0.0 <= damping < 1.0:
        raise ValueError("damping must be in [0, 1)")
    if init_messages is None:
        lmu0, lnu0 = seed_messages(problem)
    else:
        lmu0, lnu0 = init_messages
        if lmu0.shape != (problem.n_edges,) or lnu0.shape != (problem.n_edges,):
            raise ValueError("init messages inconsistent with the edge set")
    ebar, elogit, abar, null, lmu, lnu, iters, delta = kernels.bp_run(
        problem.n_objects, problem.n_rays,
        problem.edge_obj, problem.edge_ray,
        problem.edge_logpsi, problem.log_psi_e,
        max_iters, damping, tol, lmu0, lnu0)
    return Marginals(
        existence=ebar,
        assignment=abar,
        null_mass=null,
        converged=bool(delta < tol),
        iterations_run=int(iters),
        existence_logit=elogit,
        messages=(lmu, lnu),
    )


def enumerate_exact(problem: AssociationProblem) -> Marginals:
    """Exact marginals by brute force over all feasible (e, a) states.

    Guarded to n_objects <= 4 and n_rays <= 8.  Used as the BP oracle.
    """
    n, m = problem.n_objects, problem.n_rays
    if n > MAX_EXACT_OBJECTS or m > MAX_EXACT_RAYS:
        raise ValueError(
            f"instance too large for enumeration ({n} objects, {m} rays)")
    psi_e = np.exp(problem.log_psi_e)
    # per-ray candidate objects with linear-domain potentials
    cand: list[list[tuple[int, float]]] = [[] for _ in range(m)]
    edge_index: dict[tuple[int, int], int] = {}
    for k in range(problem.n_edges):
        i = int(problem.edge_obj[k])
        j = int(problem.edge_ray[k])
        cand[j].append((i, math.exp(min(problem.edge_logpsi[k], 60.0))))
        edge_index[(i, j)] = k

    z = 0.0
    e_num = np.zeros(n)
    a_num = np.zeros(problem.n_edges)
    null_num = np.zeros(m)
    for mask in range(1 << n):
        exists = [(mask >> i) & 1 for i in range(n)]
        w_e = 1.0
        for i in range(n):
            if exists[i]:
                w_e *= psi_e[i]
        # options per ray: null (weight 1) or any existing object with an edge
        options = []
        for j in range(m):
            opts = [(-1, 1.0)]
            opts.extend((i, w) for i, w in cand[j] if exists[i])
            options.append(opts)
        for choice in itertools.product(*options):
            w = w_e
            for j, (i, wij) in enumerate(choice):
                w *= wij
            z += w
            for i in range(n):
                if exists[i]:
                    e_num[i] += w
            for j, (i, _) in enumerate(choice):
                if i < 0:
                    null_num[j] += w
                else:
                    a_num[edge_index[(i, j)]] += w
    if z <= 0:
        raise InvariantError("enumeration produced zero total mass")
    return Marginals(
        existence=e_num / z,
        assignment=a_num / z,
        null_mass=null_num / z,
        converged=True,
        iterations_run=0,
        existence_logit=_safe_logit(e_num / z),
    )


def _safe_logit(p):
    p = np.clip(p, 1e-300, 1.0 - 1e-16)
    return np.log(p) - np.log1p(-p)
