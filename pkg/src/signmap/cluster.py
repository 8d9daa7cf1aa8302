"""Outer EM loop: seed candidates at ray intersections, alternate loopy-BP
association with regularized Newton position updates, and prune/merge the
hypothesis set each round.

All grids (intersection binning, merge hashing) are anchored at the data
minimum so the pipeline is equivariant under translation of the scene.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels, sensor
from .assoc import AssociationProblem, Marginals, run_bp, seed_messages
from .domain import (
    InvariantError,
    ObjectHypothesis,
    SceneBatch,
    SensorParams,
    check_ray_normalization,
    rays_to_arrays,
)
from .priors import PriorDensity, log_prior_batch
from .solver import assemble_loss, newton_step, posterior_covariance

__all__ = [
    "EmConfig",
    "IterationStats",
    "EmDiagnostics",
    "ClusterResult",
    "init_candidates",
    "build_edges",
    "associate_at",
    "prune",
    "merge",
    "run_em",
]

# angular gate: |phi| < 3 / sqrt(kappa) + this margin
_FOV_GATE_MARGIN = sensor.FOV_HALF_WIDTH + 4.0 * sensor.FOV_EDGE_WIDTH
_CHUNK_ELEMS = 4_000_000


@dataclass(frozen=True)
class EmConfig:
    """Knobs of the EM clustering loop."""

    em_iters: int = 10
    bp_iters: int = 5
    merge_radius: float = 5.0
    eccentricity_max: float = 0.95
    variance_max: float = 25.0
    existence_min: float = 0.2
    edge_radius: float = 150.0
    init_cell: float = 5.0
    seed: int = 0
    damping: float = 0.0
    bp_tol: float = 1e-6
    trust_radius: float = 10.0
    eig_floor: float = 1e-3
    line_search: bool = True
    min_pair_angle_deg: float = 10.0
    # Iterations that only merge, without threshold pruning.  Dense seeding
    # leaves dozens of near-duplicate candidates per object; until merging
    # consolidates them, BP splits each ray's mass so thin that every
    # candidate looks underdetermined and a cold-start prune empties the map.
    prune_warmup: int = 2

    def __post_init__(self):
        positive = ("em_iters", "bp_iters", "merge_radius", "eccentricity_max",
                    "variance_max", "existence_min", "edge_radius", "init_cell",
                    "trust_radius", "eig_floor", "min_pair_angle_deg")
        for name in positive:
            if not getattr(self, name) > 0:
                raise InvariantError(f"{name} must be positive")
        if self.eccentricity_max > 1.0:
            raise InvariantError("eccentricity_max must be <= 1")
        if not 0.0 <= self.damping < 1.0:
            raise InvariantError("damping must be in [0, 1)")
        if self.prune_warmup < 0:
            raise InvariantError("prune_warmup must be >= 0")

    def prediction_mode(self) -> "EmConfig":
        """Loosened pruning for prediction on sparse-ray sign types."""
        return replace(self, eccentricity_max=0.99, variance_max=100.0,
                       existence_min=0.05)


@dataclass
class IterationStats:
    n_hypotheses: int
    n_edges: int
    loss_before: float
    loss_after: float
    bp_iterations: int
    skipped_edges: int
    pruned_eccentricity: int
    pruned_variance: int
    pruned_existence: int
    merged: int


@dataclass
class EmDiagnostics:
    seeded: int = 0
    iterations: list[IterationStats] = field(default_factory=list)

    @property
    def loss_trace(self) -> list[float]:
        return [it.loss_after for it in self.iterations]


@dataclass
class ClusterResult:
    hypotheses: list[ObjectHypothesis]
    diagnostics: EmDiagnostics
    n_rays: int = 0

    def positions(self) -> np.ndarray:
        return np.array([h.position for h in self.hypotheses]).reshape(-1, 2)

    def existences(self) -> np.ndarray:
        return np.array([h.existence for h in self.hypotheses])


def _pair_intersections(arr, edge_radius: float, min_angle_rad: float):
    """Forward-forward intersection points of gated ray pairs.

    Pairs are gated on origin distance (<= 2 * edge_radius) and bearing
    difference (>= min_angle).  Kept intersections lie forward along both
    rays within edge_radius of both origins.  Chunked so peak memory stays
    bounded regardless of ray count.
    """
    ox, oy, th = arr["ox"], arr["oy"], arr["theta"]
    m = len(ox)
    if m < 2:
        return np.zeros((0, 2))
    dx_dir, dy_dir = np.cos(th), np.sin(th)
    max_d2 = (2.0 * edge_radius) ** 2
    block = max(1, _CHUNK_ELEMS // m)
    points = []
    for a0 in range(0, m - 1, block):
        a1 = min(a0 + block, m - 1)
        rows = np.arange(a0, a1)
        ex = ox[None, :] - ox[rows, None]
        ey = oy[None, :] - oy[rows, None]
        close = ex * ex + ey * ey <= max_d2
        upper = np.arange(m)[None, :] > rows[:, None]
        dth = np.abs(np.pi - (np.pi - (th[None, :] - th[rows, None]))
                     % (2.0 * np.pi))
        mask = close & upper & (dth >= min_angle_rad)
        ai, bj = np.nonzero(mask)
        if not len(ai):
            continue
        ai = rows[ai]
        dax, day = dx_dir[ai], dy_dir[ai]
        dbx, dby = dx_dir[bj], dy_dir[bj]
        det = dax * dby - day * dbx
        ok = np.abs(det) > 1e-9
        ai, bj = ai[ok], bj[ok]
        dax, day, dbx, dby, det = dax[ok], day[ok], dbx[ok], dby[ok], det[ok]
        ex = ox[bj] - ox[ai]
        ey = oy[bj] - oy[ai]
        t1 = (ex * dby - ey * dbx) / det
        t2 = (ex * day - ey * dax) / det
        keep = (t1 > 0) & (t2 > 0) & (t1 <= edge_radius) & (t2 <= edge_radius)
        if np.any(keep):
            px = ox[ai[keep]] + t1[keep] * dax[keep]
            py = oy[ai[keep]] + t1[keep] * day[keep]
            points.append(np.column_stack([px, py]))
    if not points:
        return np.zeros((0, 2))
    return np.concatenate(points, axis=0)


def init_candidates(batch: SceneBatch, config: EmConfig) -> np.ndarray:
    """Seed candidate positions from concentrations of ray intersections.

    Intersection points are binned into a grid of ``init_cell`` meters
    (anchored at their minimum).  A cell seeds one candidate at its point
    centroid when it holds at least two points and its count is a local
    maximum over the 8-neighborhood; bearing noise smears one object's
    intersections over many adjacent cells, and seeding every dense cell
    would flood BP with near-duplicates.  Seeds come out in lexicographic
    cell order.
    """
    arr = rays_to_arrays(batch.rays)
    pts = _pair_intersections(arr, config.edge_radius,
                              math.radians(config.min_pair_angle_deg))
    if pts.shape[0] == 0:
        return np.zeros((0, 2))
    anchor = pts.min(axis=0)
    cells = np.floor((pts - anchor) / config.init_cell).astype(np.int64)
    span = cells[:, 1].max() + 2
    keys = cells[:, 0] * span + cells[:, 1]
    order = np.unique(keys)
    inv = np.searchsorted(order, keys)
    counts = np.bincount(inv, minlength=len(order))
    sx = np.bincount(inv, weights=pts[:, 0], minlength=len(order))
    sy = np.bincount(inv, weights=pts[:, 1], minlength=len(order))
    count_of = dict(zip(order.tolist(), counts.tolist()))
    # sparse scenes may never put two intersections in one cell; fall back
    # to seeding every local maximum so a single crossing still seeds
    min_count = 2 if counts.max() >= 2 else 1
    seeds = []
    for k, key in enumerate(order.tolist()):
        c = counts[k]
        if c < min_count:
            continue
        if any(count_of.get(key + dx * span + dy, 0) > c
               for dx in (-1, 0, 1) for dy in (-1, 0, 1)
               if (dx, dy) != (0, 0)):
            continue
        seeds.append((sx[k] / c, sy[k] / c))
    if not seeds:
        return np.zeros((0, 2))
    return np.asarray(seeds)


def build_edges(positions, arr, params: SensorParams, edge_radius: float):
    """Sparse candidate edges gated on range and bearing residual.

    An edge (i, j) exists iff object i lies within ``edge_radius`` of ray j's
    origin and the bearing residual is inside three angular sigmas plus the
    field-of-view margin.  Returns (problem, bundle).
    """
    positions = np.asarray(positions, dtype=float).reshape(-1, 2)
    n = positions.shape[0]
    m = len(arr["ox"])
    eobj_parts, eray_parts = [], []
    if n and m:
        sth2 = params.angular_sigma ** 2
        sg2 = params.gps_sigma ** 2
        r2max = edge_radius ** 2
        block = max(1, _CHUNK_ELEMS // m)
        for i0 in range(0, n, block):
            i1 = min(i0 + block, n)
            dx = positions[i0:i1, 0][:, None] - arr["ox"][None, :]
            dy = positions[i0:i1, 1][:, None] - arr["oy"][None, :]
            r2 = dx * dx + dy * dy
            ii, jj = np.nonzero(r2 <= r2max)
            if not len(ii):
                continue
            r = np.sqrt(np.maximum(r2[ii, jj], sensor.EPS_R ** 2))
            phi = np.pi - (np.pi - (np.arctan2(dy[ii, jj], dx[ii, jj])
                                    - arr["theta"][jj])) % (2.0 * np.pi)
            kappa = r * r / (sth2 * r * r + sg2)
            gate = np.abs(phi) < 3.0 / np.sqrt(kappa) + _FOV_GATE_MARGIN
            eobj_parts.append((ii + i0)[gate].astype(np.int64))
            eray_parts.append(jj[gate].astype(np.int64))
    if eobj_parts:
        eobj = np.concatenate(eobj_parts)
        eray = np.concatenate(eray_parts)
    else:
        eobj = np.zeros(0, dtype=np.int64)
        eray = np.zeros(0, dtype=np.int64)

    bundle = sensor.evaluate_edges(arr, eray, positions, eobj, params)
    lpsi = np.clip(bundle.lpsi_comp, kernels.PSI_FLOOR - 1.0, 60.0)
    lpsi_obj = params.existence_logit \
        + np.bincount(eobj, weights=bundle.log1m_pd, minlength=n)
    problem = AssociationProblem(
        n_objects=n, n_rays=m,
        edge_obj=eobj, edge_ray=eray,
        edge_logpsi=lpsi, log_psi_e=lpsi_obj)
    return problem, bundle


def associate_at(positions, arr, params: SensorParams, config: EmConfig,
                 init_messages=None):
    """Edges plus BP marginals at fixed positions (one E-step)."""
    problem, bundle = build_edges(positions, arr, params, config.edge_radius)
    marg = run_bp(problem, max_iters=config.bp_iters,
                  damping=config.damping, tol=config.bp_tol,
                  init_messages=init_messages)
    return problem, marg, bundle


def _warm_messages(problem: AssociationProblem, ids, n_rays, prev):
    """Initial messages for this round's edges, carried over when the same
    (candidate, ray) edge existed in the previous round."""
    lmu0, lnu0 = seed_messages(problem)
    if prev is not None and problem.n_edges:
        pkeys, plmu, plnu = prev
        if len(pkeys):
            keys = ids[problem.edge_obj] * n_rays + problem.edge_ray
            pos = np.clip(np.searchsorted(pkeys, keys), 0, len(pkeys) - 1)
            hit = pkeys[pos] == keys
            lmu0[hit] = plmu[pos[hit]]
            lnu0[hit] = plnu[pos[hit]]
    return lmu0, lnu0


def _scatter_eccentricity(n, eobj, eray, abar, theta):
    """Eccentricity of the bearing scatter S_i = sum_j abar_ij d_j d_j^T."""
    c, s = np.cos(theta), np.sin(theta)
    sxx = np.bincount(eobj, weights=abar * c[eray] * c[eray], minlength=n)
    sxy = np.bincount(eobj, weights=abar * c[eray] * s[eray], minlength=n)
    syy = np.bincount(eobj, weights=abar * s[eray] * s[eray], minlength=n)
    mean = 0.5 * (sxx + syy)
    rad = np.hypot(0.5 * (sxx - syy), sxy)
    lmax = mean + rad
    lmin = np.maximum(mean - rad, 0.0)
    ecc = np.ones(n)
    pos = lmax > 1e-12
    ecc[pos] = np.sqrt(np.maximum(0.0, 1.0 - lmin[pos] / lmax[pos]))
    return ecc


def _prune_mask(ebar, ecc, cov_max_eig, config: EmConfig):
    """Keep mask plus counts; each drop is attributed to the first failed
    test in the order eccentricity, variance, existence."""
    drop_ecc = ecc > config.eccentricity_max
    drop_var = ~drop_ecc & (cov_max_eig > config.variance_max)
    drop_exi = ~drop_ecc & ~drop_var & (ebar < config.existence_min)
    keep = ~(drop_ecc | drop_var | drop_exi)
    return keep, int(drop_ecc.sum()), int(drop_var.sum()), int(drop_exi.sum())


def prune(hypotheses, marginals: Marginals, problem: AssociationProblem,
          rays, config: EmConfig, hess_blocks=None):
    """Filter hypotheses on eccentricity, posterior variance, and existence.

    Spec-level wrapper around the array path used inside run_em; the
    surviving hypotheses keep their state unchanged.
    """
    n = len(hypotheses)
    if n == 0:
        return []
    theta = np.array([r.bearing_angle for r in rays])
    ecc = _scatter_eccentricity(n, problem.edge_obj, problem.edge_ray,
                                marginals.assignment, theta)
    if hess_blocks is not None:
        cov = posterior_covariance(hess_blocks, config.eig_floor)
    else:
        cov = np.stack([np.asarray(h.covariance, dtype=float)
                        for h in hypotheses])
    keep, *_ = _prune_mask(marginals.existence, ecc, _cov_max_eig(cov), config)
    return [h for h, k in zip(hypotheses, keep) if k]


def _cov_max_eig(cov):
    a, b, c = cov[:, 0, 0], cov[:, 0, 1], cov[:, 1, 1]
    return 0.5 * (a + c) + np.hypot(0.5 * (a - c), b)


def _merge_keep(positions, existence, merge_radius: float):
    """Greedy grid-hash merge; returns the survivor mask.

    Hypotheses are visited by existence descending (ties by position);
    each survivor absorbs every unconsumed hypothesis within merge_radius
    among its own and the 8 neighboring cells.
    """
    n = positions.shape[0]
    if n == 0:
        return np.zeros(0, dtype=bool), 0
    anchor = positions.min(axis=0)
    cells = np.floor((positions - anchor) / merge_radius).astype(np.int64)
    buckets: dict[tuple[int, int], list[int]] = {}
    for k in range(n):
        buckets.setdefault((cells[k, 0], cells[k, 1]), []).append(k)
    order = np.lexsort((positions[:, 1], positions[:, 0], -existence))
    consumed = np.zeros(n, dtype=bool)
    keep = np.zeros(n, dtype=bool)
    r2 = merge_radius * merge_radius
    for k in order:
        if consumed[k]:
            continue
        keep[k] = True
        consumed[k] = True
        cx, cy = cells[k]
        for nx in (cx - 1, cx, cx + 1):
            for ny in (cy - 1, cy, cy + 1):
                for other in buckets.get((nx, ny), ()):
                    if consumed[other]:
                        continue
                    d = positions[other] - positions[k]
                    if d[0] * d[0] + d[1] * d[1] <= r2:
                        consumed[other] = True
    return keep, int(n - keep.sum())


def merge(hypotheses, merge_radius: float):
    """Spec-level wrapper of the greedy grid merge over hypothesis objects."""
    if not hypotheses:
        return []
    positions = np.array([h.position for h in hypotheses])
    existence = np.array([h.existence for h in hypotheses])
    keep, _ = _merge_keep(positions, existence, merge_radius)
    return [h for h, k in zip(hypotheses, keep) if k]


def _empty_result(n_rays: int, seeded: int = 0) -> ClusterResult:
    return ClusterResult([], EmDiagnostics(seeded=seeded), n_rays)


def run_em(batch: SceneBatch, params: SensorParams, prior: PriorDensity,
           config: EmConfig) -> ClusterResult:
    """Full EM clustering of one scene batch (single object class)."""
    m = len(batch.rays)
    if m == 0:
        return _empty_result(0)
    classes = batch.class_ids()
    if len(classes) > 1:
        raise InvariantError(
            f"run_em expects a single-class batch, got classes {classes}")
    class_id = classes[0]
    arr = rays_to_arrays(batch.rays)
    theta = arr["theta"]

    positions = init_candidates(batch, config)
    diag = EmDiagnostics(seeded=positions.shape[0])
    if positions.shape[0] == 0:
        return _empty_result(m, seeded=0)

    # stable candidate ids so BP messages can be carried across EM rounds
    ids = np.arange(positions.shape[0], dtype=np.int64)
    prev_msgs = None

    for em_iter in range(config.em_iters):
        problem, bundle = build_edges(positions, arr, params,
                                      config.edge_radius)
        init = _warm_messages(problem, ids, m, prev_msgs)
        marg = run_bp(problem, max_iters=config.bp_iters,
                      damping=config.damping, tol=config.bp_tol,
                      init_messages=init)
        prev_msgs = (ids[problem.edge_obj] * m + problem.edge_ray,
                     marg.messages[0], marg.messages[1])
        loss, grad, hess, skipped = assemble_loss(
            positions, problem, marg, arr, params, prior, class_id, bundle)

        loss_fn = None
        if config.line_search:
            w = np.where(bundle.clamped, 0.0, marg.assignment)
            eobj, eray = problem.edge_obj, problem.edge_ray

            def loss_fn(pos, w=w, eobj=eobj, eray=eray):
                logf = kernels.edge_log_f(
                    arr["ox"][eray], arr["oy"][eray], arr["theta"][eray],
                    pos[eobj, 0], pos[eobj, 1],
                    params.radial_rate, params.angular_sigma,
                    params.gps_sigma, sensor.EPS_R)[0]
                lp = log_prior_batch(pos, prior, class_id)[0]
                return -float(np.sum(w * logf)) - float(np.sum(lp))

        report = newton_step(positions, grad, hess,
                             trust_radius=config.trust_radius,
                             eig_floor=config.eig_floor,
                             loss_before=loss, loss_fn=loss_fn)
        positions = report.positions_new

        if em_iter >= config.prune_warmup:
            cov = posterior_covariance(hess, config.eig_floor)
            ecc = _scatter_eccentricity(positions.shape[0], problem.edge_obj,
                                        problem.edge_ray, marg.assignment,
                                        theta)
            keep, n_ecc, n_var, n_exi = _prune_mask(
                marg.existence, ecc, _cov_max_eig(cov), config)
        else:
            keep = np.ones(positions.shape[0], dtype=bool)
            n_ecc = n_var = n_exi = 0
        positions = positions[keep]
        existence = marg.existence[keep]
        ids = ids[keep]

        keep2, n_merged = _merge_keep(positions, existence, config.merge_radius)
        positions = positions[keep2]
        ids = ids[keep2]

        diag.iterations.append(IterationStats(
            n_hypotheses=positions.shape[0],
            n_edges=problem.n_edges,
            loss_before=loss,
            loss_after=report.loss_after,
            bp_iterations=marg.iterations_run,
            skipped_edges=skipped,
            pruned_eccentricity=n_ecc,
            pruned_variance=n_var,
            pruned_existence=n_exi,
            merged=n_merged,
        ))
        if positions.shape[0] == 0:
            return ClusterResult([], diag, m)

    # final E-step at the settled positions: marginals, covariance, scoring
    problem, bundle = build_edges(positions, arr, params, config.edge_radius)
    init = _warm_messages(problem, ids, m, prev_msgs)
    marg = run_bp(problem, max_iters=config.bp_iters, damping=config.damping,
                  tol=config.bp_tol, init_messages=init)
    _, _, hess, _ = assemble_loss(
        positions, problem, marg, arr, params, prior, class_id, bundle)
    cov = posterior_covariance(hess, config.eig_floor)

    adjust = np.zeros(positions.shape[0])
    if prior.kind == "spike_slab":
        lp = log_prior_batch(positions, prior, class_id)[0]
        adjust = lp + math.log(prior.region_area)
    score = 1.0 / (1.0 + np.exp(-(marg.existence_logit + adjust)))

    assign: list[dict[int, float]] = [dict() for _ in range(positions.shape[0])]
    for e in range(problem.n_edges):
        assign[problem.edge_obj[e]][int(problem.edge_ray[e])] = \
            float(marg.assignment[e])
    hypotheses = [
        ObjectHypothesis(
            position=(float(positions[i, 0]), float(positions[i, 1])),
            existence=float(score[i]),
            covariance=cov[i],
            assignment_marginals=assign[i],
            class_id=class_id,
        )
        for i in range(positions.shape[0])
    ]
    check_ray_normalization(hypotheses, m)
    return ClusterResult(hypotheses, diag, m)
