"""Variational training of per-class sensor parameters.

The clustering solver's output is read as a mean-field variational
distribution q: independent per-ray Categoricals over {objects, null} with
the assignment marginals, and independent per-object Bernoullis with the
existence marginals.  The ELBO is evaluated with assignments marginalized in
closed form (no sampling of discrete variables anywhere):

    elbo = data_term + entropy_term + prior_term

By default gradients flow only through the parameter-dependent potentials
with q and the object positions frozen ("detached" solver).  An optional
implicit-differentiation path also propagates parameter sensitivity of the
positions through the final Newton step via H dx/dtheta = -dg/dtheta.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels, sensor
from .cluster import ClusterResult, EmConfig, associate_at, run_em
from .domain import (
    InvariantError,
    ObjectHypothesis,
    SceneBatch,
    SensorParams,
    rays_to_arrays,
)
from .priors import PriorDensity, log_prior_batch
from .solver import assemble_loss, posterior_covariance

__all__ = ["TrainConfig", "ElboReport", "AdamState", "adam_step", "elbo",
           "train"]


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    decay: float = 0.7           # learning-rate factor applied per epoch
    steps: int = 200
    seed: int = 0
    detach_inner: bool = True

    def __post_init__(self):
        if self.learning_rate < 0:
            raise InvariantError("learning_rate must be >= 0")
        if not 0.0 < self.decay <= 1.0:
            raise InvariantError("decay must be in (0, 1]")
        if self.steps < 1:
            raise InvariantError("steps must be >= 1")


@dataclass(frozen=True)
class ElboReport:
    elbo: float
    data_term: float
    entropy_term: float
    prior_term: float
    grad_params: np.ndarray   # (8,) ascent direction, unconstrained coords


@dataclass(frozen=True)
class AdamState:
    u: np.ndarray
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def init(cls, u0) -> "AdamState":
        u0 = np.asarray(u0, dtype=float)
        return cls(u=u0.copy(), m=np.zeros_like(u0), v=np.zeros_like(u0), t=0)


def adam_step(state: AdamState, grad, learning_rate: float,
              betas: tuple[float, float] = (0.9, 0.999),
              eps: float = 1e-8) -> AdamState:
    """One standard bias-corrected Adam minimization step."""
    grad = np.asarray(grad, dtype=float)
    b1, b2 = betas
    t = state.t + 1
    m = b1 * state.m + (1.0 - b1) * grad
    v = b2 * state.v + (1.0 - b2) * grad * grad
    mh = m / (1.0 - b1 ** t)
    vh = v / (1.0 - b2 ** t)
    u = state.u - learning_rate * mh / (np.sqrt(vh) + eps)
    return AdamState(u=u, m=m, v=v, t=t)


def _log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


def _entropy_bernoulli(p):
    p = np.clip(p, 1e-300, 1.0)
    q = np.clip(1.0 - p, 1e-300, 1.0)
    return -(p * np.log(p) + q * np.log(q))


def _edges_from_hypotheses(hyps, n_rays):
    eobj, eray, abar = [], [], []
    for i, h in enumerate(hyps):
        for j in sorted(h.assignment_marginals):
            if not 0 <= j < n_rays:
                raise InvariantError(f"hypothesis {i} references ray {j} "
                                     f"outside batch of {n_rays}")
            eobj.append(i)
            eray.append(j)
            abar.append(h.assignment_marginals[j])
    return (np.asarray(eobj, dtype=np.int64),
            np.asarray(eray, dtype=np.int64),
            np.asarray(abar, dtype=float))


def elbo(batch: SceneBatch, result, params: SensorParams,
         prior: PriorDensity, differentiate_positions: bool = False,
         eig_floor: float = 1e-3) -> ElboReport:
    """Evidence lower bound of one batch under frozen solver output.

    ``result`` is a ClusterResult or a plain list of ObjectHypothesis.
    ``grad_params`` differentiates only the parameter-dependent potentials;
    with ``differentiate_positions`` it additionally carries the implicit
    sensitivity of the final Newton positions.
    """
    hyps = result.hypotheses if isinstance(result, ClusterResult) else list(result)
    m = len(batch.rays)
    n = len(hyps)
    class_id = hyps[0].class_id if n else 0

    eobj, eray, abar = _edges_from_hypotheses(hyps, m)
    if abar.size and (abar.min() < -1e-9 or abar.max() > 1.0 + 1e-9):
        raise InvariantError("assignment marginals outside [0,1]")
    ray_mass = np.bincount(eray, weights=abar, minlength=m) if m else np.zeros(0)
    if ray_mass.size and ray_mass.max() > 1.0 + 1e-6:
        raise InvariantError(
            f"per-ray assignment mass exceeds 1 by {ray_mass.max() - 1.0:.2e}")
    null = np.clip(1.0 - ray_mass, 0.0, 1.0)

    if n == 0:
        ent = float(np.sum(-np.where(null < 1.0,
                                     np.clip(null, 1e-300, 1.0)
                                     * np.log(np.clip(null, 1e-300, 1.0)), 0.0)))
        return ElboReport(elbo=ent, data_term=0.0, entropy_term=ent,
                          prior_term=0.0, grad_params=np.zeros(8))

    positions = np.array([h.position for h in hyps], dtype=float)
    ebar = np.array([h.existence for h in hyps], dtype=float)
    arr = rays_to_arrays(batch.rays)

    bundle = sensor.evaluate_edges(arr, eray, positions, eobj, params)
    lpsi_obj = params.existence_logit \
        + np.bincount(eobj, weights=bundle.log1m_pd, minlength=n)

    data = float(np.sum(abar * bundle.lpsi_comp))
    data += float(np.sum(ebar * _log_sigmoid(lpsi_obj)
                         + (1.0 - ebar) * _log_sigmoid(-lpsi_obj)))

    ent_edges = -np.sum(np.where(abar > 0,
                                 abar * np.log(np.clip(abar, 1e-300, 1.0)),
                                 0.0))
    ent_null = -np.sum(np.where(null > 0,
                                null * np.log(np.clip(null, 1e-300, 1.0)),
                                0.0))
    entropy = float(ent_edges + ent_null + np.sum(_entropy_bernoulli(ebar)))

    lp = log_prior_batch(positions, prior, class_id)[0]
    prior_term = float(np.sum(ebar * lp))

    # gradient in the constrained coordinates, then chain to unconstrained
    dcomp, dlog1m = sensor.edge_param_grads(arr, eray, positions, eobj, params)
    resid = ebar - 1.0 / (1.0 + np.exp(-lpsi_obj))   # ebar - sigmoid(L_i)
    gcon = abar @ dcomp
    gcon += resid @ np.vstack([
        np.bincount(eobj, weights=dlog1m[:, k], minlength=n)
        for k in range(8)
    ]).T
    gcon[7] += float(np.sum(resid))   # d L_i / d existence_logit = 1
    grad_u = gcon * params.unconstrained_jacobian()

    if differentiate_positions:
        grad_u = grad_u + _implicit_position_term(
            arr, eobj, eray, abar, resid, ebar, positions, lp, params, prior,
            class_id, eig_floor)

    total = data + entropy + prior_term
    return ElboReport(elbo=total, data_term=data, entropy_term=entropy,
                      prior_term=prior_term, grad_params=grad_u)


def _implicit_position_term(arr, eobj, eray, abar, resid, ebar, positions,
                            lp_vals, params, prior, class_id, eig_floor):
    """d ELBO/dx . dx/dtheta with dx/dtheta from H dx = -dg/dtheta."""
    n = positions.shape[0]
    # ELBO gradient in x
    cgx, cgy, l1x, l1y = sensor.edge_position_grads(
        arr, eray, positions, eobj, params)
    delbo_dx = np.zeros((n, 2))
    np.add.at(delbo_dx[:, 0], eobj, abar * cgx)
    np.add.at(delbo_dx[:, 1], eobj, abar * cgy)
    np.add.at(delbo_dx[:, 0], eobj, resid[eobj] * l1x)
    np.add.at(delbo_dx[:, 1], eobj, resid[eobj] * l1y)
    _, lp_grad, _ = log_prior_batch(positions, prior, class_id)
    delbo_dx += ebar[:, None] * lp_grad

    # Hessian blocks of the M-step loss at the final positions
    _, _, _, hxx, hxy, hyy, _, clamped = kernels.edge_log_f(
        arr["ox"][eray], arr["oy"][eray], arr["theta"][eray],
        positions[eobj, 0], positions[eobj, 1],
        params.radial_rate, params.angular_sigma, params.gps_sigma,
        sensor.EPS_R)
    w = np.where(clamped, 0.0, abar)
    hess = np.zeros((n, 2, 2))
    np.add.at(hess[:, 0, 0], eobj, -w * hxx)
    np.add.at(hess[:, 0, 1], eobj, -w * hxy)
    np.add.at(hess[:, 1, 1], eobj, -w * hyy)
    hess[:, 1, 0] = hess[:, 0, 1]
    _, _, lp_hess = log_prior_batch(positions, prior, class_id)
    hess -= lp_hess

    # dg/dtheta for the three density parameters (loss g = -sum abar grad logf)
    dgx3, dgy3 = kernels.edge_log_f_mixed(
        arr["ox"][eray], arr["oy"][eray], arr["theta"][eray],
        positions[eobj, 0], positions[eobj, 1],
        params.radial_rate, params.angular_sigma, params.gps_sigma,
        sensor.EPS_R)
    dg = np.zeros((n, 2, 3))
    for k in range(3):
        np.add.at(dg[:, 0, k], eobj, -w * dgx3[:, k])
        np.add.at(dg[:, 1, k], eobj, -w * dgy3[:, k])

    # solve floored H dx = -dg per object, accumulate dELBO/dx . dx/dtheta
    cov = posterior_covariance(hess, eig_floor)   # floored inverse
    extra_c = np.zeros(8)
    for k in range(3):
        dx = -np.einsum("nde,ne->nd", cov, dg[:, :, k])
        extra_c[k] = float(np.sum(delbo_dx * dx))
    return extra_c * params.unconstrained_jacobian()


def _truth_mode_hypotheses(sub: SceneBatch, params: SensorParams,
                           prior: PriorDensity, em_config: EmConfig,
                           class_id: int) -> list[ObjectHypothesis]:
    """BP-only association with hypothesis positions fixed to the truth."""
    positions = np.array([p for p, _ in sub.ground_truth], dtype=float)
    if positions.size == 0:
        return []
    arr = rays_to_arrays(sub.rays)
    problem, marg, bundle = associate_at(positions, arr, params, em_config)
    _, _, hess, _ = assemble_loss(positions, problem, marg, arr, params,
                                  prior, class_id, bundle)
    cov = posterior_covariance(hess, em_config.eig_floor)
    assign: list[dict[int, float]] = [dict() for _ in range(len(positions))]
    for e in range(problem.n_edges):
        assign[problem.edge_obj[e]][int(problem.edge_ray[e])] = \
            float(marg.assignment[e])
    return [
        ObjectHypothesis(
            position=(float(positions[i, 0]), float(positions[i, 1])),
            existence=float(marg.existence[i]),
            covariance=cov[i],
            assignment_marginals=assign[i],
            class_id=class_id,
        )
        for i in range(len(positions))
    ]


def train(batches, init: dict[int, SensorParams], prior: PriorDensity,
          em_config: EmConfig, train_config: TrainConfig):
    """SVI-style outer loop: one Adam step per drawn batch.

    Labeled batches (per class) fix hypothesis positions to the truth and
    run BP only; unlabeled batches run the full EM loop.  Classes train
    independently with their own derived RNG stream, so joint and separate
    runs produce identical per-class results.

    Returns (per-class SensorParams, trace records).
    """
    batches = list(batches)
    if not batches:
        raise ValueError("train needs at least one batch")
    nb = len(batches)
    trained: dict[int, SensorParams] = {}
    trace: list[dict] = []
    for class_id in sorted(init):
        params = init[class_id]
        rng = np.random.default_rng([train_config.seed, class_id])
        state = AdamState.init(params.to_unconstrained())
        order = np.zeros(nb, dtype=np.int64)
        for step in range(train_config.steps):
            epoch, pos = divmod(step, nb)
            if pos == 0:
                order = rng.permutation(nb)
            bi = int(order[pos])
            lr = train_config.learning_rate * train_config.decay ** epoch
            rec = {"class": class_id, "step": step, "epoch": epoch,
                   "batch": bi, "lr": lr, "skipped": False, "elbo": math.nan,
                   "data": math.nan, "entropy": math.nan, "prior": math.nan}
            sub = batches[bi].filter_class(class_id)
            if len(sub.rays) == 0:
                rec["skipped"] = True
                trace.append(rec)
                continue
            if sub.ground_truth:
                hyps = _truth_mode_hypotheses(sub, params, prior, em_config,
                                              class_id)
            else:
                hyps = run_em(sub, params, prior, em_config).hypotheses
            rep = elbo(sub, hyps, params, prior,
                       differentiate_positions=not train_config.detach_inner,
                       eig_floor=em_config.eig_floor)
            if not (math.isfinite(rep.elbo)
                    and np.all(np.isfinite(rep.grad_params))):
                rec["skipped"] = True
                trace.append(rec)
                continue
            new_state = adam_step(state, -rep.grad_params, lr)
            if not np.array_equal(new_state.u, state.u):
                params = SensorParams.from_unconstrained(new_state.u)
            state = new_state
            rec.update(elbo=rep.elbo, data=rep.data_term,
                       entropy=rep.entropy_term, prior=rep.prior_term)
            trace.append(rec)
        trained[class_id] = params
    return trained, trace
