"""The M-step: expected negative log-likelihood and regularized Newton steps.

The objective over object positions, with assignment marginals held fixed, is

    loss(x) = - sum_edges abar_ij * log f(z_j | x_i) - sum_i log prior(x_i)

Its Hessian is block-diagonal with one 2x2 block per object, so the Newton
solve is a batched closed-form 2x2 inverse.  Each block is regularized by an
eigenvalue floor plus a trust-region term proportional to the gradient norm:

    H_reg = H + (max(0, eig_floor - lambda_min(H)) + |g| / trust_radius) * I
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import sensor
from .assoc import AssociationProblem, Marginals
from .domain import SensorParams
from .priors import PriorDensity, log_prior_batch

__all__ = ["NewtonReport", "assemble_loss", "newton_step",
           "posterior_covariance"]

DEFAULT_TRUST_RADIUS = 10.0
DEFAULT_EIG_FLOOR = 1e-3
MAX_HALVINGS = 8


@dataclass
class NewtonReport:
    positions_new: np.ndarray   # (N, 2)
    loss_before: float
    loss_after: float
    step_norms: np.ndarray      # (N,)
    regularizers: np.ndarray    # (N,) shift applied to each block
    halvings: int = 0


def assemble_loss(positions, problem: AssociationProblem, marginals: Marginals,
                  arr, params: SensorParams, prior: PriorDensity,
                  class_id: int = 0, bundle: sensor.EdgeBundle | None = None):
    """Assemble loss, per-object gradient, and per-object Hessian blocks.

    Edges flagged as geometrically degenerate (range below the sensor floor)
    are skipped and counted.  Returns (loss, grad (N,2), hess (N,2,2),
    skipped_edges).
    """
    positions = np.asarray(positions, dtype=float).reshape(-1, 2)
    n = positions.shape[0]
    if n != problem.n_objects:
        raise ValueError("positions inconsistent with problem")
    if not np.all(np.isfinite(positions)):
        raise ValueError("positions must be finite")
    if bundle is None:
        bundle = sensor.evaluate_edges(arr, problem.edge_ray, positions,
                                       problem.edge_obj, params)
    abar = marginals.assignment
    if abar.shape != (problem.n_edges,):
        raise ValueError("marginals inconsistent with the edge set")

    ok = ~bundle.clamped
    skipped = int(np.sum(~ok))
    w = np.where(ok, abar, 0.0)
    eobj = problem.edge_obj

    lp, lp_gx, lp_hess = log_prior_batch(positions, prior, class_id)
    loss = -float(np.sum(w * bundle.logf)) - float(np.sum(lp))
    grad = np.zeros((n, 2))
    np.add.at(grad[:, 0], eobj, -w * bundle.gx)
    np.add.at(grad[:, 1], eobj, -w * bundle.gy)
    grad -= lp_gx

    hess = np.zeros((n, 2, 2))
    np.add.at(hess[:, 0, 0], eobj, -w * bundle.hxx)
    np.add.at(hess[:, 0, 1], eobj, -w * bundle.hxy)
    np.add.at(hess[:, 1, 1], eobj, -w * bundle.hyy)
    hess[:, 1, 0] = hess[:, 0, 1]
    hess -= lp_hess
    return loss, grad, hess, skipped


def _eig2_min(hess):
    a, b, c = hess[:, 0, 0], hess[:, 0, 1], hess[:, 1, 1]
    mean = 0.5 * (a + c)
    rad = np.hypot(0.5 * (a - c), b)
    return mean - rad


def newton_step(positions, grad, hess, trust_radius: float = DEFAULT_TRUST_RADIUS,
                eig_floor: float = DEFAULT_EIG_FLOOR, loss_before: float | None = None,
                loss_fn=None) -> NewtonReport:
    """One regularized Newton step on all objects jointly.

    When ``loss_fn`` is given the step is halved (up to 8 times, then zeroed)
    until the loss does not increase; this guards clutter-heavy scenes and is
    not part of the core update.
    """
    positions = np.asarray(positions, dtype=float).reshape(-1, 2)
    grad = np.asarray(grad, dtype=float).reshape(-1, 2)
    hess = np.asarray(hess, dtype=float).reshape(-1, 2, 2)
    if not (np.all(np.isfinite(grad)) and np.all(np.isfinite(hess))):
        raise ValueError("non-finite gradient or Hessian")

    gnorm = np.hypot(grad[:, 0], grad[:, 1])
    lam_min = _eig2_min(hess)
    shift = np.maximum(0.0, eig_floor - lam_min)
    if np.isfinite(trust_radius):
        shift = shift + gnorm / trust_radius
    a = hess[:, 0, 0] + shift
    b = hess[:, 0, 1]
    c = hess[:, 1, 1] + shift
    det = a * c - b * b
    safe = det > 1e-300
    inv_det = np.where(safe, 1.0 / np.where(safe, det, 1.0), 0.0)
    step = np.empty_like(grad)
    step[:, 0] = -inv_det * (c * grad[:, 0] - b * grad[:, 1])
    step[:, 1] = -inv_det * (-b * grad[:, 0] + a * grad[:, 1])

    halvings = 0
    scale = 1.0
    if loss_fn is not None:
        if loss_before is None:
            loss_before = float(loss_fn(positions))
        accepted = False
        for k in range(MAX_HALVINGS + 1):
            trial = positions + scale * step
            loss_after = float(loss_fn(trial))
            if loss_after <= loss_before:
                accepted = True
                halvings = k
                break
            scale *= 0.5
        if not accepted:
            scale = 0.0
            halvings = MAX_HALVINGS
            loss_after = loss_before
        new_positions = positions + scale * step
    else:
        new_positions = positions + step
        loss_after = loss_before if loss_before is not None else np.nan
        if loss_before is None:
            loss_before = np.nan

    final_step = new_positions - positions
    return NewtonReport(
        positions_new=new_positions,
        loss_before=float(loss_before),
        loss_after=float(loss_after),
        step_norms=np.hypot(final_step[:, 0], final_step[:, 1]),
        regularizers=shift,
        halvings=halvings,
    )


def posterior_covariance(hess_block, eig_floor: float = DEFAULT_EIG_FLOOR):
    """Inverse of the eigenvalue-floored Hessian block(s).

    Accepts one (2,2) block or a stack (N,2,2); always symmetric PD.
    """
    h = np.asarray(hess_block, dtype=float)
    single = h.ndim == 2
    if single:
        h = h[None]
    a, b, c = h[:, 0, 0], h[:, 0, 1], h[:, 1, 1]
    mean = 0.5 * (a + c)
    rad = np.hypot(0.5 * (a - c), b)
    l1 = np.maximum(mean + rad, eig_floor)
    l2 = np.maximum(mean - rad, eig_floor)
    half_ang = 0.5 * np.arctan2(2.0 * b, a - c)
    ct, st = np.cos(half_ang), np.sin(half_ang)
    cov = np.empty_like(h)
    cov[:, 0, 0] = ct * ct / l1 + st * st / l2
    cov[:, 1, 1] = st * st / l1 + ct * ct / l2
    cov[:, 0, 1] = ct * st * (1.0 / l1 - 1.0 / l2)
    cov[:, 1, 0] = cov[:, 0, 1]
    return cov[0] if single else cov
