"""Measurement likelihood, detection probability, and BP potentials.

The measurement density for a ray z given an object at x factors into an
exponential radial law and a Von Mises angular law whose concentration
depends on range:

    log f(z|x) = log Exp(r; radial_rate) + log VonMises(phi; 0, kappa(r))
    kappa(r)   = 1 / (angular_sigma^2 + (gps_sigma / r)^2)

with r the object-origin distance and phi the bearing residual.  The
radius-dependent concentration folds the camera's positional noise into the
angular channel, which keeps the density three-parameter.

The BP edge potential composes the density ratio against clutter with the
detection odds so that it is consistent with the existence potential's
missed-detection product:

    log psi_ij = log(p_d / (1 - p_d)) + log f(z_j|x_i) - log clutter_density
    log psi_i  = existence_logit + sum_j log(1 - p_d(x_i, j))
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .domain import Ray, SensorParams, rays_to_arrays

__all__ = [
    "EPS_R",
    "FOV_HALF_WIDTH",
    "FOV_EDGE_WIDTH",
    "DegenerateGeometryError",
    "LikelihoodEval",
    "AssignmentEval",
    "log_f",
    "detect_prob",
    "detect_prob_grads",
    "existence_potential",
    "assignment_potential",
    "EdgeBundle",
    "evaluate_edges",
    "edge_param_grads",
    "edge_position_grads",
]

EPS_R = 0.5                          # distance floor, meters
FOV_HALF_WIDTH = math.radians(60.0)  # half-width of the visibility window
FOV_EDGE_WIDTH = math.radians(5.0)   # logistic edge of the window


class DegenerateGeometryError(ValueError):
    """Object-origin distance below the EPS_R floor."""


@dataclass(frozen=True)
class LikelihoodEval:
    """log f and its exact derivatives at one (ray, position) pair.

    ``grad_params`` is over the 8 unconstrained parameter coordinates.
    """

    log_density: float
    grad_position: np.ndarray
    hessian_position: np.ndarray
    grad_params: np.ndarray


@dataclass(frozen=True)
class AssignmentEval:
    """Assignment potential of one edge.

    ``log_psi`` is the bare density-ratio form (detection logit plus
    log f minus log clutter); ``detection_correction`` is the term that
    upgrades it to the composed potential used by BP, so that
    ``log_psi_bp = log_psi + detection_correction``.
    """

    log_psi: float
    detection_correction: float
    grad_position: np.ndarray
    grad_params: np.ndarray

    @property
    def log_psi_bp(self) -> float:
        return self.log_psi + self.detection_correction


def _single(ray: Ray, x) -> tuple[np.ndarray, ...]:
    arr = rays_to_arrays([ray])
    px = np.array([float(x[0])])
    py = np.array([float(x[1])])
    return arr["ox"], arr["oy"], arr["theta"], arr["conf"], px, py


def _check_distance(ray: Ray, x):
    r = math.hypot(x[0] - ray.origin[0], x[1] - ray.origin[1])
    if r < EPS_R:
        raise DegenerateGeometryError(
            f"distance {r:.3f} m below floor {EPS_R} m")


def log_f(ray: Ray, x, params: SensorParams) -> LikelihoodEval:
    """Measurement log-density with exact derivatives.

    Raises DegenerateGeometryError when x is within EPS_R of the ray origin.
    """
    _check_distance(ray, x)
    ox, oy, th, _, px, py = _single(ray, x)
    logf, gx, gy, hxx, hxy, hyy, dth, _ = kernels.edge_log_f(
        ox, oy, th, px, py,
        params.radial_rate, params.angular_sigma, params.gps_sigma, EPS_R)
    jac = params.unconstrained_jacobian()
    gp = np.zeros(8)
    gp[:3] = dth[0] * jac[:3]
    return LikelihoodEval(
        log_density=float(logf[0]),
        grad_position=np.array([gx[0], gy[0]]),
        hessian_position=np.array([[hxx[0], hxy[0]], [hxy[0], hyy[0]]]),
        grad_params=gp,
    )


def detect_prob(ray: Ray, x, params: SensorParams) -> float:
    """Probability that the object at x produced a detection on this frame."""
    _check_distance(ray, x)
    ox, oy, th, conf, px, py = _single(ray, x)
    pd = kernels.edge_detect(
        ox, oy, th, conf, px, py,
        params.radial_rate, params.detect_ceiling,
        params.conf_slope, params.conf_intercept,
        EPS_R, FOV_HALF_WIDTH, FOV_EDGE_WIDTH)
    return float(pd[0])


def detect_prob_grads(ray: Ray, x, params: SensorParams):
    """p_d with position gradient and unconstrained parameter gradient."""
    _check_distance(ray, x)
    ox, oy, th, conf, px, py = _single(ray, x)
    pd, gx, gy, dth4 = kernels.edge_detect_grads(
        ox, oy, th, conf, px, py,
        params.radial_rate, params.detect_ceiling,
        params.conf_slope, params.conf_intercept,
        EPS_R, FOV_HALF_WIDTH, FOV_EDGE_WIDTH)
    jac = params.unconstrained_jacobian()
    gp = np.zeros(8)
    gp[[0, 3, 4, 5]] = dth4[0] * jac[[0, 3, 4, 5]]
    return float(pd[0]), np.array([gx[0], gy[0]]), gp


def existence_potential(x, rays, params: SensorParams) -> float:
    """log psi_i = existence_logit + sum_j log(1 - p_d) over candidate rays."""
    if len(rays) == 0:
        return params.existence_logit
    arr = rays_to_arrays(rays)
    n = len(rays)
    px = np.full(n, float(x[0]))
    py = np.full(n, float(x[1]))
    pd = kernels.edge_detect(
        arr["ox"], arr["oy"], arr["theta"], arr["conf"], px, py,
        params.radial_rate, params.detect_ceiling,
        params.conf_slope, params.conf_intercept,
        EPS_R, FOV_HALF_WIDTH, FOV_EDGE_WIDTH)
    return params.existence_logit + float(np.sum(np.log1p(-pd)))


def assignment_potential(ray: Ray, x, params: SensorParams) -> AssignmentEval:
    """Edge potential of (ray, x): bare density ratio plus detection odds.

    The returned gradients are those of the composed potential
    ``log_psi_bp``, which is what belief propagation consumes.
    """
    _check_distance(ray, x)
    ev = log_f(ray, x, params)
    pd, pd_gx, pd_gp = detect_prob_grads(ray, x, params)
    conf = min(max(ray.confidence, 1e-12), 1.0 - 1e-12)
    delta = params.conf_slope * (math.log(conf) - math.log1p(-conf)) \
        + params.conf_intercept
    log_clutter = math.log(params.clutter_density)
    bare = delta + ev.log_density - log_clutter
    correction = math.log(pd) - math.log1p(-pd) - delta

    inv = 1.0 / (pd * (1.0 - pd))
    grad_pos = ev.grad_position + pd_gx * inv
    grad_params = ev.grad_params + pd_gp * inv
    jac = params.unconstrained_jacobian()
    grad_params = grad_params.copy()
    grad_params[6] += -1.0 / params.clutter_density * jac[6]
    return AssignmentEval(
        log_psi=bare,
        detection_correction=correction,
        grad_position=grad_pos,
        grad_params=grad_params,
    )


@dataclass
class EdgeBundle:
    """Everything the EM loop needs per edge, from one kernel pass."""

    logf: np.ndarray
    gx: np.ndarray
    gy: np.ndarray
    hxx: np.ndarray
    hxy: np.ndarray
    hyy: np.ndarray
    dlogf3: np.ndarray      # (E, 3) d log f / d(rate, ang_sigma, gps_sigma)
    pd: np.ndarray
    log1m_pd: np.ndarray
    lpsi_bare: np.ndarray
    lpsi_comp: np.ndarray
    clamped: np.ndarray


def evaluate_edges(arr, eray, positions, eobj, params: SensorParams) -> EdgeBundle:
    """Evaluate density, detection, and potentials on an explicit edge list.

    ``arr`` are packed ray arrays (see rays_to_arrays); ``eray``/``eobj``
    index rays and objects per edge.
    """
    ox = arr["ox"][eray]
    oy = arr["oy"][eray]
    th = arr["theta"][eray]
    conf = arr["conf"][eray]
    px = positions[eobj, 0]
    py = positions[eobj, 1]
    logf, gx, gy, hxx, hxy, hyy, dth, clamped = kernels.edge_log_f(
        ox, oy, th, px, py,
        params.radial_rate, params.angular_sigma, params.gps_sigma, EPS_R)
    pd = kernels.edge_detect(
        ox, oy, th, conf, px, py,
        params.radial_rate, params.detect_ceiling,
        params.conf_slope, params.conf_intercept,
        EPS_R, FOV_HALF_WIDTH, FOV_EDGE_WIDTH)
    cc = np.clip(conf, 1e-12, 1.0 - 1e-12)
    delta = params.conf_slope * (np.log(cc) - np.log1p(-cc)) \
        + params.conf_intercept
    log_clutter = math.log(params.clutter_density)
    log1m_pd = np.log1p(-pd)
    lpsi_bare = delta + logf - log_clutter
    lpsi_comp = np.log(pd) - log1m_pd + logf - log_clutter
    return EdgeBundle(logf, gx, gy, hxx, hxy, hyy, dth, pd, log1m_pd,
                      lpsi_bare, lpsi_comp, clamped)


def edge_param_grads(arr, eray, positions, eobj, params: SensorParams):
    """Constrained-coordinate parameter derivatives of the BP potentials.

    Returns (dcomp, dlog1m), both (E, 8): derivatives of the composed edge
    potential and of log(1 - p_d) wrt the constrained parameter vector.
    The existence logit enters log psi_i separately (derivative 1).
    """
    ox = arr["ox"][eray]
    oy = arr["oy"][eray]
    th = arr["theta"][eray]
    conf = arr["conf"][eray]
    px = positions[eobj, 0]
    py = positions[eobj, 1]
    _, _, _, _, _, _, dlogf3, _ = kernels.edge_log_f(
        ox, oy, th, px, py,
        params.radial_rate, params.angular_sigma, params.gps_sigma, EPS_R)
    pd, _, _, dpd4 = kernels.edge_detect_grads(
        ox, oy, th, conf, px, py,
        params.radial_rate, params.detect_ceiling,
        params.conf_slope, params.conf_intercept,
        EPS_R, FOV_HALF_WIDTH, FOV_EDGE_WIDTH)
    n = len(pd)
    inv_odds = 1.0 / (pd * (1.0 - pd))
    inv_1m = 1.0 / (1.0 - pd)

    dcomp = np.zeros((n, 8))
    dcomp[:, :3] = dlogf3
    dcomp[:, 0] += dpd4[:, 0] * inv_odds
    dcomp[:, 3] = dpd4[:, 1] * inv_odds
    dcomp[:, 4] = dpd4[:, 2] * inv_odds
    dcomp[:, 5] = dpd4[:, 3] * inv_odds
    dcomp[:, 6] = -1.0 / params.clutter_density

    dlog1m = np.zeros((n, 8))
    for col, k in ((0, 0), (3, 1), (4, 2), (5, 3)):
        dlog1m[:, col] = -dpd4[:, k] * inv_1m
    return dcomp, dlog1m


def edge_position_grads(arr, eray, positions, eobj, params: SensorParams):
    """Position derivatives of the composed potential and of log(1 - p_d).

    Returns (dcomp_x, dcomp_y, dlog1m_x, dlog1m_y), each (E,).  Used by the
    implicit-differentiation training path.
    """
    ox = arr["ox"][eray]
    oy = arr["oy"][eray]
    th = arr["theta"][eray]
    conf = arr["conf"][eray]
    px = positions[eobj, 0]
    py = positions[eobj, 1]
    _, gx, gy, _, _, _, _, _ = kernels.edge_log_f(
        ox, oy, th, px, py,
        params.radial_rate, params.angular_sigma, params.gps_sigma, EPS_R)
    pd, pgx, pgy, _ = kernels.edge_detect_grads(
        ox, oy, th, conf, px, py,
        params.radial_rate, params.detect_ceiling,
        params.conf_slope, params.conf_intercept,
        EPS_R, FOV_HALF_WIDTH, FOV_EDGE_WIDTH)
    inv_odds = 1.0 / (pd * (1.0 - pd))
    inv_1m = 1.0 / (1.0 - pd)
    return (gx + pgx * inv_odds, gy + pgy * inv_odds,
            -pgx * inv_1m, -pgy * inv_1m)
