"""Vectorized numpy implementations of the hot kernels.

Every function here has a loop-based numba twin in ``jitted.py`` with the
same signature; the active backend is chosen in ``__init__.py``.  A few cold
helpers (parameter gradients, mixed derivatives) exist only here and are
shared by both backends.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit, i0e, i1e

LOG_2PI = float(np.log(2.0 * np.pi))
PSI_FLOOR = -40.0  # log-potentials at or below this are treated as absent
_CONF_EPS = 1e-12

BACKEND = "numpy"


def log_i0(k):
    """log of the modified Bessel function I0, elementwise."""
    k = np.asarray(k, dtype=float)
    return np.log(i0e(k)) + k


def i1_over_i0(k):
    """Ratio I1/I0 (the Von Mises mean resultant length), elementwise."""
    k = np.asarray(k, dtype=float)
    return i1e(k) / i0e(k)


def _wrap(a):
    return np.pi - (np.pi - a) % (2.0 * np.pi)


def _geometry(ox, oy, theta, px, py, eps_r):
    """Per-edge range, bearing residual, and radial unit vector.

    The range is clamped below at ``eps_r``; clamped entries are flagged.
    """
    dx = px - ox
    dy = py - oy
    r_true = np.hypot(dx, dy)
    clamped = r_true < eps_r
    safe = np.maximum(r_true, 1e-12)
    ux = np.where(r_true > 1e-12, dx / safe, np.cos(theta))
    uy = np.where(r_true > 1e-12, dy / safe, np.sin(theta))
    phi = np.where(r_true > 1e-12,
                   _wrap(np.arctan2(dy, dx) - theta), 0.0)
    r = np.maximum(r_true, eps_r)
    return r, phi, ux, uy, clamped


def edge_log_f(ox, oy, theta, px, py, lam, sth, sg, eps_r):
    """Measurement log-density with exact position and parameter derivatives.

    Returns (logf, gx, gy, hxx, hxy, hyy, dtheta, clamped) where dtheta is an
    (E, 3) array of derivatives wrt (radial_rate, angular_sigma, gps_sigma).
    """
    r, phi, ux, uy, clamped = _geometry(ox, oy, theta, px, py, eps_r)
    d = sth * sth * r * r + sg * sg
    kappa = r * r / d
    kp = 2.0 * sg * sg * r / (d * d)
    kpp = 2.0 * sg * sg * (sg * sg - 3.0 * sth * sth * r * r) / (d * d * d)
    a = i1_over_i0(kappa)
    ap = 1.0 - a * a - a / kappa
    c, s = np.cos(phi), np.sin(phi)

    logf = np.log(lam) - lam * r + kappa * c - LOG_2PI - log_i0(kappa)

    gr = -lam + kp * (c - a)
    gphi = -kappa * s
    gx = gr * ux - gphi * uy / r
    gy = gr * uy + gphi * ux / r

    grr = kpp * (c - a) - kp * kp * ap
    m1 = -kp * s / r + kappa * s / (r * r)   # grphi/r - gphi/r^2
    m2 = -kappa * c / (r * r) + gr / r       # gphiphi/r^2 + gr/r
    hxx = grr * ux * ux - 2.0 * m1 * ux * uy + m2 * uy * uy
    hxy = grr * ux * uy + m1 * (ux * ux - uy * uy) - m2 * ux * uy
    hyy = grr * uy * uy + 2.0 * m1 * ux * uy + m2 * ux * ux

    dtheta = np.empty(r.shape + (3,))
    dtheta[..., 0] = 1.0 / lam - r
    dtheta[..., 1] = (c - a) * (-2.0 * sth * kappa * kappa)
    dtheta[..., 2] = (c - a) * (-2.0 * sg * kappa * kappa / (r * r))
    return logf, gx, gy, hxx, hxy, hyy, dtheta, clamped


def _conf_logit(conf):
    cc = np.clip(conf, _CONF_EPS, 1.0 - _CONF_EPS)
    return np.log(cc) - np.log1p(-cc)


def _fov_window(phi, wfov, wedge):
    return expit((wfov - phi) / wedge) * expit((wfov + phi) / wedge)


def edge_detect(ox, oy, theta, conf, px, py, lam, ceil, slope, icept,
                eps_r, wfov, wedge):
    """Per-edge detection probability p_d."""
    r, phi, _, _, _ = _geometry(ox, oy, theta, px, py, eps_r)
    q = ceil * expit(slope * _conf_logit(conf) + icept)
    return q * np.exp(-lam * r) * _fov_window(phi, wfov, wedge)


def bp_run(n_obj, n_ray, eobj, eray, lpsi_e, lpsi_o, max_iters, damping, tol,
           lmu0, lnu0):
    """Loopy BP for the existence/assignment factor graph, in log domain.

    Synchronous schedule: all object->edge messages mu from the previous
    edge->object messages nu, then all nu from the new mu.  Messages start
    from the given init arrays (cold or warm).  Edges with potentials at or
    below PSI_FLOOR are treated as absent.

    Returns (ebar, elogit, abar, null_mass, lmu, lnu, iters, delta).
    """
    n_edges = lpsi_e.shape[0]
    active = lpsi_e > PSI_FLOOR
    lpsi = np.minimum(lpsi_e, 60.0)
    lmu = lmu0.copy()
    lnu = lnu0.copy()
    delta = np.inf
    iters = 0
    for it in range(max_iters):
        snu = np.bincount(eobj, weights=lnu, minlength=n_obj)
        s_e = lpsi_o[eobj] + snu[eobj] - lnu
        lmu_new = -np.logaddexp(0.0, -s_e)
        w = np.where(active, np.exp(lpsi + lmu_new), 0.0)
        t = np.bincount(eray, weights=w, minlength=n_ray)
        lnu_new = np.where(active,
                           np.logaddexp(0.0, lpsi - np.log1p(t[eray] - w)),
                           0.0)
        delta = 0.0
        if n_edges:
            delta = max(np.max(np.abs(lmu_new - lmu)),
                        np.max(np.abs(lnu_new - lnu)))
        lmu = (1.0 - damping) * lmu_new + damping * lmu
        lnu = (1.0 - damping) * lnu_new + damping * lnu
        iters = it + 1
        if delta < tol:
            break

    w = np.where(active, np.exp(lpsi + lmu), 0.0)
    t = np.bincount(eray, weights=w, minlength=n_ray)
    abar = w / (1.0 + t[eray]) if n_edges else np.zeros(0)
    null_mass = 1.0 / (1.0 + t)
    snu = np.bincount(eobj, weights=lnu, minlength=n_obj)
    elogit = lpsi_o + snu
    ebar = expit(elogit)
    return ebar, elogit, abar, null_mass, lmu, lnu, iters, delta


# -- cold helpers, numpy only (shared by both backends) ----------------------

def edge_detect_grads(ox, oy, theta, conf, px, py, lam, ceil, slope, icept,
                      eps_r, wfov, wedge):
    """p_d with position gradient and (E, 4) derivatives wrt
    (radial_rate, detect_ceiling, conf_slope, conf_intercept)."""
    r, phi, ux, uy, _ = _geometry(ox, oy, theta, px, py, eps_r)
    lgt = _conf_logit(conf)
    sd = expit(slope * lgt + icept)
    pd = ceil * sd * np.exp(-lam * r) * _fov_window(phi, wfov, wedge)
    # d log W / d phi for the logistic-edged window
    dlogw = (expit(-(wfov + phi) / wedge) - expit(-(wfov - phi) / wedge)) / wedge
    gx = pd * (-lam * ux - dlogw * uy / r)
    gy = pd * (-lam * uy + dlogw * ux / r)
    dtheta = np.empty(r.shape + (4,))
    dtheta[..., 0] = -r * pd
    dtheta[..., 1] = pd / ceil
    dtheta[..., 2] = pd * (1.0 - sd) * lgt
    dtheta[..., 3] = pd * (1.0 - sd)
    return pd, gx, gy, dtheta


def edge_log_f_mixed(ox, oy, theta, px, py, lam, sth, sg, eps_r):
    """Mixed second derivatives d(grad_x log f)/d(lam, sth, sg).

    Returns (dgx, dgy), each (E, 3).  Used by the implicit-differentiation
    path that propagates parameter sensitivity through the Newton step.
    """
    r, phi, ux, uy, _ = _geometry(ox, oy, theta, px, py, eps_r)
    d = sth * sth * r * r + sg * sg
    kappa = r * r / d
    kp = 2.0 * sg * sg * r / (d * d)
    a = i1_over_i0(kappa)
    ap = 1.0 - a * a - a / kappa
    c, s = np.cos(phi), np.sin(phi)
    vx, vy = -uy / r, ux / r

    dk_dsth = -2.0 * sth * kappa * kappa
    dk_dsg = -2.0 * sg * kappa * kappa / (r * r)
    dkp_dsth = -8.0 * sg * sg * sth * r ** 3 / d ** 3
    dkp_dsg = 4.0 * sg * r / d ** 2 - 8.0 * sg ** 3 * r / d ** 3

    # gr = -lam + kp (c - a); gphi = -kappa s
    dgr = np.empty(r.shape + (3,))
    dgphi = np.empty(r.shape + (3,))
    dgr[..., 0] = -1.0
    dgphi[..., 0] = 0.0
    dgr[..., 1] = (c - a) * dkp_dsth - kp * ap * dk_dsth
    dgphi[..., 1] = -s * dk_dsth
    dgr[..., 2] = (c - a) * dkp_dsg - kp * ap * dk_dsg
    dgphi[..., 2] = -s * dk_dsg

    dgx = dgr * ux[..., None] + dgphi * vx[..., None]
    dgy = dgr * uy[..., None] + dgphi * vy[..., None]
    return dgx, dgy
