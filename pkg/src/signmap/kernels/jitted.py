"""Numba versions of the hot kernels.

Loop-based twins of the functions in ``plain.py``.  The Bessel helpers are
self-contained (power series below kappa=100, asymptotic expansion above) so
nothing here calls back into scipy.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

from .plain import LOG_2PI, PSI_FLOOR  # noqa: F401  (shared constants)

BACKEND = "numba"
_CONF_EPS = 1e-12
_SERIES_CUTOFF = 100.0


@njit(cache=True)
def _i0_i1_series(k):
    q = 0.25 * k * k
    s0 = 1.0
    s1 = 1.0
    t0 = 1.0
    t1 = 1.0
    n = 1
    while n < 600:
        t0 *= q / (n * n)
        t1 *= q / (n * (n + 1))
        s0 += t0
        s1 += t1
        if t0 < 1e-18 * s0:
            break
        n += 1
    return s0, 0.5 * k * s1


@njit(cache=True)
def _log_i0_s(k):
    if k < _SERIES_CUTOFF:
        s0, _ = _i0_i1_series(k)
        return math.log(s0)
    ik = 1.0 / k
    br = 1.0 + ik * (0.125 + ik * (0.0703125 + ik * (
        0.0732421875 + ik * 0.112152099609375)))
    return k - 0.5 * math.log(2.0 * math.pi * k) + math.log(br)


@njit(cache=True)
def _i1_over_i0_s(k):
    if k < _SERIES_CUTOFF:
        s0, s1 = _i0_i1_series(k)
        return s1 / s0
    ik = 1.0 / k
    br0 = 1.0 + ik * (0.125 + ik * (0.0703125 + ik * (
        0.0732421875 + ik * 0.112152099609375)))
    br1 = 1.0 - ik * (0.375 + ik * (0.1171875 + ik * (
        0.1025390625 + ik * 0.144195556640625)))
    return br1 / br0


@njit(cache=True)
def log_i0(k):
    out = np.empty(k.shape[0])
    for i in range(k.shape[0]):
        out[i] = _log_i0_s(k[i])
    return out


@njit(cache=True)
def i1_over_i0(k):
    out = np.empty(k.shape[0])
    for i in range(k.shape[0]):
        out[i] = _i1_over_i0_s(k[i])
    return out


@njit(cache=True)
def _wrap_s(a):
    return math.pi - (math.pi - a) % (2.0 * math.pi)


@njit(cache=True)
def _log1pexp(t):
    if t > 0.0:
        return t + math.log1p(math.exp(-t))
    return math.log1p(math.exp(t))


@njit(cache=True)
def _sigmoid(x):
    if x >= 0.0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


@njit(cache=True)
def edge_log_f(ox, oy, theta, px, py, lam, sth, sg, eps_r):
    n = ox.shape[0]
    logf = np.empty(n)
    gx = np.empty(n)
    gy = np.empty(n)
    hxx = np.empty(n)
    hxy = np.empty(n)
    hyy = np.empty(n)
    dtheta = np.empty((n, 3))
    clamped = np.empty(n, np.bool_)
    log_lam = math.log(lam)
    for e in range(n):
        dx = px[e] - ox[e]
        dy = py[e] - oy[e]
        rt = math.hypot(dx, dy)
        clamped[e] = rt < eps_r
        if rt > 1e-12:
            ux = dx / rt
            uy = dy / rt
            phi = _wrap_s(math.atan2(dy, dx) - theta[e])
        else:
            ux = math.cos(theta[e])
            uy = math.sin(theta[e])
            phi = 0.0
        r = rt if rt > eps_r else eps_r

        d = sth * sth * r * r + sg * sg
        kappa = r * r / d
        kp = 2.0 * sg * sg * r / (d * d)
        kpp = 2.0 * sg * sg * (sg * sg - 3.0 * sth * sth * r * r) / (d * d * d)
        a = _i1_over_i0_s(kappa)
        ap = 1.0 - a * a - a / kappa
        c = math.cos(phi)
        s = math.sin(phi)

        logf[e] = log_lam - lam * r + kappa * c - LOG_2PI - _log_i0_s(kappa)

        gr = -lam + kp * (c - a)
        gphi = -kappa * s
        gx[e] = gr * ux - gphi * uy / r
        gy[e] = gr * uy + gphi * ux / r

        grr = kpp * (c - a) - kp * kp * ap
        m1 = -kp * s / r + kappa * s / (r * r)
        m2 = -kappa * c / (r * r) + gr / r
        hxx[e] = grr * ux * ux - 2.0 * m1 * ux * uy + m2 * uy * uy
        hxy[e] = grr * ux * uy + m1 * (ux * ux - uy * uy) - m2 * ux * uy
        hyy[e] = grr * uy * uy + 2.0 * m1 * ux * uy + m2 * ux * ux

        dtheta[e, 0] = 1.0 / lam - r
        dtheta[e, 1] = (c - a) * (-2.0 * sth * kappa * kappa)
        dtheta[e, 2] = (c - a) * (-2.0 * sg * kappa * kappa / (r * r))
    return logf, gx, gy, hxx, hxy, hyy, dtheta, clamped


@njit(cache=True)
def edge_detect(ox, oy, theta, conf, px, py, lam, ceil, slope, icept,
                eps_r, wfov, wedge):
    n = ox.shape[0]
    pd = np.empty(n)
    for e in range(n):
        dx = px[e] - ox[e]
        dy = py[e] - oy[e]
        rt = math.hypot(dx, dy)
        if rt > 1e-12:
            phi = _wrap_s(math.atan2(dy, dx) - theta[e])
        else:
            phi = 0.0
        r = rt if rt > eps_r else eps_r
        cc = conf[e]
        if cc < _CONF_EPS:
            cc = _CONF_EPS
        elif cc > 1.0 - _CONF_EPS:
            cc = 1.0 - _CONF_EPS
        delta = slope * (math.log(cc) - math.log1p(-cc)) + icept
        w = _sigmoid((wfov - phi) / wedge) * _sigmoid((wfov + phi) / wedge)
        pd[e] = ceil * _sigmoid(delta) * math.exp(-lam * r) * w
    return pd


@njit(cache=True)
def bp_run(n_obj, n_ray, eobj, eray, lpsi_e, lpsi_o, max_iters, damping, tol,
           lmu0, lnu0):
    n_edges = lpsi_e.shape[0]
    lpsi = np.empty(n_edges)
    active = np.empty(n_edges, np.bool_)
    for e in range(n_edges):
        active[e] = lpsi_e[e] > PSI_FLOOR
        lpsi[e] = lpsi_e[e] if lpsi_e[e] < 60.0 else 60.0
    lmu = lmu0.copy()
    lnu = lnu0.copy()
    lmu_new = np.empty(n_edges)
    lnu_new = np.empty(n_edges)
    snu = np.empty(n_obj)
    t = np.empty(n_ray)
    w = np.empty(n_edges)
    delta = np.inf
    iters = 0
    for it in range(max_iters):
        for i in range(n_obj):
            snu[i] = 0.0
        for e in range(n_edges):
            snu[eobj[e]] += lnu[e]
        for e in range(n_edges):
            s_e = lpsi_o[eobj[e]] + snu[eobj[e]] - lnu[e]
            lmu_new[e] = -_log1pexp(-s_e)
        for j in range(n_ray):
            t[j] = 0.0
        for e in range(n_edges):
            w[e] = math.exp(lpsi[e] + lmu_new[e]) if active[e] else 0.0
            t[eray[e]] += w[e]
        delta = 0.0
        for e in range(n_edges):
            if active[e]:
                lnu_e = _log1pexp(lpsi[e] - math.log1p(t[eray[e]] - w[e]))
            else:
                lnu_e = 0.0
            lnu_new[e] = lnu_e
            d1 = abs(lmu_new[e] - lmu[e])
            d2 = abs(lnu_e - lnu[e])
            if d1 > delta:
                delta = d1
            if d2 > delta:
                delta = d2
        for e in range(n_edges):
            lmu[e] = (1.0 - damping) * lmu_new[e] + damping * lmu[e]
            lnu[e] = (1.0 - damping) * lnu_new[e] + damping * lnu[e]
        iters = it + 1
        if delta < tol:
            break

    for j in range(n_ray):
        t[j] = 0.0
    for e in range(n_edges):
        w[e] = math.exp(lpsi[e] + lmu[e]) if active[e] else 0.0
        t[eray[e]] += w[e]
    abar = np.empty(n_edges)
    for e in range(n_edges):
        abar[e] = w[e] / (1.0 + t[eray[e]])
    null_mass = np.empty(n_ray)
    for j in range(n_ray):
        null_mass[j] = 1.0 / (1.0 + t[j])
    for i in range(n_obj):
        snu[i] = 0.0
    for e in range(n_edges):
        snu[eobj[e]] += lnu[e]
    elogit = np.empty(n_obj)
    ebar = np.empty(n_obj)
    for i in range(n_obj):
        elogit[i] = lpsi_o[i] + snu[i]
        ebar[i] = _sigmoid(elogit[i])
    return ebar, elogit, abar, null_mass, lmu, lnu, iters, delta
