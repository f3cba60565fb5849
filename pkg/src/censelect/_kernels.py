"""Compiled inner loops for penalized Cox and Gaussian coordinate descent.

Rows are sorted by time. Distinct times form groups ``[gstart[g],
gstart[g + 1])``; the risk set of a group is every row from its start on.
Designs are passed transposed, shape (m, n), so each column is contiguous.
"""

import math

import numpy as np
from numba import njit

OK = 0
NOT_CONVERGED = 1
REFRESH_EVERY = 5
REFRESH_AFTER = 4


@njit(cache=True, nogil=True)
def cox_terms(eta, status, gstart, gev, r, cum_h, cum_h2):
    """Fill r = exp(eta - max), Breslow hazard sums; return log partial likelihood."""
    s0g = np.empty(gstart.shape[0])
    return _terms_s0(eta, status, gstart, gev, r, cum_h, cum_h2, s0g)


@njit(cache=True, nogil=True)
def _terms_s0(eta, status, gstart, gev, r, cum_h, cum_h2, s0g):
    n = eta.shape[0]
    ng = gstart.shape[0]
    shift = -np.inf
    for i in range(n):
        if eta[i] > shift:
            shift = eta[i]
    ll = 0.0
    for i in range(n):
        r[i] = math.exp(eta[i] - shift)
        ll += status[i] * eta[i]
    acc = 0.0
    for g in range(ng - 1, -1, -1):
        end = gstart[g + 1] if g + 1 < ng else n
        for i in range(gstart[g], end):
            acc += r[i]
        s0g[g] = acc
    h = 0.0
    h2 = 0.0
    for g in range(ng):
        d = gev[g]
        if d > 0:
            h += d / s0g[g]
            h2 += d / (s0g[g] * s0g[g])
            ll -= d * (math.log(s0g[g]) + shift)
        end = gstart[g + 1] if g + 1 < ng else n
        for i in range(gstart[g], end):
            cum_h[i] = h
            cum_h2[i] = h2
    return ll


@njit(cache=True, nogil=True)
def cox_loglik(eta, status, gstart, gev):
    n = eta.shape[0]
    r = np.empty(n)
    h = np.empty(n)
    h2 = np.empty(n)
    return cox_terms(eta, status, gstart, gev, r, h, h2)


@njit(cache=True, nogil=True)
def cox_loglik_rows(etas, status, gstart, gev):
    """Log partial likelihood for each row of ``etas`` (shape L x n)."""
    nl, n = etas.shape
    r = np.empty(n)
    h = np.empty(n)
    h2 = np.empty(n)
    s0g = np.empty(gstart.shape[0])
    out = np.empty(nl)
    for l in range(nl):
        out[l] = _terms_s0(etas[l], status, gstart, gev, r, h, h2, s0g)
    return out


@njit(cache=True, nogil=True)
def _linear_predictor(xs, theta, eta):
    eta[:] = 0.0
    for j in range(theta.shape[0]):
        b = theta[j]
        if b != 0.0:
            xj = xs[j]
            for i in range(eta.shape[0]):
                eta[i] += b * xj[i]


@njit(cache=True, nogil=True)
def _soft(u, t):
    if u > t:
        return u - t
    if u < -t:
        return u + t
    return 0.0


@njit(cache=True, nogil=True)
def _update(xs, w, q, v, theta, j, lam, pf, inv_n):
    """One coordinate step on the weighted least-squares model; returns |change|."""
    if v[j] <= 0.0:
        return 0.0
    xj = xs[j]
    n = q.shape[0]
    grad = 0.0
    for i in range(n):
        grad += xj[i] * q[i]
    u = grad * inv_n + v[j] * theta[j]
    new = _soft(u, lam * pf[j]) / v[j]
    delta = new - theta[j]
    if delta != 0.0:
        for i in range(n):
            q[i] -= w[i] * xj[i] * delta
        theta[j] = new
    return abs(delta)


@njit(cache=True, nogil=True)
def cd_quadratic(xs, w, q, v, theta, lam, pf, tol, max_sweeps):
    """Minimize the penalized weighted least-squares model by cyclic descent.

    ``q`` holds w * (working response - fit) and is updated in place.
    Full sweeps alternate with sweeps over the active set until a full sweep
    changes nothing by more than ``tol``. Returns sweeps used, or -1.
    """
    m = theta.shape[0]
    inv_n = 1.0 / q.shape[0]
    sweeps = 0
    while sweeps < max_sweeps:
        biggest = 0.0
        for j in range(m):
            d = _update(xs, w, q, v, theta, j, lam, pf, inv_n)
            if d > biggest:
                biggest = d
        sweeps += 1
        if biggest < tol:
            return sweeps
        while sweeps < max_sweeps:
            biggest = 0.0
            for j in range(m):
                if theta[j] != 0.0:
                    d = _update(xs, w, q, v, theta, j, lam, pf, inv_n)
                    if d > biggest:
                        biggest = d
            sweeps += 1
            if biggest < tol:
                break
    return -1


@njit(cache=True, nogil=True)
def _penalty(theta, pf):
    s = 0.0
    for j in range(theta.shape[0]):
        s += pf[j] * abs(theta[j])
    return s


@njit(cache=True, nogil=True)
def _risk_means(xs, r, s0g, gstart, xbar):
    """xbar[g, j] = risk-set mean of column j at group g (weights r)."""
    m, n = xs.shape
    ng = gstart.shape[0]
    inv = np.empty(ng)
    for g in range(ng):
        inv[g] = 1.0 / s0g[g]
    for j in range(m):
        xj = xs[j]
        acc = 0.0
        g = ng - 1
        for i in range(n - 1, -1, -1):
            acc += r[i] * xj[i]
            if i == gstart[g]:
                xbar[g, j] = acc * inv[g]
                g -= 1


@njit(cache=True, nogil=True)
def _information(xs, rh, xbar, gev, inv_n, hess):
    """(1/n) information matrix: X' diag(rh) X - sum_g d_g xbar_g xbar_g'."""
    m, n = xs.shape
    ng = gev.shape[0]
    xw = np.empty((m, n))
    for j in range(m):
        for i in range(n):
            xw[j, i] = xs[j, i] * rh[i]
    xb = np.empty((ng, m))
    for g in range(ng):
        sd = math.sqrt(gev[g])
        for j in range(m):
            xb[g, j] = xbar[g, j] * sd
    hess[:, :] = (np.dot(xw, xs.T) - np.dot(xb.T, xb)) * inv_n


@njit(cache=True, nogil=True)
def _cd_newton(hess, gq, theta, lam, pf, tol, max_sweeps):
    """Coordinate descent on the penalized second-order model.

    ``gq`` holds the model gradient (score/n minus H times the step so far)
    and is updated in place.
    """
    m = theta.shape[0]
    sweeps = 0
    full = True
    while sweeps < max_sweeps:
        biggest = 0.0
        for j in range(m):
            hjj = hess[j, j]
            if hjj <= 0.0 or (not full and theta[j] == 0.0):
                continue
            u = gq[j] + hjj * theta[j]
            new = _soft(u, lam * pf[j]) / hjj
            delta = new - theta[j]
            if delta != 0.0:
                col = hess[j]
                for k in range(m):
                    gq[k] -= col[k] * delta
                theta[j] = new
                if abs(delta) > biggest:
                    biggest = abs(delta)
        sweeps += 1
        if biggest < tol:
            if full:
                return sweeps
            full = True
        else:
            full = False
    return -1


@njit(cache=True, nogil=True)
def cox_lasso_path(xs, status, gstart, gev, lambdas, theta0, pf, tol, max_outer,
                   max_sweeps, out):
    """Warm-started lasso Cox path on a standardized design.

    Minimizes -loglik/n + lam * sum(pf * |theta|) for each ``lam`` in turn
    by proximal Newton steps. The information matrix is refreshed at the
    current iterate when a new penalty starts after several slow steps, or
    every tenth penalty; between refreshes the stored matrix is reused, which
    only slows convergence since the gradient is always exact. Each step's
    second-order model is solved by coordinate descent, then halved until
    the true objective does not increase. Converged when no coefficient
    moves by ``tol``. Solutions go to ``out[l]``. Returns (status, index of
    the first penalty that failed).
    """
    m, n = xs.shape
    ng = gstart.shape[0]
    inv_n = 1.0 / n
    theta = theta0.copy()
    prev = np.empty(m)
    proposal = np.empty(m)
    eta = np.empty(n)
    r = np.empty(n)
    cum_h = np.empty(n)
    cum_h2 = np.empty(n)
    s0g = np.empty(ng)
    rh = np.empty(n)
    xbar = np.empty((ng, m))
    hess = np.empty((m, m))
    gq = np.empty(m)
    resid = np.empty(n)
    inner_tol = tol * 0.1
    stale = 1 << 30
    _linear_predictor(xs, theta, eta)
    ll = _terms_s0(eta, status, gstart, gev, r, cum_h, cum_h2, s0g)
    for l in range(lambdas.shape[0]):
        lam = lambdas[l]
        converged = False
        for outer in range(max_outer):
            obj = -ll * inv_n + lam * _penalty(theta, pf)
            for i in range(n):
                resid[i] = status[i] - r[i] * cum_h[i]
            for j in range(m):
                xj = xs[j]
                acc = 0.0
                for i in range(n):
                    acc += xj[i] * resid[i]
                gq[j] = acc * inv_n
            if stale >= REFRESH_EVERY or outer >= REFRESH_AFTER:
                for i in range(n):
                    rh[i] = r[i] * cum_h[i]
                _risk_means(xs, r, s0g, gstart, xbar)
                _information(xs, rh, xbar, gev, inv_n, hess)
                stale = 0
            prev[:] = theta
            if _cd_newton(hess, gq, theta, lam, pf, inner_tol, max_sweeps) < 0:
                break
            for j in range(m):
                proposal[j] = theta[j] - prev[j]
            step = 1.0
            for _halving in range(31):
                _linear_predictor(xs, theta, eta)
                ll = _terms_s0(eta, status, gstart, gev, r, cum_h, cum_h2, s0g)
                new_obj = -ll * inv_n + lam * _penalty(theta, pf)
                if new_obj <= obj + 1e-13 * abs(obj):
                    break
                step *= 0.5
                for j in range(m):
                    theta[j] = prev[j] + step * proposal[j]
            change = 0.0
            for j in range(m):
                d = abs(theta[j] - prev[j])
                if d > change:
                    change = d
            if change < tol:
                converged = True
                break
        stale += 1
        out[l, :] = theta
        if not converged:
            return NOT_CONVERGED, l
    return OK, -1


@njit(cache=True, nogil=True)
def cox_score_at(xs, status, gstart, gev, theta):
    """Gradient of loglik/n with respect to standardized coefficients."""
    m, n = xs.shape
    eta = np.empty(n)
    r = np.empty(n)
    cum_h = np.empty(n)
    cum_h2 = np.empty(n)
    _linear_predictor(xs, theta, eta)
    cox_terms(eta, status, gstart, gev, r, cum_h, cum_h2)
    g = np.empty(n)
    for i in range(n):
        g[i] = status[i] - r[i] * cum_h[i]
    out = np.empty(m)
    for j in range(m):
        xj = xs[j]
        acc = 0.0
        for i in range(n):
            acc += xj[i] * g[i]
        out[j] = acc / n
    return out


@njit(cache=True, nogil=True)
def gaussian_lasso_path(xs, y, lambdas, pf, tol, max_sweeps, out):
    """Lasso path for (1/2n)||y - X theta||^2 + lam * sum(pf |theta|)."""
    m, n = xs.shape
    theta = np.zeros(m)
    w = np.ones(n)
    q = y.copy()
    v = np.empty(m)
    for j in range(m):
        acc = 0.0
        for i in range(n):
            acc += xs[j, i] * xs[j, i]
        v[j] = acc / n
    for l in range(lambdas.shape[0]):
        if cd_quadratic(xs, w, q, v, theta, lambdas[l], pf, tol, max_sweeps) < 0:
            out[l, :] = theta
            return NOT_CONVERGED, l
        out[l, :] = theta
    return OK, -1
