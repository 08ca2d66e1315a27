"""Pure numpy implementations of the numerical kernels.

Every function here has the same signature and semantics as its
counterpart in ``_core.pyx``; the compiled module is preferred when it
imports.
"""

import numpy as np


def _nb_site_loglik(eta, y, theta, log_theta):
    # y*eta - (y + theta) * log(exp(eta) + theta), terms constant in eta dropped
    return float(np.sum(y * eta - (y + theta) * np.logaddexp(eta, log_theta)))


def _poisson_site_loglik(eta, y):
    return float(np.sum(y * eta - np.exp(eta)))


def car_sweep(x, base, y, theta, poisson, tau, rho, indptr, indices, step, z,
              logu, accepted):
    """One Gauss-Seidel pass of single-site random-walk Metropolis updates.

    Parameters
    ----------
    x : ndarray, shape (n,)
        Current effect values, updated in place.
    base : ndarray, shape (n, m)
        Linear predictor with the effect removed; row ``i`` holds the
        ``m`` observations that share effect ``x[i]``.
    y : ndarray, shape (n, m)
        Counts laid out like ``base``.
    theta : float
        Negative binomial size. Ignored when ``poisson`` is true.
    poisson : int
        Nonzero selects the Poisson likelihood.
    tau : float
        Precision of the CAR prior.
    rho : float
        Spatial dependence. The conditional prior of ``x[i]`` is
        ``Normal(rho * mean(x[nbrs]), 1 / (tau * n_i))``; ``rho = 1`` is
        the intrinsic CAR.
    indptr, indices : ndarray
        CSR neighbour structure. Units with no neighbours get a
        ``Normal(0, 1/tau)`` prior.
    step : ndarray, shape (n,)
        Proposal standard deviations.
    z, logu : ndarray, shape (n,)
        Standard normal innovations and log-uniforms for the accept test.
    accepted : ndarray of int64, shape (n,)
        Incremented in place for every accepted proposal.
    """
    n = x.shape[0]
    log_theta = np.log(theta) if not poisson else 0.0
    for i in range(n):
        lo, hi = indptr[i], indptr[i + 1]
        nb = hi - lo
        if nb > 0:
            m = rho * x[indices[lo:hi]].sum() / nb
            prec = tau * nb
        else:
            m = 0.0
            prec = tau
        cur = x[i]
        prop = cur + step[i] * z[i]
        b = base[i]
        yi = y[i]
        if poisson:
            dl = _poisson_site_loglik(b + prop, yi) - _poisson_site_loglik(b + cur, yi)
        else:
            dl = (_nb_site_loglik(b + prop, yi, theta, log_theta)
                  - _nb_site_loglik(b + cur, yi, theta, log_theta))
        dl -= 0.5 * prec * ((prop - m) ** 2 - (cur - m) ** 2)
        if logu[i] < dl:
            x[i] = prop
            accepted[i] += 1


def proper_car_gibbs(rho, sigma2, indptr, indices, normals, burn_in):
    """Systematic-scan Gibbs sampler for a proper CAR field.

    Site ``i`` is drawn from ``Normal(rho * sum_{j~i} x_j, sigma2[i])``.
    Returns the empirical mean vector and covariance matrix of the sweeps
    after ``burn_in``.
    """
    n_sweeps, n = normals.shape
    x = np.zeros(n)
    sd = np.sqrt(sigma2)
    kept = np.empty((n_sweeps - burn_in, n))
    for t in range(n_sweeps):
        zt = normals[t]
        for i in range(n):
            s = x[indices[indptr[i]:indptr[i + 1]]].sum()
            x[i] = rho * s + sd[i] * zt[i]
        if t >= burn_in:
            kept[t - burn_in] = x
    mean = kept.mean(axis=0)
    dev = kept - mean
    cov = dev.T @ dev / kept.shape[0]
    return mean, cov


def moran_cross_products(zmat, indptr, indices):
    """Row-wise ``sum_i sum_{j~i} z_i z_j`` for a batch of value vectors.

    ``zmat`` has shape (r, n); returns shape (r,).
    """
    n = zmat.shape[1]
    counts = np.diff(indptr)
    rows = np.repeat(np.arange(n), counts)
    return np.einsum("ri,ri->r", zmat[:, rows], zmat[:, indices])


def ring_crossing_parity(px, py, rx, ry):
    """Even-odd crossing parity of a horizontal ray from each point.

    ``rx, ry`` describe a closed ring (first vertex repeated last).
    Returns a uint8 array with 1 for an odd number of crossings.
    """
    px = np.asarray(px, dtype=float)
    py = np.asarray(py, dtype=float)
    parity = np.zeros(px.shape[0], dtype=np.uint8)
    for k in range(rx.shape[0] - 1):
        x1, y1, x2, y2 = rx[k], ry[k], rx[k + 1], ry[k + 1]
        straddle = (y1 > py) != (y2 > py)
        if not straddle.any():
            continue
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = x1 + (py - y1) * (x2 - x1) / (y2 - y1)
        parity ^= (straddle & (px < xint)).astype(np.uint8)
    return parity


def ring_on_boundary(px, py, rx, ry, tol):
    """Flag points lying within ``tol`` of any segment of a closed ring."""
    px = np.asarray(px, dtype=float)
    py = np.asarray(py, dtype=float)
    hit = np.zeros(px.shape[0], dtype=bool)
    for k in range(rx.shape[0] - 1):
        x1, y1, x2, y2 = rx[k], ry[k], rx[k + 1], ry[k + 1]
        dx, dy = x2 - x1, y2 - y1
        len2 = dx * dx + dy * dy
        if len2 == 0.0:
            t = np.zeros_like(px)
        else:
            t = np.clip(((px - x1) * dx + (py - y1) * dy) / len2, 0.0, 1.0)
        ex = px - (x1 + t * dx)
        ey = py - (y1 + t * dy)
        hit |= ex * ex + ey * ey <= tol * tol
    return hit


def lasso_cd_gram(gram, c, b, lam, tol, max_sweeps, trace):
    """Cyclic coordinate descent for ``0.5 b'Gb - c'b + lam * |b|_1``.

    ``b`` is updated in place (warm start). After sweep ``k`` the
    objective is written to ``trace[k]``. Stops when the largest
    coordinate change times ``G_jj`` falls below ``tol``. Returns the
    number of sweeps performed.
    """
    p = b.shape[0]
    diag = np.diag(gram)
    for sweep in range(max_sweeps):
        dmax = 0.0
        for j in range(p):
            if diag[j] <= 0.0:
                continue
            rho = c[j] - gram[j] @ b + diag[j] * b[j]
            if rho > lam:
                new = (rho - lam) / diag[j]
            elif rho < -lam:
                new = (rho + lam) / diag[j]
            else:
                new = 0.0
            delta = new - b[j]
            if delta != 0.0:
                b[j] = new
                dmax = max(dmax, abs(delta) * diag[j])
        trace[sweep] = 0.5 * b @ gram @ b - c @ b + lam * np.abs(b).sum()
        if dmax < tol:
            return sweep + 1
    return max_sweeps
