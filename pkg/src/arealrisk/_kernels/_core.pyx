# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled numerical kernels. See ``_fallback.py`` for the reference
semantics of each function."""

import numpy as np
cimport cython
from libc.math cimport exp, log, log1p, sqrt


cdef inline double _logaddexp(double a, double b) noexcept nogil:
    if a > b:
        return a + log1p(exp(b - a))
    return b + log1p(exp(a - b))


cdef double _site_loglik(const double[:, ::1] base, const double[:, ::1] y,
                         Py_ssize_t i, double v, double theta,
                         double log_theta, int poisson) noexcept nogil:
    cdef Py_ssize_t j, m = base.shape[1]
    cdef double acc = 0.0, eta, yy
    if poisson:
        for j in range(m):
            eta = base[i, j] + v
            acc += y[i, j] * eta - exp(eta)
    else:
        for j in range(m):
            eta = base[i, j] + v
            yy = y[i, j]
            acc += yy * eta - (yy + theta) * _logaddexp(eta, log_theta)
    return acc


def car_sweep(double[::1] x, const double[:, ::1] base, const double[:, ::1] y,
              double theta, int poisson, double tau, double rho,
              const Py_ssize_t[::1] indptr, const Py_ssize_t[::1] indices,
              const double[::1] step, const double[::1] z,
              const double[::1] logu, long long[::1] accepted):
    cdef Py_ssize_t n = x.shape[0], i, k, lo, hi, nb
    cdef double log_theta = 0.0, m, prec, cur, prop, dl, s
    if not poisson:
        log_theta = log(theta)
    with nogil:
        for i in range(n):
            lo = indptr[i]
            hi = indptr[i + 1]
            nb = hi - lo
            if nb > 0:
                s = 0.0
                for k in range(lo, hi):
                    s += x[indices[k]]
                m = rho * s / nb
                prec = tau * nb
            else:
                m = 0.0
                prec = tau
            cur = x[i]
            prop = cur + step[i] * z[i]
            dl = (_site_loglik(base, y, i, prop, theta, log_theta, poisson)
                  - _site_loglik(base, y, i, cur, theta, log_theta, poisson))
            dl -= 0.5 * prec * ((prop - m) * (prop - m) - (cur - m) * (cur - m))
            if logu[i] < dl:
                x[i] = prop
                accepted[i] += 1


def proper_car_gibbs(double rho, const double[::1] sigma2,
                     const Py_ssize_t[::1] indptr, const Py_ssize_t[::1] indices,
                     const double[:, ::1] normals, Py_ssize_t burn_in):
    cdef Py_ssize_t n_sweeps = normals.shape[0], n = normals.shape[1]
    cdef Py_ssize_t t, i, j, k
    cdef double s
    cdef double[::1] x = np.zeros(n)
    cdef double[::1] sd = np.sqrt(np.asarray(sigma2))
    cdef double[::1] acc1 = np.zeros(n)
    cdef double[:, ::1] acc2 = np.zeros((n, n))
    cdef Py_ssize_t kept = n_sweeps - burn_in
    with nogil:
        for t in range(n_sweeps):
            for i in range(n):
                s = 0.0
                for k in range(indptr[i], indptr[i + 1]):
                    s += x[indices[k]]
                x[i] = rho * s + sd[i] * normals[t, i]
            if t >= burn_in:
                for i in range(n):
                    acc1[i] += x[i]
                    for j in range(n):
                        acc2[i, j] += x[i] * x[j]
    mean = np.asarray(acc1) / kept
    cov = np.asarray(acc2) / kept - np.outer(mean, mean)
    return mean, cov


def moran_cross_products(const double[:, ::1] zmat,
                         const Py_ssize_t[::1] indptr,
                         const Py_ssize_t[::1] indices):
    cdef Py_ssize_t r = zmat.shape[0], n = zmat.shape[1], a, i, k
    cdef double acc, zi
    out = np.empty(r)
    cdef double[::1] o = out
    with nogil:
        for a in range(r):
            acc = 0.0
            for i in range(n):
                zi = zmat[a, i]
                for k in range(indptr[i], indptr[i + 1]):
                    acc += zi * zmat[a, indices[k]]
            o[a] = acc
    return out


def ring_crossing_parity(const double[::1] px, const double[::1] py,
                         const double[::1] rx, const double[::1] ry):
    cdef Py_ssize_t n = px.shape[0], m = rx.shape[0], p, k
    cdef double x1, y1, x2, y2, xint
    out = np.zeros(n, dtype=np.uint8)
    cdef unsigned char[::1] o = out
    with nogil:
        for p in range(n):
            for k in range(m - 1):
                x1 = rx[k]
                y1 = ry[k]
                x2 = rx[k + 1]
                y2 = ry[k + 1]
                if (y1 > py[p]) != (y2 > py[p]):
                    xint = x1 + (py[p] - y1) * (x2 - x1) / (y2 - y1)
                    if px[p] < xint:
                        o[p] ^= 1
    return out


def ring_on_boundary(const double[::1] px, const double[::1] py,
                     const double[::1] rx, const double[::1] ry, double tol):
    cdef Py_ssize_t n = px.shape[0], m = rx.shape[0], p, k
    cdef double x1, y1, dx, dy, len2, t, ex, ey, tol2 = tol * tol
    out = np.zeros(n, dtype=bool)
    cdef unsigned char[::1] o = out.view(np.uint8)
    with nogil:
        for p in range(n):
            for k in range(m - 1):
                x1 = rx[k]
                y1 = ry[k]
                dx = rx[k + 1] - x1
                dy = ry[k + 1] - y1
                len2 = dx * dx + dy * dy
                if len2 == 0.0:
                    t = 0.0
                else:
                    t = ((px[p] - x1) * dx + (py[p] - y1) * dy) / len2
                    if t < 0.0:
                        t = 0.0
                    elif t > 1.0:
                        t = 1.0
                ex = px[p] - (x1 + t * dx)
                ey = py[p] - (y1 + t * dy)
                if ex * ex + ey * ey <= tol2:
                    o[p] = 1
                    break
    return out


def lasso_cd_gram(const double[:, ::1] gram, const double[::1] c, double[::1] b,
                  double lam, double tol, Py_ssize_t max_sweeps, double[::1] trace):
    cdef Py_ssize_t p = b.shape[0], sweep, j, k, done = max_sweeps
    cdef double rho, new, delta, dmax, d, obj, gb
    with nogil:
        for sweep in range(max_sweeps):
            dmax = 0.0
            for j in range(p):
                d = gram[j, j]
                if d <= 0.0:
                    continue
                rho = c[j]
                for k in range(p):
                    rho -= gram[j, k] * b[k]
                rho += d * b[j]
                if rho > lam:
                    new = (rho - lam) / d
                elif rho < -lam:
                    new = (rho + lam) / d
                else:
                    new = 0.0
                delta = new - b[j]
                if delta != 0.0:
                    b[j] = new
                    if delta < 0.0:
                        delta = -delta
                    if delta * d > dmax:
                        dmax = delta * d
            obj = 0.0
            for j in range(p):
                gb = 0.0
                for k in range(p):
                    gb += gram[j, k] * b[k]
                obj += 0.5 * b[j] * gb - c[j] * b[j] + lam * (b[j] if b[j] >= 0.0 else -b[j])
            trace[sweep] = obj
            if dmax < tol:
                done = sweep + 1
                break
    return done
