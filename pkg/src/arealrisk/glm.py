"""Negative binomial regression and NB-LASSO covariate selection.

The NB2 parameterisation is used throughout: ``Var(y) = mu + mu^2/theta``
with ``theta`` the size (dispersion) parameter, so ``theta -> inf`` gives
the Poisson model. The mean is ``log mu = b0 + X b + log(offset)``.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy.special import digamma, gammaln, polygamma

from . import _io, _kernels
from .errors import ConvergenceWarning, InputError, SingularDesignError

log = logging.getLogger(__name__)

THETA_MIN = 1e-3
THETA_MAX = 1e6


# --- data ---------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PanelDataset:
    """Region-by-year table of counts, offsets and covariates.

    One row per observed ``(region, year)`` pair. ``region_index`` and
    ``year_index`` index into ``region_ids`` and ``years``.
    """

    region_index: np.ndarray
    year_index: np.ndarray
    counts: np.ndarray
    offset: np.ndarray
    covariates: np.ndarray
    covariate_names: tuple
    region_ids: tuple = ()
    years: tuple = ()
    transform_log: tuple = ()
    log_shift: tuple = ()
    standardized: bool = False
    center: tuple = ()
    scale: tuple = ()

    def __post_init__(self):
        ri = np.asarray(self.region_index, dtype=np.int64)
        yi = np.asarray(self.year_index, dtype=np.int64)
        y = np.asarray(self.counts, dtype=float)
        off = np.asarray(self.offset, dtype=float)
        x = np.asarray(self.covariates, dtype=float)
        n = y.shape[0]
        if x.ndim == 1:
            x = x.reshape(n, -1) if n else x.reshape(0, len(self.covariate_names))
        names = tuple(str(c) for c in self.covariate_names)
        if not (ri.shape == yi.shape == off.shape == (n,)):
            raise InputError("panel columns have inconsistent lengths")
        if x.shape != (n, len(names)):
            raise InputError(f"covariate matrix shape {x.shape} does not match "
                             f"{n} rows x {len(names)} names")
        if np.any(y < 0) or np.any(y != np.round(y)):
            raise InputError("counts must be non-negative integers")
        if np.any(~(off > 0)):
            raise InputError("offsets must be positive")
        if not np.all(np.isfinite(x)):
            raise InputError("covariates contain non-finite values")
        keys = ri * (int(yi.max(initial=0)) + 1) + yi
        if np.unique(keys).shape[0] != n:
            raise InputError("(region, year) pairs are not unique")
        flags = tuple(bool(f) for f in self.transform_log) or (False,) * len(names)
        if len(flags) != len(names):
            raise InputError("transform_log must have one flag per covariate")
        region_ids = tuple(str(r) for r in self.region_ids) or tuple(
            str(k) for k in range(int(ri.max(initial=-1)) + 1))
        years = tuple(int(t) for t in self.years) or tuple(range(int(yi.max(initial=-1)) + 1))
        for arr in (ri, yi, y, off, x):
            arr.setflags(write=False)
        for k, v in (("region_index", ri), ("year_index", yi), ("counts", y), ("offset", off),
                     ("covariates", x), ("covariate_names", names), ("transform_log", flags),
                     ("region_ids", region_ids), ("years", years)):
            object.__setattr__(self, k, v)

    @property
    def n_rows(self) -> int:
        return self.counts.shape[0]

    @property
    def p(self) -> int:
        return len(self.covariate_names)

    @property
    def n_regions(self) -> int:
        return len(self.region_ids)

    @property
    def n_years(self) -> int:
        return len(self.years)

    def subset(self, rows) -> "PanelDataset":
        rows = np.asarray(rows)
        return replace(self, region_index=self.region_index[rows], year_index=self.year_index[rows],
                       counts=self.counts[rows], offset=self.offset[rows],
                       covariates=self.covariates[rows])

    def with_covariates(self, names: Sequence[str]) -> "PanelDataset":
        """Keep only the named covariates, in the given order."""
        idx = []
        for nm in names:
            if nm not in self.covariate_names:
                raise InputError(f"unknown covariate {nm!r}")
            idx.append(self.covariate_names.index(nm))

        def pick(t):
            return tuple(t[k] for k in idx) if t else ()

        return replace(self, covariates=self.covariates[:, idx], covariate_names=tuple(names),
                       transform_log=pick(self.transform_log), log_shift=pick(self.log_shift),
                       center=pick(self.center), scale=pick(self.scale))

    def is_dense(self) -> bool:
        return self.n_rows == self.n_regions * self.n_years

    def grid(self, values=None) -> np.ndarray:
        """Arrange a per-row vector (default: counts) as a regions x years matrix."""
        v = self.counts if values is None else np.asarray(values)
        out = np.full((self.n_regions, self.n_years), np.nan)
        out[self.region_index, self.year_index] = v
        return out


def read_panel_csv(path, log_covariates: Sequence[str] = (), region_ids=None) -> PanelDataset:
    """Read ``region_id, year, count, offset, <covariates...>``."""
    header, numbered = _io.read_csv_numbered(path)
    required = ["region_id", "year", "count", "offset"]
    if header[:4] != required:
        raise InputError(f"{path}: panel must start with columns {','.join(required)}")
    names = tuple(header[4:])
    unknown = set(log_covariates) - set(names)
    if unknown:
        raise InputError(f"{path}: log-transform requested for unknown covariates {sorted(unknown)}")
    rid, yr, cnt, off, cov = [], [], [], [], []
    for line, row in numbered:
        if len(row) != len(header):
            raise InputError(f"{path}:{line}: expected {len(header)} fields, got {len(row)}")
        try:
            rid.append(row[0])
            yr.append(int(row[1]))
            cnt.append(float(row[2]))
            off.append(float(row[3]))
            cov.append([float(v) for v in row[4:]])
        except ValueError as exc:
            raise InputError(f"{path}:{line}: {exc}") from exc
    ids = tuple(region_ids) if region_ids is not None else tuple(sorted(set(rid)))
    pos = {r: k for k, r in enumerate(ids)}
    missing = sorted(set(rid) - set(pos))
    if missing:
        raise InputError(f"{path}: region ids not in region set: {missing}")
    years = tuple(sorted(set(yr)))
    ypos = {t: k for k, t in enumerate(years)}
    return PanelDataset(
        region_index=[pos[r] for r in rid], year_index=[ypos[t] for t in yr],
        counts=cnt, offset=off, covariates=np.array(cov, dtype=float).reshape(len(cnt), len(names)),
        covariate_names=names, region_ids=ids, years=years,
        transform_log=tuple(nm in set(log_covariates) for nm in names))


def panel_rows(data: PanelDataset):
    header = ["region_id", "year", "count", "offset", *data.covariate_names]
    rows = []
    for k in range(data.n_rows):
        rows.append([data.region_ids[data.region_index[k]], data.years[data.year_index[k]],
                     int(data.counts[k]), float(data.offset[k]), *map(float, data.covariates[k])])
    return header, rows


def write_panel_csv(data: PanelDataset, path, metadata=None) -> None:
    header, rows = panel_rows(data)
    _io.write_csv(path, header, rows, metadata)


# --- covariate preparation --------------------------------------------------------

def prepare_covariates(raw: PanelDataset, log_shift: float = 1.0,
                       proportion_shift: float = 1e-4) -> PanelDataset:
    """Log-transform flagged covariates, then standardise every column.

    Integer-valued (count) columns use ``log(x + log_shift)``. Real-valued
    columns use ``log(x + proportion_shift)`` when they contain zeros and
    ``log(x)`` otherwise. The shift, mean and sd of every column are kept
    so coefficients and values can be mapped back.
    """
    if log_shift < 0 or proportion_shift < 0:
        raise InputError("log shifts must be non-negative")
    x = np.array(raw.covariates, dtype=float)
    shifts = []
    for j, name in enumerate(raw.covariate_names):
        if not raw.transform_log[j]:
            shifts.append(0.0)
            continue
        col = x[:, j]
        if np.any(col < 0):
            raise InputError(f"covariate {name!r} has negative values but is flagged for log transform")
        if np.all(col == np.round(col)):
            shift = log_shift
        else:
            shift = proportion_shift if np.any(col == 0) else 0.0
        if np.any(col + shift <= 0):
            raise InputError(f"covariate {name!r} has zeros; a positive log shift is required")
        shifts.append(shift)
        x[:, j] = np.log(col + shift)
    center = x.mean(axis=0)
    scale = x.std(axis=0)
    flat = [nm for nm, s in zip(raw.covariate_names, scale) if not s > 0]
    if flat:
        raise InputError(f"covariates with zero variance cannot be standardised: {flat}")
    z = (x - center) / scale
    return replace(raw, covariates=z, log_shift=tuple(shifts), standardized=True,
                   center=tuple(center.tolist()), scale=tuple(scale.tolist()))


def back_transform(prepared: PanelDataset) -> np.ndarray:
    """Invert :func:`prepare_covariates` to recover the raw covariates."""
    if not prepared.standardized:
        return np.array(prepared.covariates)
    x = prepared.covariates * np.asarray(prepared.scale) + np.asarray(prepared.center)
    for j, flag in enumerate(prepared.transform_log):
        if flag:
            x[:, j] = np.exp(x[:, j]) - prepared.log_shift[j]
    return x


def unstandardize_coefficients(intercept, coefs, center, scale):
    """Map coefficients on standardised columns to the unstandardised scale."""
    coefs = np.asarray(coefs, dtype=float)
    center = np.asarray(center, dtype=float)
    scale = np.asarray(scale, dtype=float)
    b = coefs / scale
    return float(intercept - b @ center), b


# --- likelihood pieces ----------------------------------------------------------

def _design(data: PanelDataset):
    return np.column_stack([np.ones(data.n_rows), data.covariates])


def _log_offset(data: PanelDataset, use_offset: bool):
    return np.log(data.offset) if use_offset else np.zeros(data.n_rows)


def nb_loglik_terms(y, mu, theta):
    """Per-observation NB2 log probability mass."""
    y = np.asarray(y, dtype=float)
    mu = np.asarray(mu, dtype=float)
    if not np.isfinite(theta):
        return poisson_loglik_terms(y, mu)
    log_t_mu = np.logaddexp(np.log(theta), np.log(mu))
    return (gammaln(y + theta) - gammaln(theta) - gammaln(y + 1.0)
            + theta * (np.log(theta) - log_t_mu) + y * (np.log(mu) - log_t_mu))


def poisson_loglik_terms(y, mu):
    y = np.asarray(y, dtype=float)
    mu = np.asarray(mu, dtype=float)
    return y * np.log(mu) - mu - gammaln(y + 1.0)


def nb_loglik(beta, X, y, theta, log_offset=None) -> float:
    """NB2 log-likelihood of coefficients ``beta`` for design ``X``."""
    eta = X @ beta + (0.0 if log_offset is None else log_offset)
    return float(nb_loglik_terms(y, np.exp(eta), theta).sum())


def nb_score(beta, X, y, theta, log_offset=None) -> np.ndarray:
    """Gradient of :func:`nb_loglik` with respect to ``beta``."""
    eta = X @ beta + (0.0 if log_offset is None else log_offset)
    mu = np.exp(eta)
    if not np.isfinite(theta):
        return X.T @ (y - mu)
    return X.T @ ((y - mu) * theta / (theta + mu))


def nb_deviance_terms(y, mu, theta):
    """Unit deviances ``2 * (l_saturated - l)`` for fixed ``theta``."""
    y = np.asarray(y, dtype=float)
    mu = np.asarray(mu, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        ylog = np.where(y > 0, y * np.log(y / mu), 0.0)
    if not np.isfinite(theta):
        return 2.0 * (ylog - (y - mu))
    return 2.0 * (ylog - (y + theta) * np.log((y + theta) / (mu + theta)))


def poisson_deviance_terms(y, mu):
    return nb_deviance_terms(y, mu, np.inf)


def _theta_profile_derivs(y, mu, theta):
    d1 = (digamma(y + theta) - digamma(theta) + np.log(theta) + 1.0
          - np.log(theta + mu) - (y + theta) / (theta + mu)).sum()
    d2 = (polygamma(1, y + theta) - polygamma(1, theta) + 1.0 / theta
          - 2.0 / (theta + mu) + (y + theta) / (theta + mu) ** 2).sum()
    return float(d1), float(d2)


def estimate_theta(y, mu, theta0=1.0, max_iter=50, tol=1e-10):
    """Maximise the NB log-likelihood in ``theta`` for fixed means.

    Newton iterations on ``log theta``, clamped to
    ``[THETA_MIN, THETA_MAX]``.
    """
    u = np.log(np.clip(theta0, THETA_MIN, THETA_MAX))
    lo, hi = np.log(THETA_MIN), np.log(THETA_MAX)
    for _ in range(max_iter):
        th = np.exp(u)
        d1, d2 = _theta_profile_derivs(y, mu, th)
        g = th * d1
        h = th * th * d2 + th * d1
        step = -g / h if h < 0 else np.sign(g) * 1.0
        step = float(np.clip(step, -2.0, 2.0))
        u_new = float(np.clip(u + step, lo, hi))
        if abs(u_new - u) < tol:
            u = u_new
            break
        u = u_new
    return float(np.exp(u))


def _moment_theta(y, mu):
    num = float((mu ** 2).sum())
    den = float(((y - mu) ** 2 - mu).sum())
    if den <= 0:
        return THETA_MAX
    return float(np.clip(num / den, THETA_MIN, THETA_MAX))


# --- GLM fitting -----------------------------------------------------------------

@dataclass(frozen=True)
class NbFit:
    intercept: float
    coefficients: np.ndarray
    dispersion_theta: float
    log_likelihood: float
    converged: bool
    iterations: int
    covariate_names: tuple = ()
    family: str = "negative_binomial"
    quasi_poisson: bool = False
    deviance: float = float("nan")
    covariance: Optional[np.ndarray] = field(default=None, repr=False)
    fitted: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def beta(self) -> np.ndarray:
        return np.concatenate([[self.intercept], self.coefficients])

    @property
    def standard_errors(self) -> np.ndarray:
        return np.sqrt(np.diag(self.covariance))


def _check_rank(X, names):
    if np.linalg.matrix_rank(X) == X.shape[1]:
        return
    for k in range(1, X.shape[1] + 1):
        if np.linalg.matrix_rank(X[:, :k]) < k:
            raise SingularDesignError(names[k - 1])
    raise SingularDesignError(names[-1])


def _irls(X, y, log_off, beta, theta, max_iter=50, tol=1e-10):
    """IRLS for the mean parameters with ``theta`` held fixed."""
    dev_old = np.inf
    for it in range(max_iter):
        eta = X @ beta + log_off
        mu = np.exp(eta)
        w = mu if not np.isfinite(theta) else mu * theta / (theta + mu)
        z = eta - log_off + (y - mu) / mu
        sw = np.sqrt(w)
        beta_new, *_ = np.linalg.lstsq(X * sw[:, None], z * sw, rcond=None)
        mu_new = np.exp(X @ beta_new + log_off)
        dev = float(nb_deviance_terms(y, mu_new, theta).sum())
        # step halving guards against overshoot in early iterations
        halvings = 0
        while (not np.isfinite(dev) or dev > dev_old + 1e-9 * abs(dev_old)) and halvings < 30:
            beta_new = 0.5 * (beta_new + beta)
            mu_new = np.exp(X @ beta_new + log_off)
            dev = float(nb_deviance_terms(y, mu_new, theta).sum())
            halvings += 1
        beta = beta_new
        if abs(dev - dev_old) <= tol * (abs(dev) + 0.1):
            return beta, it + 1
        dev_old = dev
    return beta, max_iter


def _fit_arrays(X, y, log_off, names, family="negative_binomial", theta=None,
                max_iter=100, tol=1e-8):
    if y.sum() == 0:
        raise InputError("response is identically zero; the log-linear model is degenerate")
    _check_rank(X, names)
    mu0 = (y + y.mean()) / 2.0
    beta, *_ = np.linalg.lstsq(X, np.log(mu0) - log_off, rcond=None)
    poisson = family == "poisson"
    fixed_theta = theta is not None or poisson
    th = np.inf if poisson else (float(theta) if theta is not None else None)
    if th is None:
        beta, _ = _irls(X, y, log_off, beta, np.inf)
        th = _moment_theta(y, np.exp(X @ beta + log_off))
    ll_old = -np.inf
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        beta_old = beta
        beta, _ = _irls(X, y, log_off, beta, th)
        mu = np.exp(X @ beta + log_off)
        if not fixed_theta:
            th = estimate_theta(y, mu, th)
        ll = float(nb_loglik_terms(y, mu, th).sum())
        step = float(np.max(np.abs(beta - beta_old)))
        if fixed_theta or (abs(ll - ll_old) < tol * abs(ll) and step < 1e-7):
            converged = True
            break
        ll_old = ll
    quasi = False
    if not fixed_theta and th >= THETA_MAX * (1 - 1e-9):
        # dispersion ran to the cap: report the Poisson-limit fit
        quasi = True
        beta, _ = _irls(X, y, log_off, beta, np.inf)
        th = THETA_MAX
    mu = np.exp(X @ beta + log_off)
    w = mu if not np.isfinite(th) else mu * th / (th + mu)
    cov = np.linalg.inv(X.T @ (X * w[:, None]))
    ll = float(nb_loglik_terms(y, mu, th).sum())
    if not converged:
        warnings.warn(f"NB GLM did not converge in {max_iter} iterations", ConvergenceWarning)
    return NbFit(
        intercept=float(beta[0]), coefficients=np.array(beta[1:]),
        dispersion_theta=float(th), log_likelihood=ll, converged=converged, iterations=it,
        covariate_names=tuple(names[1:]), family=family, quasi_poisson=quasi,
        deviance=float(nb_deviance_terms(y, mu, th).sum()), covariance=cov, fitted=mu,
    )


def fit_nb_glm(data: PanelDataset, use_offset: bool = True, theta: Optional[float] = None,
               family: str = "negative_binomial", max_iter: int = 100, tol: float = 1e-8) -> NbFit:
    """Maximum likelihood NB (or Poisson) log-linear regression.

    IRLS for the coefficients alternates with Newton updates of
    ``theta`` until the relative log-likelihood change drops below
    ``tol``. Pass ``theta`` to hold the dispersion fixed, or
    ``family="poisson"``. If ``theta`` runs to the upper cap the Poisson
    fit is returned with ``quasi_poisson=True``.
    """
    if family not in ("negative_binomial", "poisson"):
        raise InputError(f"unknown family {family!r}")
    if data.n_rows < data.p + 2:
        raise InputError(f"need at least {data.p + 2} rows for {data.p} covariates")
    X = _design(data)
    names = ("(Intercept)",) + data.covariate_names
    return _fit_arrays(X, data.counts.astype(float), _log_offset(data, use_offset), names,
                       family, theta, max_iter, tol)


# --- LASSO -----------------------------------------------------------------------

@dataclass(frozen=True)
class LassoPath:
    lambdas: np.ndarray
    intercepts: np.ndarray
    coefficients_per_lambda: np.ndarray
    thetas: np.ndarray
    covariate_names: tuple
    x_center: np.ndarray
    x_scale: np.ndarray
    lambda_max: float
    cv_mean_deviance: Optional[np.ndarray] = None
    cv_se_deviance: Optional[np.ndarray] = None
    lambda_min: Optional[float] = None
    lambda_1se: Optional[float] = None
    folds: Optional[np.ndarray] = field(default=None, repr=False)
    objective_traces: tuple = field(default=(), repr=False)

    def original_scale(self):
        """Intercepts and slopes mapped back to the unstandardised design."""
        b = self.coefficients_per_lambda / self.x_scale
        b0 = self.intercepts - b @ self.x_center
        return b0, b

    def index_of(self, lam) -> int:
        return int(np.argmin(np.abs(self.lambdas - lam)))


def _penalized_objective(X, y, log_off, b0, b, theta, lam):
    mu = np.exp(b0 + X @ b + log_off)
    return float(nb_loglik_terms(y, mu, theta).sum()) / y.shape[0] - lam * float(np.abs(b).sum())


def _solve_lambda(X, y, log_off, b0, b, theta, lam, max_outer=100, tol=1e-9, max_sweeps=10000):
    """Proximal Newton (IRLS + coordinate descent) for one penalty value."""
    n = y.shape[0]
    f_old = _penalized_objective(X, y, log_off, b0, b, theta, lam)
    trace = [f_old]
    sweep_trace = np.empty(max_sweeps)
    for _ in range(max_outer):
        eta = b0 + X @ b + log_off
        mu = np.exp(eta)
        w = mu * theta / (theta + mu)
        z = eta - log_off + (y - mu) / mu
        sw = w.sum()
        xbar = (w @ X) / sw
        zbar = float(w @ z) / sw
        Xc = X - xbar
        gram = np.ascontiguousarray((Xc * w[:, None]).T @ Xc / n)
        c = np.ascontiguousarray(Xc.T @ (w * (z - zbar)) / n)
        b_new = np.array(b, dtype=float)
        nsw = _kernels.lasso_cd_gram(gram, c, b_new, lam, 1e-13, max_sweeps, sweep_trace)
        if nsw > 1 and np.any(np.diff(sweep_trace[:nsw]) > 1e-12 * (1 + np.abs(sweep_trace[:nsw - 1]))):
            raise AssertionError("coordinate descent surrogate objective increased")
        b0_new = zbar - float(xbar @ b_new)
        db0, db = b0_new - b0, b_new - b
        t = 1.0
        f_new = _penalized_objective(X, y, log_off, b0 + db0, b + db, theta, lam)
        while f_new < f_old - 1e-14 * abs(f_old) and t > 1e-10:
            t *= 0.5
            f_new = _penalized_objective(X, y, log_off, b0 + t * db0, b + t * db, theta, lam)
        if f_new < f_old - 1e-14 * abs(f_old):
            break
        b0, b = b0 + t * db0, b + t * db
        trace.append(f_new)
        change = max(abs(t * db0), float(np.max(np.abs(t * db), initial=0.0)))
        f_prev, f_old = f_old, f_new
        if change < tol or abs(f_new - f_prev) < 1e-15 * abs(f_prev):
            break
    return b0, b, trace


def _lambda_max(X, y, log_off, b0, theta):
    mu = np.exp(b0 + log_off)
    g = X.T @ ((y - mu) * theta / (theta + mu)) / y.shape[0]
    # relative pad so the first grid point zeroes every slope despite rounding
    return float(np.max(np.abs(g))) * (1.0 + 1e-9)


def _intercept_only(y, log_off):
    fit = _fit_arrays(np.ones((y.shape[0], 1)), y, log_off, ("(Intercept)",))
    return fit.intercept, fit.dispersion_theta


def _standardize(X):
    center = X.mean(axis=0)
    scale = X.std(axis=0)
    if np.any(~(scale > 0)):
        raise InputError("LASSO design has a zero-variance covariate")
    return (X - center) / scale, center, scale


def _path_arrays(Xs, y, log_off, lambdas, b0, theta):
    p = Xs.shape[1]
    b = np.zeros(p)
    intercepts, coefs, thetas, traces = [], [], [], []
    for lam in lambdas:
        b0, b, tr = _solve_lambda(Xs, y, log_off, b0, b, theta, lam)
        mu = np.exp(b0 + Xs @ b + log_off)
        theta = estimate_theta(y, mu, theta)
        b0, b, tr2 = _solve_lambda(Xs, y, log_off, b0, b, theta, lam)
        intercepts.append(b0)
        coefs.append(b.copy())
        thetas.append(theta)
        traces.append((tuple(tr), tuple(tr2)))
    return np.array(intercepts), np.array(coefs).reshape(len(lambdas), p), np.array(thetas), traces


def default_lambdas(lambda_max, n_lambda=100, ratio=1e-3):
    return lambda_max * np.logspace(0.0, np.log10(ratio), n_lambda)


def lasso_nb_path(data: PanelDataset, lambdas=None, n_lambda: int = 100,
                  lambda_min_ratio: float = 1e-3, use_offset: bool = True) -> LassoPath:
    """NB-LASSO regularisation path.

    Covariates are standardised internally and the intercept is never
    penalised. The objective at penalty ``lam`` is
    ``loglik / n - lam * sum |b_j|``. Without explicit ``lambdas`` the
    grid runs log-spaced from the smallest penalty that zeroes every
    slope down to ``lambda_min_ratio`` times it. ``theta`` is
    re-estimated once per penalty on the current fit.
    """
    y = data.counts.astype(float)
    if y.sum() == 0:
        raise InputError("response is identically zero")
    log_off = _log_offset(data, use_offset)
    Xs, center, scale = _standardize(np.asarray(data.covariates, dtype=float))
    b0, theta = _intercept_only(y, log_off)
    lmax = _lambda_max(Xs, y, log_off, b0, theta)
    if lambdas is None:
        lambdas = default_lambdas(lmax, n_lambda, lambda_min_ratio)
    lambdas = np.asarray(lambdas, dtype=float)
    if lambdas.ndim != 1 or lambdas.size == 0 or np.any(lambdas < 0) or np.any(np.diff(lambdas) >= 0):
        raise InputError("lambdas must be a non-empty strictly decreasing sequence of non-negative values")
    intercepts, coefs, thetas, traces = _path_arrays(Xs, y, log_off, lambdas, b0, theta)
    return LassoPath(lambdas=lambdas, intercepts=intercepts, coefficients_per_lambda=coefs,
                     thetas=thetas, covariate_names=data.covariate_names, x_center=center,
                     x_scale=scale, lambda_max=lmax, objective_traces=tuple(traces))


def assign_folds(region_index, folds: int, seed) -> np.ndarray:
    """Fold label per row, dealing each region's shuffled rows round-robin.

    Regions are visited in a seeded random order and the deal continues
    across regions, so folds stay balanced and every region with at least
    two rows appears in more than one fold.
    """
    region_index = np.asarray(region_index)
    n = region_index.shape[0]
    if not 3 <= folds <= n:
        raise InputError(f"folds must be in [3, {n}]")
    rng = np.random.default_rng(seed)
    labels = np.empty(n, dtype=np.int64)
    regions = np.unique(region_index)
    order = rng.permutation(regions)
    k = int(rng.integers(folds))
    for r in order:
        rows = rng.permutation(np.flatnonzero(region_index == r))
        for row in rows:
            labels[row] = k
            k = (k + 1) % folds
    return labels


def lambda_min_rule(lambdas, cv_mean):
    return float(np.asarray(lambdas)[int(np.nanargmin(cv_mean))])


def lambda_one_se_rule(lambdas, cv_mean, cv_se):
    """Largest penalty whose mean CV loss is within one SE of the minimum."""
    lambdas = np.asarray(lambdas, dtype=float)
    cv_mean = np.asarray(cv_mean, dtype=float)
    cv_se = np.asarray(cv_se, dtype=float)
    k = int(np.nanargmin(cv_mean))
    threshold = cv_mean[k] + cv_se[k]
    ok = np.flatnonzero(cv_mean <= threshold)
    return float(lambdas[ok].max())


def cv_select_lambda(data: PanelDataset, folds: int = 10, seed=0, rule: str = "one_se",
                     lambdas=None, n_lambda: int = 100, lambda_min_ratio: float = 1e-3,
                     use_offset: bool = True):
    """K-fold cross-validated penalty choice.

    The loss is the held-out deviance ``-2 * loglik`` per observation,
    evaluated with each fold's own ``theta`` at that penalty (comparable
    across penalties, unlike the saturated-model deviance whose reference
    moves with ``theta``).

    Returns ``(selected_lambda, path)``; ``path`` is the full-data path
    with CV curves, ``lambda_min`` and ``lambda_1se`` filled in.
    """
    if rule not in ("min", "one_se"):
        raise InputError(f"unknown rule {rule!r}")
    full = lasso_nb_path(data, lambdas, n_lambda, lambda_min_ratio, use_offset)
    labels = assign_folds(data.region_index, folds, seed)
    y = data.counts.astype(float)
    log_off = _log_offset(data, use_offset)
    X = np.asarray(data.covariates, dtype=float)
    per_fold = []
    for k in range(folds):
        test = labels == k
        train = ~test
        if np.ptp(y[train]) == 0 or np.ptp(y[test]) == 0 or np.any(X[train].std(axis=0) == 0):
            warnings.warn(f"fold {k} has no response variation; skipped", RuntimeWarning)
            continue
        Xs, center, scale = _standardize(X[train])
        b0, theta = _intercept_only(y[train], log_off[train])
        ints, coefs, thetas, _ = _path_arrays(Xs, y[train], log_off[train], full.lambdas, b0, theta)
        Xt = (X[test] - center) / scale
        dev = []
        for a in range(full.lambdas.size):
            mu = np.exp(ints[a] + Xt @ coefs[a] + log_off[test])
            dev.append(-2.0 * float(nb_loglik_terms(y[test], mu, thetas[a]).mean()))
        per_fold.append(dev)
    if not per_fold:
        raise InputError("every cross-validation fold is degenerate")
    dev = np.array(per_fold)
    mean = dev.mean(axis=0)
    se = dev.std(axis=0, ddof=1) / np.sqrt(dev.shape[0]) if dev.shape[0] > 1 else np.zeros_like(mean)
    lmin = lambda_min_rule(full.lambdas, mean)
    l1se = lambda_one_se_rule(full.lambdas, mean, se)
    path = replace(full, cv_mean_deviance=mean, cv_se_deviance=se, lambda_min=lmin,
                   lambda_1se=l1se, folds=labels)
    return (l1se if rule == "one_se" else lmin), path


def select_features(path: LassoPath, rule: str = "one_se", scale: str = "original"):
    """Nonzero coefficients at the chosen penalty as ``(Variable, Coefficient)`` rows.

    The intercept comes first. ``scale="original"`` reports coefficients
    for the unstandardised (possibly log-transformed) covariates;
    ``scale="standardized"`` reports them per standard deviation.
    """
    if path.lambda_min is None:
        raise InputError("path has no cross-validation curves")
    lam = path.lambda_1se if rule == "one_se" else path.lambda_min
    k = path.index_of(lam)
    if scale == "original":
        b0s, bs = path.original_scale()
        b0, b = b0s[k], bs[k]
    elif scale == "standardized":
        b0, b = path.intercepts[k], path.coefficients_per_lambda[k]
    else:
        raise InputError(f"unknown scale {scale!r}")
    rows = [("Intercept", float(b0))]
    for name, coef in zip(path.covariate_names, b):
        if coef != 0.0:
            rows.append((name, float(coef)))
    return rows
