"""Separable spatio-temporal CAR model for areal counts, fitted by MCMC.

The model for the count of region ``i`` in year ``t`` is::

    y_it ~ NegBin(mu_it, theta)        (or Poisson(mu_it))
    log mu_it = log offset_it + x_it' beta + s_i + gamma_t

with a conditional autoregressive prior on ``s`` (intrinsic by default)
and a first-order random walk or iid prior on ``gamma``. Sampling is
Metropolis-within-Gibbs: conjugate Gamma draws for the precisions,
single-site random-walk Metropolis for ``s`` and ``gamma``, a joint
adaptive random-walk step for ``beta`` and a log-scale random walk for
``theta``.
"""

from __future__ import annotations

import hashlib
import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Mapping, Optional, Sequence, Union

import numpy as np
from scipy import linalg, sparse
from scipy.special import gammaln

from .. import _kernels
from ..errors import ConvergenceWarning, InputError
from ..glm import PanelDataset, fit_nb_glm
from ..lattice import AdjacencyGraph
from .diagnostics import PosteriorSummary, dic, marginal_loglik_estimate, split_rhat

log = logging.getLogger(__name__)

RHAT_THRESHOLD = 1.1
SITE_TARGET = 0.44
BETA_TARGET = 0.23
ADAPT_BATCH = 50
MAX_BRIDGE_DRAWS = 4000


@dataclass(frozen=True)
class CarModelSpec:
    """Definition of one model variant.

    Parameters
    ----------
    likelihood : {"negative_binomial", "poisson"}
    include_spatial, include_temporal : bool
        Which random-effect blocks enter the linear predictor.
    covariate_names : sequence of str or None
        Fixed effects besides the intercept. ``None`` uses every
        covariate in the panel, an empty tuple fits the intercept only.
    use_offset : bool
        Enter ``log(offset)`` with coefficient one.
    spatial_prior : {"icar", "proper_car"}
        ``proper_car`` needs ``rho``; its conditional mean is ``rho``
        times the neighbour average.
    temporal_prior : {"rw1", "iid"}
    tau_spatial_prior, tau_temporal_prior, theta_prior : (shape, rate)
        Gamma hyperpriors.
    beta_prior_sd : float
        Standard deviation of the independent normal priors on ``beta``.
    baseline_region : str
        Region id, ``"lowest_risk"`` or ``"closest_to_average"``; used by
        :func:`relative_risk` in ``vs_baseline`` mode.
    """

    likelihood: str = "negative_binomial"
    include_spatial: bool = True
    include_temporal: bool = True
    covariate_names: Optional[tuple] = None
    use_offset: bool = True
    spatial_prior: str = "icar"
    rho: Optional[float] = None
    temporal_prior: str = "rw1"
    tau_spatial_prior: tuple = (1.0, 0.01)
    tau_temporal_prior: tuple = (1.0, 0.01)
    theta_prior: tuple = (2.0, 0.1)
    beta_prior_sd: float = 100.0
    baseline_region: str = "lowest_risk"

    def __post_init__(self):
        if self.likelihood not in ("negative_binomial", "poisson"):
            raise InputError(f"unknown likelihood {self.likelihood!r}")
        if self.spatial_prior not in ("icar", "proper_car"):
            raise InputError(f"unknown spatial prior {self.spatial_prior!r}")
        if self.temporal_prior not in ("rw1", "iid"):
            raise InputError(f"unknown temporal prior {self.temporal_prior!r}")
        if self.spatial_prior == "proper_car":
            if self.rho is None or not np.isfinite(self.rho):
                raise InputError("proper_car needs a finite rho")
        if self.covariate_names is not None:
            object.__setattr__(self, "covariate_names", tuple(self.covariate_names))
        for name in ("tau_spatial_prior", "tau_temporal_prior", "theta_prior"):
            a, b = getattr(self, name)
            if not (a > 0 and b > 0):
                raise InputError(f"{name} must have positive shape and rate")
            object.__setattr__(self, name, (float(a), float(b)))
        if not self.beta_prior_sd > 0:
            raise InputError("beta_prior_sd must be positive")

    @property
    def n_blocks(self) -> int:
        return 1 + int(self.include_spatial) + int(self.include_temporal)

    @property
    def effects_label(self) -> str:
        if self.include_spatial and self.include_temporal:
            return "Spatial & Temporal"
        if self.include_spatial:
            return "Spatial"
        if self.include_temporal:
            return "Temporal"
        return "Fixed"


@dataclass(frozen=True)
class McmcSettings:
    chains: int = 4
    burn_in: int = 5000
    draws: int = 10000
    thin: int = 1
    seed: int = 0
    threads: int = 1
    marginal_likelihood: bool = True

    def __post_init__(self):
        if self.chains < 1 or self.burn_in < 0 or self.draws < 1 or self.thin < 1:
            raise InputError("chains, draws and thin must be positive and burn_in non-negative")
        if self.draws // self.thin < 2:
            raise InputError("fewer than two retained draws per chain")


def _readonly(a):
    a = np.array(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class FitResult:
    """Posterior of a fitted :class:`CarModelSpec`.

    ``samples`` maps block names (``beta``, ``s``, ``gamma``, ``theta``,
    ``tau_spatial``, ``tau_temporal``, ``deviance``) to read-only arrays
    whose first axis runs over the pooled retained draws, chain by
    chain.
    """

    spec: CarModelSpec
    summaries: Mapping[str, PosteriorSummary]
    spatial_effects: Mapping[str, PosteriorSummary]
    temporal_effects: Mapping[int, PosteriorSummary]
    theta_summary: Optional[PosteriorSummary]
    hyper_summaries: Mapping[str, PosteriorSummary]
    dic: float
    dbar: float
    p_d: float
    negative_p_d: bool
    marginal_loglik_estimate: float
    marginal_loglik_mcse: float
    marginal_loglik_unstable: bool
    chains: int
    draws_per_chain: int
    rhat: Mapping[str, float]
    seed: int
    converged: bool
    region_ids: tuple
    years: tuple
    covariate_names: tuple
    acceptance: Mapping[str, float]
    data_signature: str
    samples: Mapping[str, np.ndarray] = field(repr=False, default_factory=dict)

    @property
    def n_draws(self) -> int:
        return self.chains * self.draws_per_chain


# --- model arrays ------------------------------------------------------------------

@dataclass
class _Problem:
    y: np.ndarray          # (n, T)
    y_t: np.ndarray        # (T, n)
    log_off: np.ndarray    # (n, T)
    X: np.ndarray          # (n, T, k) with intercept column first
    names: tuple
    poisson: bool
    s_csr: tuple
    g_csr: tuple
    q_s: Optional[sparse.csr_matrix]
    rank_s: int
    q_g: Optional[sparse.csr_matrix]
    rank_g: int
    rho: float
    center_s: bool
    center_g: bool
    lgamma_y1: float


def _data_signature(y, log_off):
    h = hashlib.sha1()
    h.update(np.asarray(y.shape, dtype=np.int64).tobytes())
    h.update(np.ascontiguousarray(y, dtype=float).tobytes())
    h.update(np.ascontiguousarray(log_off, dtype=float).tobytes())
    return h.hexdigest()


def _path_graph_csr(T):
    indptr = np.zeros(T + 1, dtype=np.intp)
    idx = []
    for t in range(T):
        nb = [u for u in (t - 1, t + 1) if 0 <= u < T]
        idx.extend(nb)
        indptr[t + 1] = indptr[t] + len(nb)
    return indptr, np.asarray(idx, dtype=np.intp)


def _empty_csr(n):
    return np.zeros(n + 1, dtype=np.intp), np.zeros(0, dtype=np.intp)


def _car_precision(w, rho):
    """``D - rho W`` with unit diagonal for units without neighbours."""
    deg = w.sum(axis=1)
    d = np.where(deg > 0, deg, 1.0)
    return sparse.csr_matrix(np.diag(d) - rho * w)


def _rho_bounds(w):
    deg = w.sum(axis=1)
    keep = deg > 0
    if not keep.any():
        return -np.inf, np.inf
    dm = 1.0 / np.sqrt(deg[keep])
    ev = np.linalg.eigvalsh(dm[:, None] * w[np.ix_(keep, keep)] * dm[None, :])
    return 1.0 / ev[0], 1.0 / ev[-1]


def _align(spec: CarModelSpec, data: PanelDataset, region_ids):
    """Panel arrays as region-by-year grids with rows in ``region_ids`` order."""
    if not data.region_ids:
        raise InputError("the panel must carry region ids to be matched to the graph")
    if set(data.region_ids) != set(region_ids):
        missing = sorted(set(region_ids) - set(data.region_ids))
        extra = sorted(set(data.region_ids) - set(region_ids))
        raise InputError(f"panel and graph regions differ (graph only: {missing[:5]}, panel only: {extra[:5]})")
    if not data.is_dense():
        raise InputError("the panel must contain every region-year combination exactly once")
    if spec.include_temporal and data.n_years < 2:
        raise InputError("a temporal effect needs at least two distinct years")
    names = data.covariate_names if spec.covariate_names is None else spec.covariate_names
    unknown = [c for c in names if c not in data.covariate_names]
    if unknown:
        raise InputError(f"covariates not in panel: {unknown}")
    sub = data.with_covariates(list(names)) if tuple(names) != data.covariate_names else data
    order = np.array([data.region_ids.index(r) for r in region_ids])
    y = sub.grid()[order]
    off = sub.grid(sub.offset)[order]
    log_off = np.log(off) if spec.use_offset else np.zeros_like(off)
    cols = [np.ones_like(y)] + [sub.grid(sub.covariates[:, k])[order] for k in range(sub.p)]
    X = np.ascontiguousarray(np.stack(cols, axis=-1))
    return sub, y, log_off, X, tuple(names)


def _build_problem(spec, data, graph):
    sub, y, log_off, X, names = _align(spec, data, graph.region_ids)
    n, T = y.shape
    w = graph.w.astype(float)
    rho = 1.0
    q_s, rank_s, center_s = None, 0, False
    if spec.include_spatial:
        if spec.spatial_prior == "icar":
            q_s = _car_precision(w, 1.0)
            n_comp = int(np.sum(np.bincount(graph.components()) > 1))
            rank_s = n - n_comp
            center_s = True
        else:
            lo, hi = _rho_bounds(w)
            if not lo < spec.rho < hi:
                raise InputError(f"rho = {spec.rho} outside the admissible interval ({lo:.4g}, {hi:.4g})")
            rho = float(spec.rho)
            q_s = _car_precision(w, rho)
            rank_s = n
    q_g, rank_g, center_g = None, 0, False
    g_csr = _empty_csr(T)
    if spec.include_temporal:
        if spec.temporal_prior == "rw1":
            g_csr = _path_graph_csr(T)
            path_w = np.zeros((T, T))
            path_w[np.arange(T - 1), np.arange(1, T)] = 1.0
            path_w = path_w + path_w.T
            q_g = sparse.csr_matrix(np.diag(path_w.sum(axis=1)) - path_w)
            rank_g = T - 1
            center_g = True
        else:
            q_g = sparse.identity(T, format="csr")
            rank_g = T
    indptr, indices = graph.csr
    return sub, _Problem(
        y=np.ascontiguousarray(y), y_t=np.ascontiguousarray(y.T), log_off=log_off, X=X,
        names=names, poisson=spec.likelihood == "poisson",
        s_csr=(np.asarray(indptr, dtype=np.intp), np.asarray(indices, dtype=np.intp)),
        g_csr=g_csr, q_s=q_s, rank_s=rank_s, q_g=q_g, rank_g=rank_g, rho=rho,
        center_s=center_s, center_g=center_g, lgamma_y1=float(gammaln(y + 1.0).sum()),
    )


def _loglik(prob: _Problem, eta, theta):
    """Full log-likelihood (all constants) for a linear predictor grid."""
    y = prob.y
    if prob.poisson:
        return float(np.sum(y * eta - np.exp(eta))) - prob.lgamma_y1
    lt = np.log(theta)
    return float(np.sum(gammaln(y + theta) + y * eta - (y + theta) * np.logaddexp(eta, lt))
                 + y.size * (theta * lt - gammaln(theta))) - prob.lgamma_y1


# --- sampler -----------------------------------------------------------------------

def _adapt(log_step, rate, target, batch):
    delta = min(0.5, 1.0 / np.sqrt(batch))
    return log_step + np.where(rate > target, delta, -delta)


def _chol_or_none(cov):
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        return None


def _level_shift(x, q, tau, b0, sd2, rng):
    """Gibbs draw of ``c`` in ``(x + c, b0 - c)``, which leaves the likelihood unchanged.

    Without a sum-to-zero constraint the intercept and the level of a
    random-effect block are only separated by their priors; this move
    samples along that ridge exactly.
    """
    q1 = np.asarray(q.sum(axis=0)).ravel()
    a = tau * q1.sum() + 1.0 / sd2
    b = b0 / sd2 - tau * float(q1 @ x)
    return b / a + rng.standard_normal() / np.sqrt(a)


def _run_chain(spec: CarModelSpec, prob: _Problem, mcmc: McmcSettings, init, seed_seq):
    rng = np.random.default_rng(seed_seq)
    n, T, k = prob.X.shape
    beta0, beta_cov0, theta0 = init
    beta = beta0 + rng.standard_normal(k) * np.sqrt(np.diag(beta_cov0))
    s = np.zeros(n)
    g = np.zeros(T)
    theta = float(np.exp(np.log(theta0) + 0.2 * rng.standard_normal())) if not prob.poisson else np.inf
    tau_s = tau_g = 1.0
    sd2 = spec.beta_prior_sd ** 2
    a_th, b_th = spec.theta_prior

    step_s = np.full(n, 0.3)
    step_g = np.full(T, 0.1)
    log_step_th = np.log(0.3)
    scale_b = 2.38 ** 2 / k
    chol_b = np.linalg.cholesky(scale_b * beta_cov0)
    diag_fallback = np.diag(np.diag(beta_cov0))
    log_lam = 0.0
    history = []

    acc_s = np.zeros(n, dtype=np.int64)
    acc_g = np.zeros(T, dtype=np.int64)
    acc_b = acc_th = 0
    tot_s = np.zeros(n, dtype=np.int64)
    tot_g = np.zeros(T, dtype=np.int64)
    tot_b = tot_th = 0

    n_keep = mcmc.draws // mcmc.thin
    out_beta = np.empty((n_keep, k))
    out_s = np.empty((n_keep, n))
    out_g = np.empty((n_keep, T))
    out_th = np.empty(n_keep)
    out_ts = np.empty(n_keep)
    out_tg = np.empty(n_keep)
    out_dev = np.empty(n_keep)

    lin = prob.X @ beta + prob.log_off
    total = mcmc.burn_in + mcmc.draws
    batch = 0
    keep = 0
    th_for_kernel = theta if not prob.poisson else 1.0
    for it in range(total):
        if spec.include_spatial:
            base = lin + g[None, :]
            z = rng.standard_normal(n)
            lu = np.log(rng.random(n))
            _kernels.car_sweep(s, base, prob.y, th_for_kernel, int(prob.poisson), tau_s, prob.rho,
                               prob.s_csr[0], prob.s_csr[1], step_s, z, lu, acc_s)
            tot_s += 1
            if prob.center_s:
                c = s.mean()
                s -= c
                beta[0] += c
                lin += c
            else:
                c = _level_shift(s, prob.q_s, tau_s, beta[0], sd2, rng)
                s += c
                beta[0] -= c
                lin -= c
        if spec.include_temporal:
            base_t = np.ascontiguousarray((lin + s[:, None]).T)
            z = rng.standard_normal(T)
            lu = np.log(rng.random(T))
            _kernels.car_sweep(g, base_t, prob.y_t, th_for_kernel, int(prob.poisson), tau_g, 1.0,
                               prob.g_csr[0], prob.g_csr[1], step_g, z, lu, acc_g)
            tot_g += 1
            if prob.center_g:
                c = g.mean()
                g -= c
                beta[0] += c
                lin += c
            else:
                c = _level_shift(g, prob.q_g, tau_g, beta[0], sd2, rng)
                g += c
                beta[0] -= c
                lin -= c

        eff = s[:, None] + g[None, :]
        ll = _loglik(prob, lin + eff, theta)

        # joint random-walk step for the fixed effects
        prop = beta + chol_b @ rng.standard_normal(k)
        lin_p = prob.X @ prop + prob.log_off
        ll_p = _loglik(prob, lin_p + eff, theta)
        dlp = -0.5 * (prop @ prop - beta @ beta) / sd2
        tot_b += 1
        if np.log(rng.random()) < ll_p - ll + dlp:
            beta, lin, ll = prop, lin_p, ll_p
            acc_b += 1

        if not prob.poisson:
            lt = np.log(theta)
            lt_p = lt + np.exp(log_step_th) * rng.standard_normal()
            th_p = float(np.exp(lt_p))
            ll_p = _loglik(prob, lin + eff, th_p)
            dlp = a_th * (lt_p - lt) - b_th * (th_p - theta)
            tot_th += 1
            if np.log(rng.random()) < ll_p - ll + dlp:
                theta, ll = th_p, ll_p
                th_for_kernel = theta
                acc_th += 1

        if spec.include_spatial:
            a, b = spec.tau_spatial_prior
            tau_s = rng.gamma(a + 0.5 * prob.rank_s, 1.0 / (b + 0.5 * float(s @ (prob.q_s @ s))))
        if spec.include_temporal:
            a, b = spec.tau_temporal_prior
            tau_g = rng.gamma(a + 0.5 * prob.rank_g, 1.0 / (b + 0.5 * float(g @ (prob.q_g @ g))))

        if it < mcmc.burn_in:
            history.append(beta.copy())
            if (it + 1) % ADAPT_BATCH == 0:
                batch += 1
                if spec.include_spatial:
                    step_s = np.exp(_adapt(np.log(step_s), acc_s / tot_s, SITE_TARGET, batch))
                if spec.include_temporal:
                    step_g = np.exp(_adapt(np.log(step_g), acc_g / tot_g, SITE_TARGET, batch))
                if not prob.poisson:
                    log_step_th = float(_adapt(log_step_th, acc_th / tot_th, SITE_TARGET, batch))
                log_lam = float(_adapt(log_lam, acc_b / tot_b, BETA_TARGET, batch))
                if len(history) >= 4 * ADAPT_BATCH:
                    recent = np.asarray(history[len(history) // 2:])
                    emp = np.atleast_2d(np.cov(recent, rowvar=False))
                    emp = emp + 1e-10 * np.eye(k)
                    chol = _chol_or_none(np.exp(log_lam) * scale_b * emp)
                    if chol is None:
                        # non-positive-definite empirical covariance: fall back to diagonal
                        chol = np.linalg.cholesky(np.exp(log_lam) * scale_b * diag_fallback)
                    chol_b = chol
                else:
                    chol_b = np.linalg.cholesky(np.exp(log_lam) * scale_b * beta_cov0)
                acc_s[:] = 0
                acc_g[:] = 0
                tot_s[:] = 0
                tot_g[:] = 0
                acc_b = tot_b = acc_th = tot_th = 0
            if it + 1 == mcmc.burn_in:
                acc_s[:] = 0
                acc_g[:] = 0
                tot_s[:] = 0
                tot_g[:] = 0
                acc_b = tot_b = acc_th = tot_th = 0
        elif (it - mcmc.burn_in + 1) % mcmc.thin == 0 and keep < n_keep:
            out_beta[keep] = beta
            out_s[keep] = s
            out_g[keep] = g
            out_th[keep] = theta
            out_ts[keep] = tau_s
            out_tg[keep] = tau_g
            out_dev[keep] = -2.0 * ll
            keep += 1

    def rate(a, t):
        t = np.sum(t)
        return float(np.sum(a) / t) if t else float("nan")

    acceptance = {"beta": rate(acc_b, tot_b), "theta": rate(acc_th, tot_th),
                  "s": rate(acc_s, tot_s), "gamma": rate(acc_g, tot_g)}
    return dict(beta=out_beta, s=out_s, gamma=out_g, theta=out_th, tau_spatial=out_ts,
                tau_temporal=out_tg, deviance=out_dev), acceptance


def _initial_values(spec, sub, prob):
    family = "poisson" if prob.poisson else "negative_binomial"
    glm = fit_nb_glm(sub, use_offset=spec.use_offset, family=family)
    cov = glm.covariance
    cov = 0.5 * (cov + cov.T)
    theta0 = min(glm.dispersion_theta, 1e3) if not prob.poisson else np.inf
    return glm.beta.copy(), cov, theta0


# --- evidence ----------------------------------------------------------------------

def _sum_zero_basis(n):
    """Orthonormal basis of the subspace orthogonal to the ones vector."""
    q, _ = np.linalg.qr(np.column_stack([np.ones(n), np.eye(n)[:, : n - 1]]))
    return q[:, 1:]


class _LogPosterior:
    """Log unnormalized posterior on the unconstrained scale used for bridging."""

    def __init__(self, spec: CarModelSpec, prob: _Problem):
        self.spec = spec
        self.prob = prob
        n, T, k = prob.X.shape
        self.k = k
        self.ok = True
        self.blocks = []
        if spec.include_spatial:
            V = _sum_zero_basis(n) if prob.center_s else np.eye(n)
            self.blocks.append(("s", V, self._prior_block(prob.q_s, V)))
        if spec.include_temporal:
            V = _sum_zero_basis(T) if prob.center_g else np.eye(T)
            self.blocks.append(("gamma", V, self._prior_block(prob.q_g, V)))

    def _prior_block(self, q, V):
        M = V.T @ (q.toarray() @ V)
        M = 0.5 * (M + M.T)
        ev = np.linalg.eigvalsh(M)
        if ev[0] <= 1e-10 * ev[-1]:
            # several disconnected components leave flat directions: no proper prior
            self.ok = False
            return M, 0.0
        return M, float(np.sum(np.log(ev)))

    def pack(self, samples):
        cols = [samples["beta"]]
        for name, V, _ in self.blocks:
            cols.append(samples[name] @ V)
        if not self.prob.poisson:
            cols.append(np.log(samples["theta"])[:, None])
        for name, _, _ in self.blocks:
            key = "tau_spatial" if name == "s" else "tau_temporal"
            cols.append(np.log(samples[key])[:, None])
        return np.column_stack(cols)

    def __call__(self, u):
        u = np.atleast_2d(u)
        prob, spec = self.prob, self.spec
        k = self.k
        pos = k
        beta = u[:, :k]
        out = (-0.5 * np.sum(beta ** 2, axis=1) / spec.beta_prior_sd ** 2
               - k * (np.log(spec.beta_prior_sd) + 0.5 * np.log(2 * np.pi)))
        n, T = prob.y.shape
        s = np.zeros((u.shape[0], n))
        g = np.zeros((u.shape[0], T))
        zs = []
        for name, V, _ in self.blocks:
            z = u[:, pos:pos + V.shape[1]]
            pos += V.shape[1]
            zs.append(z)
            if name == "s":
                s = z @ V.T
            else:
                g = z @ V.T
        if not prob.poisson:
            lth = u[:, pos]
            pos += 1
            a, b = spec.theta_prior
            theta = np.exp(lth)
            out = out + a * np.log(b) - gammaln(a) + a * lth - b * theta
        else:
            theta = np.full(u.shape[0], np.inf)
        for (name, V, (M, logdet)), z in zip(self.blocks, zs):
            lt = u[:, pos]
            pos += 1
            a, b = spec.tau_spatial_prior if name == "s" else spec.tau_temporal_prior
            tau = np.exp(lt)
            out = out + a * np.log(b) - gammaln(a) + a * lt - b * tau
            d = V.shape[1]
            quad = np.einsum("ij,jk,ik->i", z, M, z)
            out = out + 0.5 * d * (lt - np.log(2 * np.pi)) + 0.5 * logdet - 0.5 * tau * quad
        lin = prob.log_off[None] + np.einsum("ntk,mk->mnt", prob.X, beta) + s[:, :, None] + g[:, None, :]
        ll = np.empty(u.shape[0])
        for m in range(u.shape[0]):
            th = theta[m]
            ll[m] = _loglik(prob, lin[m], th) if np.isfinite(th) or prob.poisson else -np.inf
        return out + ll


def _thin_rows(a, max_rows):
    if a.shape[0] <= max_rows:
        return a
    return a[np.linspace(0, a.shape[0] - 1, max_rows).astype(int)]


# --- public API --------------------------------------------------------------------

def fit_car(spec: CarModelSpec, data: PanelDataset, graph: AdjacencyGraph,
            mcmc: Union[McmcSettings, Sequence] = McmcSettings()) -> FitResult:
    """Sample the posterior of a separable spatio-temporal count model.

    Parameters
    ----------
    spec : CarModelSpec
    data : PanelDataset
        Dense region-by-year panel whose region ids match ``graph``.
        Covariates are used as given (prepare them beforehand).
    graph : AdjacencyGraph
    mcmc : McmcSettings or tuple
        ``(chains, burn_in, draws, thin, seed)`` is accepted as well.
        Chains use independent streams spawned from ``seed`` and may run
        on ``mcmc.threads`` threads without changing the result.

    Returns
    -------
    FitResult
        ``converged`` is false, with a :class:`ConvergenceWarning`, when
        split R-hat exceeds 1.1 for any fixed effect.
    """
    if not isinstance(mcmc, McmcSettings):
        mcmc = McmcSettings(*mcmc)
    sub, prob = _build_problem(spec, data, graph)
    init = _initial_values(spec, sub, prob)
    seeds = np.random.SeedSequence(mcmc.seed).spawn(mcmc.chains + 1)

    def run(c):
        return _run_chain(spec, prob, mcmc, init, seeds[c])

    if mcmc.threads > 1 and mcmc.chains > 1:
        with ThreadPoolExecutor(max_workers=min(mcmc.threads, mcmc.chains)) as pool:
            results = list(pool.map(run, range(mcmc.chains)))
    else:
        results = [run(c) for c in range(mcmc.chains)]

    per_chain = {key: np.stack([r[0][key] for r in results]) for key in results[0][0]}
    pooled = {key: v.reshape((-1,) + v.shape[2:]) for key, v in per_chain.items()}
    acceptance = {}
    for key in results[0][1]:
        rates = np.array([r[1][key] for r in results])
        acceptance[key] = float(rates.mean()) if np.all(np.isfinite(rates)) else float("nan")

    names = ("Intercept",) + prob.names
    summaries = {nm: PosteriorSummary.from_draws(pooled["beta"][:, j]) for j, nm in enumerate(names)}
    rhat = {nm: split_rhat(per_chain["beta"][:, :, j]) for j, nm in enumerate(names)}
    hyper = {}
    theta_summary = None
    if not prob.poisson:
        theta_summary = PosteriorSummary.from_draws(pooled["theta"])
        rhat["theta"] = split_rhat(per_chain["theta"])
    spatial, temporal = {}, {}
    if spec.include_spatial:
        hyper["tau_spatial"] = PosteriorSummary.from_draws(pooled["tau_spatial"])
        rhat["tau_spatial"] = split_rhat(per_chain["tau_spatial"])
        for i, rid in enumerate(graph.region_ids):
            spatial[rid] = PosteriorSummary.from_draws(pooled["s"][:, i])
            rhat[f"s[{rid}]"] = split_rhat(per_chain["s"][:, :, i])
    if spec.include_temporal:
        hyper["tau_temporal"] = PosteriorSummary.from_draws(pooled["tau_temporal"])
        rhat["tau_temporal"] = split_rhat(per_chain["tau_temporal"])
        for t, yr in enumerate(sub.years):
            temporal[yr] = PosteriorSummary.from_draws(pooled["gamma"][:, t])
            rhat[f"gamma[{yr}]"] = split_rhat(per_chain["gamma"][:, :, t])

    bad = [nm for nm in names if not rhat[nm] <= RHAT_THRESHOLD]
    converged = not bad
    if bad:
        warnings.warn(f"R-hat above {RHAT_THRESHOLD} for {bad}; treat the fit as unconverged",
                      ConvergenceWarning)

    beta_bar = pooled["beta"].mean(axis=0)
    eta_bar = (prob.X @ beta_bar + prob.log_off + pooled["s"].mean(axis=0)[:, None]
               + pooled["gamma"].mean(axis=0)[None, :])
    theta_bar = float(pooled["theta"].mean()) if not prob.poisson else np.inf
    dres = dic(pooled["deviance"], -2.0 * _loglik(prob, eta_bar, theta_bar))

    mll, mcse, unstable = float("nan"), float("nan"), True
    if mcmc.marginal_likelihood:
        lp = _LogPosterior(spec, prob)
        if lp.ok:
            packed = _thin_rows(lp.pack(pooled), MAX_BRIDGE_DRAWS)
            est = marginal_loglik_estimate(packed, lp, seed=seeds[-1])
            mll, mcse, unstable = est.log_evidence, est.mcse, est.unstable
        else:
            log.warning("spatial prior is improper beyond the sum-to-zero constraint; "
                        "marginal likelihood not estimated")

    frozen = {key: _readonly(v) for key, v in pooled.items()}
    return FitResult(
        spec=spec, summaries=MappingProxyType(summaries),
        spatial_effects=MappingProxyType(spatial), temporal_effects=MappingProxyType(temporal),
        theta_summary=theta_summary, hyper_summaries=MappingProxyType(hyper),
        dic=dres.dic, dbar=dres.dbar, p_d=dres.p_d, negative_p_d=dres.negative_p_d,
        marginal_loglik_estimate=mll, marginal_loglik_mcse=mcse, marginal_loglik_unstable=unstable,
        chains=mcmc.chains, draws_per_chain=mcmc.draws // mcmc.thin, rhat=MappingProxyType(rhat),
        seed=mcmc.seed, converged=converged, region_ids=tuple(graph.region_ids),
        years=tuple(sub.years), covariate_names=prob.names,
        acceptance=MappingProxyType(acceptance),
        data_signature=_data_signature(prob.y, prob.log_off), samples=MappingProxyType(frozen),
    )


def compare_models(fits: Sequence[FitResult]) -> list:
    """Rank fits by ascending DIC.

    Ties go to the higher marginal log-likelihood (a missing estimate
    counts as lowest), then to the model with fewer effect blocks.
    """
    fits = list(fits)
    if not fits:
        raise InputError("no fits to compare")
    sig = fits[0].data_signature
    if any(f.data_signature != sig for f in fits):
        raise InputError("fits were made on different data and cannot be compared")

    def key(f):
        mll = f.marginal_loglik_estimate
        return (f.dic, -mll if np.isfinite(mll) else np.inf, f.spec.n_blocks)

    return sorted(fits, key=key)


def car_joint_covariance_check(graph: AdjacencyGraph, rho: float, conditional_variances,
                               n_sweeps: int = 200_000, burn_in: int = 1000, seed=0) -> float:
    """Check that a proper CAR conditional specification has the implied joint.

    Runs a Gibbs sampler in which site ``i`` is drawn from
    ``Normal(rho * sum_{j~i} x_j, sigma2[i])`` and compares the empirical
    covariance with ``(I - rho W)^{-1} diag(sigma2)``.

    Returns
    -------
    float
        Maximum absolute deviation between the two matrices.

    Raises
    ------
    InputError
        For more than 8 regions, ``I - rho W`` not positive definite, or
        ``sigma2`` violating ``w_ij sigma2_j == w_ji sigma2_i``.
    """
    w = graph.w.astype(float)
    n = w.shape[0]
    if n > 8:
        raise InputError("the covariance check is limited to graphs with at most 8 regions")
    sigma2 = np.asarray(conditional_variances, dtype=float)
    if sigma2.shape != (n,) or np.any(sigma2 <= 0):
        raise InputError("need one positive conditional variance per region")
    b = np.eye(n) - rho * w
    if np.linalg.eigvalsh(b)[0] <= 0:
        raise InputError(f"I - rho W is not positive definite for rho = {rho}")
    if not np.allclose(w * sigma2[None, :], w.T * sigma2[:, None], rtol=1e-12, atol=0):
        raise InputError("conditional variances violate the symmetry condition")
    target = linalg.solve(b, np.diag(sigma2))
    rng = np.random.default_rng(seed)
    normals = rng.standard_normal((n_sweeps + burn_in, n))
    indptr, indices = graph.csr
    _, cov = _kernels.proper_car_gibbs(float(rho), sigma2, np.asarray(indptr, dtype=np.intp),
                                       np.asarray(indices, dtype=np.intp), normals, burn_in)
    return float(np.max(np.abs(cov - target)))
