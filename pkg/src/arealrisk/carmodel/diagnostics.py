"""Posterior summaries, convergence diagnostics, DIC and evidence estimates."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import stats
from scipy.special import logsumexp

from ..errors import ConvergenceWarning, InputError

KLD_BINS = 50
MODE_GRID = 256
MODE_SUBSAMPLE = 2000


@dataclass(frozen=True)
class PosteriorSummary:
    """Marginal summary of one scalar quantity.

    ``kld`` is the Kullback-Leibler divergence from a moment-matched
    Gaussian to the histogram of the draws, a measure of how far the
    marginal is from normal. ``mode`` is the peak of a Gaussian kernel
    density estimate.
    """

    mean: float
    sd: float
    q2_5: float
    median: float
    q97_5: float
    mode: float
    kld: float

    def __post_init__(self):
        if not self.sd >= 0:
            raise InputError(f"sd must be non-negative, got {self.sd}")
        if not self.q2_5 <= self.median <= self.q97_5:
            raise InputError("quantiles must satisfy q2_5 <= median <= q97_5")
        if not self.kld >= 0:
            raise InputError(f"kld must be non-negative, got {self.kld}")

    @classmethod
    def from_draws(cls, draws) -> "PosteriorSummary":
        x = np.asarray(draws, dtype=float).ravel()
        if x.size == 0 or not np.all(np.isfinite(x)):
            raise InputError("summaries need a non-empty set of finite draws")
        q = np.quantile(x, [0.025, 0.5, 0.975])
        return cls(mean=float(x.mean()), sd=float(x.std(ddof=1)) if x.size > 1 else 0.0,
                   q2_5=float(q[0]), median=float(q[1]), q97_5=float(q[2]),
                   mode=posterior_mode(x), kld=gaussian_kld(x))

    def as_row(self):
        return [self.mean, self.sd, self.q2_5, self.median, self.q97_5, self.mode, self.kld]


SUMMARY_COLUMNS = ("Mean", "SD", "2.5% Quant", "Median", "97.5% Quant", "Mode", "KLD")


def gaussian_kld(draws, bins: int = KLD_BINS) -> float:
    """KL divergence of the draws' histogram from its moment-matched Gaussian.

    Computed as ``sum_k p_k log(p_k / q_k)`` over histogram bins, where
    ``q_k`` is the Gaussian probability of bin ``k``. Zero for
    degenerate (constant) draws.
    """
    x = np.asarray(draws, dtype=float).ravel()
    sd = x.std()
    if x.size < 2 or sd == 0 or not np.isfinite(sd):
        return 0.0
    counts, edges = np.histogram(x, bins=bins)
    p = counts / counts.sum()
    cdf = stats.norm.cdf(edges, loc=x.mean(), scale=sd)
    q = np.diff(cdf)
    # renormalize to the histogram support so both are distributions on the same bins
    q = q / q.sum()
    keep = p > 0
    with np.errstate(divide="ignore"):
        kl = float(np.sum(p[keep] * (np.log(p[keep]) - np.log(np.maximum(q[keep], 1e-300)))))
    return max(kl, 0.0)


def posterior_mode(draws) -> float:
    x = np.asarray(draws, dtype=float).ravel()
    if x.size < 3 or x.std() == 0:
        return float(np.median(x))
    if x.size > MODE_SUBSAMPLE:
        # evenly spaced sub-sample keeps the estimate deterministic
        x = np.sort(x)[np.linspace(0, x.size - 1, MODE_SUBSAMPLE).astype(int)]
    kde = stats.gaussian_kde(x)
    grid = np.linspace(x.min(), x.max(), MODE_GRID)
    return float(grid[np.argmax(kde(grid))])


def split_rhat(chains) -> float:
    """Split-chain potential scale reduction factor.

    Parameters
    ----------
    chains : array_like, shape (n_chains, n_draws)

    Returns
    -------
    float
        1.0 for a parameter that is constant across all draws.
    """
    x = np.asarray(chains, dtype=float)
    if x.ndim != 2 or x.shape[1] < 4:
        raise InputError("split R-hat needs a (chains, draws) array with at least 4 draws")
    half = x.shape[1] // 2
    parts = np.concatenate([x[:, :half], x[:, x.shape[1] - half:]], axis=0)
    n = parts.shape[1]
    means = parts.mean(axis=1)
    w = parts.var(axis=1, ddof=1).mean()
    b = n * means.var(ddof=1)
    if w == 0:
        return 1.0 if b == 0 else float("inf")
    var_plus = (n - 1) / n * w + b / n
    return float(np.sqrt(var_plus / w))


@dataclass(frozen=True)
class DicResult:
    dic: float
    dbar: float
    p_d: float
    negative_p_d: bool


def dic(deviance_trace, deviance_at_mean: float) -> DicResult:
    """Deviance information criterion from a posterior deviance trace.

    ``dbar`` is the mean of the trace and ``p_d = dbar - deviance_at_mean``.
    A negative ``p_d`` is flagged and warned about rather than rejected.
    """
    d = np.asarray(deviance_trace, dtype=float).ravel()
    if d.size < 100:
        raise InputError(f"DIC needs at least 100 posterior draws, got {d.size}")
    dbar = float(d.mean())
    p_d = dbar - float(deviance_at_mean)
    neg = p_d < 0
    if neg:
        warnings.warn(f"negative effective number of parameters (p_d = {p_d:.3g})", ConvergenceWarning)
    return DicResult(dic=dbar + p_d, dbar=dbar, p_d=p_d, negative_p_d=neg)


@dataclass(frozen=True)
class EvidenceEstimate:
    log_evidence: float
    mcse: float
    unstable: bool
    iterations: int


MIN_BRIDGE_DRAWS = 200
MAX_BRIDGE_MCSE = 0.5


def marginal_loglik_estimate(draws, log_posterior: Callable[[np.ndarray], np.ndarray],
                             seed=0, max_iter: int = 1000, tol: float = 1e-10) -> EvidenceEstimate:
    """Bridge-sampling estimate of the log marginal likelihood.

    A Gaussian is fitted to the first half of the posterior draws and
    used as the bridge proposal; the second half enters the iterative
    bridge estimator along with an equal number of proposal draws.

    Parameters
    ----------
    draws : ndarray, shape (n_draws, dim)
        Posterior draws on an unconstrained scale.
    log_posterior : callable
        Maps an (m, dim) array to the m log unnormalized posterior
        densities, on the same scale as ``draws`` (Jacobians included).
    seed : int or SeedSequence
        Seed for the proposal draws.

    Returns
    -------
    EvidenceEstimate
        The estimate, an approximate Monte Carlo standard error on the
        log scale, and an ``unstable`` flag raised for fewer than 200
        draws or an MCSE above 0.5.
    """
    u = np.asarray(draws, dtype=float)
    if u.ndim == 1:
        u = u[:, None]
    n, dim = u.shape
    if n < 4:
        raise InputError("bridge sampling needs at least 4 posterior draws")
    fit_part, est_part = u[: n // 2], u[n // 2:]
    mean = fit_part.mean(axis=0)
    cov = np.atleast_2d(np.cov(fit_part, rowvar=False))
    cov = cov + 1e-10 * np.eye(dim) * max(1.0, float(np.trace(cov)) / dim)
    proposal = stats.multivariate_normal(mean=mean, cov=cov, allow_singular=False)
    rng = np.random.default_rng(seed)
    n1 = est_part.shape[0]
    n2 = n1
    g_draws = rng.multivariate_normal(mean, cov, size=n2, method="cholesky")

    l1 = np.asarray(log_posterior(est_part), dtype=float) - proposal.logpdf(est_part).reshape(n1)
    l2 = np.asarray(log_posterior(g_draws), dtype=float) - proposal.logpdf(g_draws).reshape(n2)
    if not np.all(np.isfinite(l1)):
        raise InputError("log posterior is not finite at some posterior draws")
    l2 = np.where(np.isfinite(l2), l2, -np.inf)
    s1 = n1 / (n1 + n2)
    s2 = n2 / (n1 + n2)
    shift = float(np.median(l1))
    a1, a2 = l1 - shift, l2 - shift
    log_r = 0.0
    it = 0
    for it in range(1, max_iter + 1):
        num = logsumexp(a2 - np.logaddexp(np.log(s1) + a2, np.log(s2) + log_r)) - np.log(n2)
        den = logsumexp(-np.logaddexp(np.log(s1) + a1, np.log(s2) + log_r)) - np.log(n1)
        new = num - den
        if abs(new - log_r) < tol:
            log_r = new
            break
        log_r = new

    # relative mean squared error, ignoring autocorrelation in the posterior draws
    f1 = np.exp(a2 - log_r - np.logaddexp(np.log(s1) + a2 - log_r, np.log(s2)))
    f2 = np.exp(-np.logaddexp(np.log(s1) + a1 - log_r, np.log(s2)))
    re2 = 0.0
    if f1.mean() > 0:
        re2 += f1.var() / (n2 * f1.mean() ** 2)
    if f2.mean() > 0:
        re2 += f2.var() / (n1 * f2.mean() ** 2)
    mcse = float(np.sqrt(re2))
    unstable = bool(n < MIN_BRIDGE_DRAWS or not np.isfinite(mcse) or mcse > MAX_BRIDGE_MCSE)
    return EvidenceEstimate(log_evidence=float(log_r + shift), mcse=mcse, unstable=unstable,
                            iterations=it)
