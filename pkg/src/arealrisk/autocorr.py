"""Global and local Moran's I on binary contiguity graphs.

The statistic is

    I = (N / W0) * sum_ij w_ij z_i z_j / sum_i z_i^2,   z = x - mean(x)

with W0 the sum of all weights. Writing it with a sample variance S^2
and a leading n/(n-1) factor gives the same value; the (n-1) terms
cancel.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.stats import norm

from . import _kernels
from .errors import InputError, UndefinedStatisticError
from .lattice import AdjacencyGraph


@dataclass(frozen=True)
class MoranResult:
    statistic: float
    expected: float
    variance: float
    z_score: float
    p_value_analytic: float
    n_regions: int
    p_value_permutation: Optional[float] = None
    n_permutations: Optional[int] = None
    alternative: str = "greater"


def _centered(values, graph):
    x = np.asarray(values, dtype=float)
    if x.ndim != 1 or x.shape[0] != graph.n:
        raise InputError(f"values length {x.shape} does not match graph with {graph.n} regions")
    if graph.n < 2:
        raise InputError("Moran's I needs at least 2 regions")
    if not np.all(np.isfinite(x)):
        raise InputError("values contain non-finite entries")
    if np.ptp(x) == 0:
        raise UndefinedStatisticError("Moran's I is undefined for a constant vector")
    if graph.w_total == 0:
        raise UndefinedStatisticError("Moran's I is undefined for a graph without edges")
    z = x - x.mean()
    return z


def _cross(z, graph):
    indptr, indices = graph.csr
    return float(_kernels.moran_cross_products(np.ascontiguousarray(z[None, :]), indptr, indices)[0])


def morans_i_global(values, graph: AdjacencyGraph) -> float:
    """Global Moran's I of ``values`` over ``graph``."""
    z = _centered(values, graph)
    return graph.n / graph.w_total * _cross(z, graph) / float(z @ z)


def _randomization_moments(z, graph):
    n = graph.n
    if n < 4:
        raise UndefinedStatisticError("the randomization variance needs at least 4 regions")
    s0 = float(graph.w_total)
    w = graph.w.astype(float)
    s1 = 0.5 * float(((w + w.T) ** 2).sum())
    s2 = float(((w.sum(axis=1) + w.sum(axis=0)) ** 2).sum())
    m2 = float(z @ z)
    b2 = n * float((z ** 4).sum()) / m2 ** 2
    ei = -1.0 / (n - 1)
    num = (n * ((n * n - 3 * n + 3) * s1 - n * s2 + 3 * s0 ** 2)
           - b2 * ((n * n - n) * s1 - 2 * n * s2 + 6 * s0 ** 2))
    ei2 = num / ((n - 1) * (n - 2) * (n - 3) * s0 ** 2)
    return ei, ei2 - ei ** 2


def _p_normal(zscore, alternative):
    if alternative == "greater":
        return float(norm.sf(zscore))
    if alternative == "less":
        return float(norm.cdf(zscore))
    if alternative == "two-sided":
        return float(min(1.0, 2.0 * norm.sf(abs(zscore))))
    raise InputError(f"unknown alternative {alternative!r}")


def morans_z_test(values, graph: AdjacencyGraph, alternative: str = "greater") -> MoranResult:
    """Moran's I with a z-score under the randomization assumption.

    ``alternative="greater"`` (default) tests for clustering with the
    upper-tail normal probability; ``"two-sided"`` and ``"less"`` are
    available.
    """
    z = _centered(values, graph)
    stat = graph.n / graph.w_total * _cross(z, graph) / float(z @ z)
    ei, var = _randomization_moments(z, graph)
    zs = (stat - ei) / np.sqrt(var) if var > 0 else np.nan
    return MoranResult(
        statistic=stat,
        expected=ei,
        variance=var,
        z_score=float(zs),
        p_value_analytic=_p_normal(zs, alternative) if np.isfinite(zs) else np.nan,
        n_regions=graph.n,
        alternative=alternative,
    )


def permutation_statistics(values, graph: AdjacencyGraph, n_permutations: int, seed) -> np.ndarray:
    """Moran's I for ``n_permutations`` random relabellings of ``values``.

    Replicate ``k`` draws its permutation from a generator spawned from
    ``(seed, k)``, so results do not depend on batching or threading.
    """
    z = _centered(values, graph)
    children = np.random.SeedSequence(seed).spawn(n_permutations)
    perms = np.empty((n_permutations, graph.n), dtype=np.intp)
    for k, ss in enumerate(children):
        perms[k] = np.random.default_rng(ss).permutation(graph.n)
    zmat = np.ascontiguousarray(z[perms])
    indptr, indices = graph.csr
    cross = _kernels.moran_cross_products(zmat, indptr, indices)
    return graph.n / graph.w_total * cross / float(z @ z)


def permutation_p_value(observed, permuted, alternative="greater", expected=0.0):
    """``(1 + #{as or more extreme}) / (R + 1)``."""
    permuted = np.asarray(permuted, dtype=float)
    eps = 1e-12 * max(1.0, abs(observed))
    if alternative == "greater":
        hits = np.count_nonzero(permuted >= observed - eps)
    elif alternative == "less":
        hits = np.count_nonzero(permuted <= observed + eps)
    elif alternative == "two-sided":
        hits = np.count_nonzero(np.abs(permuted - expected) >= abs(observed - expected) - eps)
    else:
        raise InputError(f"unknown alternative {alternative!r}")
    return (1.0 + hits) / (permuted.shape[0] + 1.0)


def morans_permutation_test(values, graph: AdjacencyGraph, n_permutations: int = 999,
                            seed=0, alternative: str = "greater") -> MoranResult:
    """Analytic z-test plus a Monte Carlo permutation p-value."""
    if n_permutations < 99:
        raise InputError("n_permutations must be at least 99")
    base = morans_z_test(values, graph, alternative)
    perm = permutation_statistics(values, graph, n_permutations, seed)
    p = permutation_p_value(base.statistic, perm, alternative, base.expected)
    return MoranResult(
        statistic=base.statistic,
        expected=base.expected,
        variance=base.variance,
        z_score=base.z_score,
        p_value_analytic=base.p_value_analytic,
        n_regions=base.n_regions,
        p_value_permutation=p,
        n_permutations=n_permutations,
        alternative=alternative,
    )


def morans_i_local(values, graph: AdjacencyGraph) -> np.ndarray:
    """Local Moran's I per region.

    ``I_i = N / sum_k z_k^2 * z_i * sum_j w_ij z_j``; the local values sum
    to ``global I * W0``.
    """
    z = _centered(values, graph)
    lag = graph.w.astype(float) @ z
    return graph.n / float(z @ z) * z * lag
