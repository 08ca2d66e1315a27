"""Relative-risk surfaces from a fitted CAR model."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..errors import InputError
from ..glm import PanelDataset
from .model import FitResult, _align, _data_signature

MAX_SKIPPED_FRACTION = 0.01
# rates below this are treated as numerically zero when used as a denominator
RATE_FLOOR = 1e-300
CHUNK = 2000


@dataclass(frozen=True)
class RelativeRisk:
    """Posterior summaries of relative risk on the region-by-year grid.

    ``mean``, ``sd``, ``q2_5``, ``median`` and ``q97_5`` have shape
    ``(n_regions, n_years)``. ``region_mean`` and ``region_sd`` summarize
    the per-draw average over years of each region's relative risk.
    """

    mode: str
    region_ids: tuple
    years: tuple
    mean: np.ndarray
    sd: np.ndarray
    q2_5: np.ndarray
    median: np.ndarray
    q97_5: np.ndarray
    region_mean: np.ndarray
    region_sd: np.ndarray
    baseline: Optional[str]
    reference_rate: Optional[float]
    skipped_draws: int
    n_draws: int


def _choose_baseline(fit: FitResult, y, rate_mean, rule):
    ids = fit.region_ids
    if rule == "lowest_risk":
        return int(np.argmin(rate_mean.mean(axis=1)))
    if rule == "closest_to_average":
        totals = y.sum(axis=1)
        gap = np.abs(totals - totals.mean())
        best = np.flatnonzero(gap == gap.min())
        # ties resolved by the lexicographically smallest region id
        return int(min(best, key=lambda i: ids[i]))
    if rule not in ids:
        raise InputError(f"baseline region {rule!r} is not in the fitted region set")
    return ids.index(rule)


def relative_risk(fit: FitResult, data: PanelDataset, mode: str = "vs_homogeneous",
                  baseline: Optional[str] = None) -> RelativeRisk:
    """Relative risk of each region-year, summarized over posterior draws.

    Parameters
    ----------
    fit : FitResult
    data : PanelDataset
        The panel the model was fitted on.
    mode : {"vs_homogeneous", "vs_baseline"}
        ``vs_homogeneous`` divides the fitted rate ``mu / offset`` by the
        global rate ``sum(y) / sum(offset)``. ``vs_baseline`` divides it by
        the same year's fitted rate in the baseline region.
    baseline : str, optional
        Region id or rule (``"lowest_risk"``, ``"closest_to_average"``);
        defaults to ``fit.spec.baseline_region``.

    Raises
    ------
    InputError
        If the data do not match the fit, or more than 1% of draws have a
        numerically zero baseline rate.
    """
    if mode not in ("vs_homogeneous", "vs_baseline"):
        raise InputError(f"unknown relative-risk mode {mode!r}")
    spec = fit.spec
    _, y, log_off, X, _ = _align(spec, data, fit.region_ids)
    if _data_signature(y, log_off) != fit.data_signature:
        raise InputError("the panel does not match the data the model was fitted on")

    n, T = y.shape
    m = fit.n_draws
    ref_rate = None
    b_idx = None
    if mode == "vs_homogeneous":
        off = np.exp(log_off)
        ref_rate = float(y.sum() / off.sum())

    avg_draws = []
    grid_draws = []
    skipped = 0
    if mode == "vs_baseline":
        rule = baseline if baseline is not None else spec.baseline_region
        rate_mean = np.zeros((n, T))
        for lo in range(0, m, CHUNK):
            rate_mean += _chunk_rates(fit, X, lo).sum(axis=0)
        b_idx = _choose_baseline(fit, y, rate_mean / m, rule)

    for lo in range(0, m, CHUNK):
        r = _chunk_rates(fit, X, lo)
        if mode == "vs_homogeneous":
            rr = r / ref_rate
        else:
            base = r[:, b_idx, :]
            ok = np.all(np.isfinite(base) & (base > RATE_FLOOR), axis=1)
            skipped += int((~ok).sum())
            rr = r[ok] / base[ok][:, None, :]
        grid_draws.append(rr)
        avg_draws.append(rr.mean(axis=2))
    if skipped > MAX_SKIPPED_FRACTION * m:
        raise InputError(f"baseline rate was numerically zero in {skipped} of {m} draws")
    allrr = np.concatenate(grid_draws, axis=0)
    avg = np.concatenate(avg_draws, axis=0)
    q = np.quantile(allrr, [0.025, 0.5, 0.975], axis=0)
    return RelativeRisk(
        mode=mode, region_ids=fit.region_ids, years=fit.years,
        mean=allrr.mean(axis=0), sd=allrr.std(axis=0, ddof=1), q2_5=q[0], median=q[1], q97_5=q[2],
        region_mean=avg.mean(axis=0), region_sd=avg.std(axis=0, ddof=1),
        baseline=fit.region_ids[b_idx] if b_idx is not None else None,
        reference_rate=ref_rate, skipped_draws=skipped, n_draws=m,
    )


def _chunk_rates(fit, X, lo):
    beta = fit.samples["beta"][lo:lo + CHUNK]
    s = fit.samples["s"][lo:lo + CHUNK]
    g = fit.samples["gamma"][lo:lo + CHUNK]
    lin = np.einsum("ntk,mk->mnt", X, beta) + s[:, :, None] + g[:, None, :]
    return np.exp(lin)
