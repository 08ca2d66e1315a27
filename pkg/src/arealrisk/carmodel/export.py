"""CSV and GeoJSON exports for fitted CAR models."""

from __future__ import annotations

import json
from typing import Optional, Sequence

from .. import _io
from ..errors import InputError
from ..lattice import Region, regions_to_geojson
from .diagnostics import SUMMARY_COLUMNS
from .model import FitResult
from .risk import RelativeRisk

SUMMARY_HEADER = ("Variable",) + SUMMARY_COLUMNS
COMPARISON_HEADER = ("Model", "Effects", "DIC", "Marginal Log-likelihood", "Dbar")
DIAGNOSTICS_HEADER = ("Model", "converged", "max_rhat_fixed", "p_d", "negative_p_d",
                      "marginal_loglik_mcse", "marginal_loglik_unstable")
RR_HEADER = ("region_id", "year", "rr_mean", "rr_sd", "rr_q2_5", "rr_q97_5")


def summary_rows(fit: FitResult, include_random: bool = False):
    """Rows of the posterior summary table.

    Fixed effects come first, then the dispersion and precision
    hyperparameters, then (optionally) every spatial and temporal effect
    labelled ``s[<region>]`` and ``gamma[<year>]``.
    """
    rows = [[name] + ps.as_row() for name, ps in fit.summaries.items()]
    if fit.theta_summary is not None:
        rows.append(["theta"] + fit.theta_summary.as_row())
    rows.extend([name] + ps.as_row() for name, ps in fit.hyper_summaries.items())
    if include_random:
        rows.extend([f"s[{rid}]"] + ps.as_row() for rid, ps in fit.spatial_effects.items())
        rows.extend([f"gamma[{yr}]"] + ps.as_row() for yr, ps in fit.temporal_effects.items())
    return rows


def write_summary_csv(fit: FitResult, path, metadata=None, include_random: bool = False) -> None:
    _io.write_csv(path, SUMMARY_HEADER, summary_rows(fit, include_random), metadata)


def comparison_rows(fits: Sequence[FitResult], labels: Optional[Sequence[str]] = None):
    labels = labels or [f"Model {k + 1}" for k in range(len(fits))]
    return [[lab, f.spec.effects_label, f.dic, f.marginal_loglik_estimate, f.dbar]
            for lab, f in zip(labels, fits)]


def write_comparison_csv(fits: Sequence[FitResult], path, labels=None, metadata=None) -> None:
    _io.write_csv(path, COMPARISON_HEADER, comparison_rows(fits, labels), metadata)


def diagnostics_rows(fits: Sequence[FitResult], labels=None):
    labels = labels or [f"Model {k + 1}" for k in range(len(fits))]
    rows = []
    for lab, f in zip(labels, fits):
        max_rhat = max(f.rhat[name] for name in f.summaries)
        rows.append([lab, f.converged, max_rhat, f.p_d, f.negative_p_d,
                     f.marginal_loglik_mcse, f.marginal_loglik_unstable])
    return rows


def write_diagnostics_csv(fits, path, labels=None, metadata=None) -> None:
    _io.write_csv(path, DIAGNOSTICS_HEADER, diagnostics_rows(fits, labels), metadata)


def rr_rows(rr: RelativeRisk):
    rows = []
    for i, rid in enumerate(rr.region_ids):
        for t, yr in enumerate(rr.years):
            rows.append([rid, yr, float(rr.mean[i, t]), float(rr.sd[i, t]),
                         float(rr.q2_5[i, t]), float(rr.q97_5[i, t])])
    return rows


def write_rr_csv(rr: RelativeRisk, path, metadata=None) -> None:
    _io.write_csv(path, RR_HEADER, rr_rows(rr), metadata)


def rr_geojson(rr: RelativeRisk, regions: Sequence[Region], metadata=None) -> dict:
    """FeatureCollection with time-averaged ``rr_mean`` and ``rr_sd`` per region."""
    index = {rid: i for i, rid in enumerate(rr.region_ids)}
    missing = [r.id for r in regions if r.id not in index]
    if missing:
        raise InputError(f"regions without relative-risk estimates: {missing[:5]}")
    props = {rid: {"rr_mean": float(rr.region_mean[i]), "rr_sd": float(rr.region_sd[i])}
             for rid, i in index.items()}
    doc = regions_to_geojson(regions, props)
    if metadata:
        doc["metadata"] = dict(metadata)
    return doc


def write_rr_geojson(rr: RelativeRisk, regions: Sequence[Region], path, metadata=None) -> None:
    doc = rr_geojson(rr, regions, metadata)
    _io.atomic_write_text(path, json.dumps(doc, indent=1, sort_keys=True) + "\n")
