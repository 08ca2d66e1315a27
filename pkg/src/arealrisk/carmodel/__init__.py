"""Bayesian spatio-temporal CAR models for areal counts."""

from .diagnostics import (
    DicResult,
    EvidenceEstimate,
    PosteriorSummary,
    dic,
    gaussian_kld,
    marginal_loglik_estimate,
    posterior_mode,
    split_rhat,
)
from .export import (
    COMPARISON_HEADER,
    RR_HEADER,
    SUMMARY_HEADER,
    rr_geojson,
    summary_rows,
    write_comparison_csv,
    write_diagnostics_csv,
    write_rr_csv,
    write_rr_geojson,
    write_summary_csv,
)
from .model import (
    CarModelSpec,
    FitResult,
    McmcSettings,
    car_joint_covariance_check,
    compare_models,
    fit_car,
)
from .risk import RelativeRisk, relative_risk

__all__ = [
    "CarModelSpec", "FitResult", "McmcSettings", "PosteriorSummary", "DicResult",
    "EvidenceEstimate", "RelativeRisk", "fit_car", "compare_models", "dic",
    "relative_risk", "car_joint_covariance_check", "marginal_loglik_estimate",
    "split_rhat", "gaussian_kld", "posterior_mode", "summary_rows",
    "write_summary_csv", "write_comparison_csv", "write_diagnostics_csv",
    "write_rr_csv", "write_rr_geojson", "rr_geojson",
    "SUMMARY_HEADER", "COMPARISON_HEADER", "RR_HEADER",
]
