"""Command-line pipeline: fusion, Moran's I, LASSO selection, CAR fits, trends.

Settings come from one INI file (``--config`` or the ``AREALRISK_CONFIG``
environment variable). Relative input paths are resolved against the
directory of the config file. Every run writes ``config_resolved.ini``
echoing all settings, defaults included, and every output starts with a
comment block naming the tool version, the hash of the resolved config,
the seeds and the command. Outputs contain no timestamps, so identical
config and inputs give byte-identical output trees.

Exit codes: 0 success, 1 finished with a convergence warning, 2 input
error, 3 internal error.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import io
import logging
import os
import sys
import warnings
from dataclasses import replace
from typing import Optional

import numpy as np

from . import __version__, _io
from .errors import ConvergenceWarning, InputError, UndefinedStatisticError

log = logging.getLogger("arealrisk")

EXIT_OK, EXIT_WARN, EXIT_INPUT, EXIT_INTERNAL = 0, 1, 2, 3

MORAN_HEADER = ("Year", "P-value", "Z-score", "Moran's I")
MORAN_DETAIL_HEADER = ("year", "n_regions", "moran_i", "expected", "z_score", "p_analytic",
                       "p_permutation", "undefined")
LASSO_HEADER = ("Variable", "Coefficient")
AGGREGATE_LABEL = "All"

INPUT_KEYS = ("geometry", "panel", "adjacency", "census", "ee_records", "events", "points",
              "income", "income_special", "missing_services", "covariate_overrides", "exclude")

DEFAULTS = {
    "inputs": {k: "" for k in INPUT_KEYS},
    "panel": {"years": "", "offset_source": "population"},
    "fusion": {"open_top_multiplier": "1.5"},
    "graph": {"rule": "queen", "tolerance": "1e-9"},
    "moran": {"values": "count", "permutations": "999", "alternative": "greater", "seed": "0"},
    "lasso": {"folds": "10", "rule": "one_se", "n_lambda": "100", "lambda_min_ratio": "0.001",
              "seed": "0", "log_covariates": "auto", "log_shift": "1", "proportion_shift": "0.0001",
              "use_offset": "true"},
    "car": {"covariates": "lasso", "likelihood": "negative_binomial", "spatial_prior": "icar",
            "rho": "", "temporal_prior": "rw1", "use_offset": "true", "chains": "4",
            "burn_in": "5000", "draws": "10000", "thin": "1", "seed": "0",
            "marginal_likelihood": "true", "beta_prior_sd": "100",
            "tau_spatial_prior": "1 0.01", "tau_temporal_prior": "1 0.01", "theta_prior": "2 0.1",
            "rr_mode": "vs_baseline", "baseline": "lowest_risk"},
    "trends": {"top_k": "5"},
    "synth": {"n_regions": "30", "n_years": "10", "beta": "0.3 -0.5", "tau_spatial": "4",
              "tau_temporal": "25", "theta": "3", "offset_log_mean": "2.302585092994046",
              "offset_log_sd": "0.5", "covariate_correlation": "", "time_varying": "true",
              "seed": "0", "start_year": "2009"},
}
BOOLEANS = {"true": True, "yes": True, "1": True, "false": False, "no": False, "0": False}
SEEDED = ("moran", "lasso", "car", "synth")
COMMANDS = ("fuse", "moran", "lasso", "car", "synth", "trends", "all")


# --- configuration --------------------------------------------------------------

class PipelineConfig:
    """Validated, fully defaulted settings of one run.

    ``base_dir`` anchors relative input paths. ``text`` is the canonical
    INI rendering hashed into every output header.
    """

    def __init__(self, parser: configparser.ConfigParser, base_dir: str, source: Optional[str]):
        self.cp = parser
        self.base_dir = base_dir
        self.source = source

    @classmethod
    def load(cls, path: Optional[str] = None, seed: Optional[int] = None) -> "PipelineConfig":
        cp = configparser.ConfigParser(interpolation=None)
        cp.read_dict(DEFAULTS)
        base = os.getcwd()
        if path:
            if not os.path.isfile(path):
                raise InputError(f"config file not found: {path}")
            extra = configparser.ConfigParser(interpolation=None)
            try:
                extra.read(path, encoding="utf-8")
            except configparser.Error as exc:
                raise InputError(f"{path}: {exc}") from exc
            for section in extra.sections():
                if section not in DEFAULTS:
                    raise InputError(f"{path}: unknown section [{section}]")
                for key, value in extra.items(section):
                    if key not in DEFAULTS[section]:
                        raise InputError(f"{path}: unknown key {key!r} in [{section}]")
                    cp.set(section, key, value.strip())
            base = os.path.dirname(os.path.abspath(path))
        if seed is not None:
            for section in SEEDED:
                cp.set(section, "seed", str(int(seed)))
        cfg = cls(cp, base, path)
        cfg.validate()
        return cfg

    # typed getters raise InputError naming the offending key
    def get(self, section, key) -> str:
        return self.cp.get(section, key)

    def _typed(self, section, key, fn):
        raw = self.get(section, key)
        try:
            return fn(raw)
        except (TypeError, ValueError):
            raise InputError(f"config [{section}] {key} = {raw!r} is not valid") from None

    def getint(self, section, key) -> int:
        return self._typed(section, key, int)

    def getfloat(self, section, key) -> float:
        return self._typed(section, key, float)

    def getbool(self, section, key) -> bool:
        raw = self.get(section, key).lower()
        if raw not in BOOLEANS:
            raise InputError(f"config [{section}] {key} = {raw!r} is not a boolean")
        return BOOLEANS[raw]

    def getfloats(self, section, key) -> tuple:
        return self._typed(section, key, lambda v: tuple(float(x) for x in v.replace(",", " ").split()))

    def path(self, key) -> Optional[str]:
        raw = self.get("inputs", key)
        if not raw:
            return None
        return raw if os.path.isabs(raw) else os.path.join(self.base_dir, raw)

    def require(self, *keys) -> None:
        """Fail unless every listed input is configured."""
        for key in keys:
            if not self.get("inputs", key):
                raise InputError(f"config [inputs] {key} is required for this command")

    def validate(self) -> None:
        for section, key in (("moran", "permutations"), ("lasso", "folds"), ("lasso", "n_lambda"),
                             ("car", "chains"), ("car", "burn_in"), ("car", "draws"),
                             ("car", "thin"), ("trends", "top_k"), ("synth", "n_regions"),
                             ("synth", "n_years"), ("synth", "start_year")):
            self.getint(section, key)
        for section in SEEDED:
            if self.getint(section, "seed") < 0:
                raise InputError(f"config [{section}] seed must be non-negative")
        for section, key in (("graph", "tolerance"), ("lasso", "lambda_min_ratio"),
                             ("lasso", "log_shift"), ("lasso", "proportion_shift"),
                             ("car", "beta_prior_sd"), ("fusion", "open_top_multiplier")):
            self.getfloat(section, key)
        for section, key in (("lasso", "use_offset"), ("car", "use_offset"),
                             ("car", "marginal_likelihood"), ("synth", "time_varying")):
            self.getbool(section, key)
        choices = {("graph", "rule"): ("queen", "rook"),
                   ("moran", "values"): ("count", "rate"),
                   ("moran", "alternative"): ("greater", "less", "two-sided"),
                   ("lasso", "rule"): ("one_se", "min"),
                   ("car", "rr_mode"): ("vs_baseline", "vs_homogeneous"),
                   ("panel", "offset_source"): ("population", "none")}
        for (section, key), allowed in choices.items():
            if self.get(section, key) not in allowed:
                raise InputError(f"config [{section}] {key} must be one of {allowed}")
        for key in INPUT_KEYS:
            p = self.path(key)
            if p is not None and not os.path.exists(p):
                raise InputError(f"input file not found: {p}")

    @property
    def text(self) -> str:
        buf = io.StringIO()
        self.cp.write(buf)
        return buf.getvalue()

    @property
    def sha256(self) -> str:
        return hashlib.sha256(self.text.encode("utf-8")).hexdigest()

    def seeds(self) -> str:
        return " ".join(f"{s}={self.get(s, 'seed')}" for s in SEEDED)

    def metadata(self, command: str) -> dict:
        return {"tool": "arealrisk", "version": __version__, "command": command,
                "config_sha256": self.sha256, "seeds": self.seeds()}


def _years(spec: str) -> Optional[tuple]:
    if not spec:
        return None
    out = []
    try:
        for part in spec.replace(",", " ").split():
            if "-" in part[1:]:
                lo, hi = part.split("-", 1)
                out.extend(range(int(lo), int(hi) + 1))
            else:
                out.append(int(part))
    except ValueError:
        raise InputError(f"config [panel] years = {spec!r} is not valid") from None
    return tuple(out)


def read_exclusions(path) -> list:
    """Region ids, one per line; blank lines and ``#`` comments are ignored.

    A first line ``region_id`` is treated as a header.
    """
    if not os.path.isfile(path):
        raise InputError(f"exclusion file not found: {path}")
    ids = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip().split(",")[0].strip()
            if line:
                ids.append(line)
    if ids and ids[0] == "region_id":
        ids = ids[1:]
    return ids


# --- shared state -----------------------------------------------------------------

class Run:
    """Lazily loaded inputs shared by the subcommands of one invocation."""

    def __init__(self, cfg: PipelineConfig, out_dir: str, command: str, threads: int = 1,
                 exclude_file: Optional[str] = None):
        self.cfg = cfg
        self.out = out_dir
        self.command = command
        self.threads = threads
        self.exclude_file = exclude_file or cfg.path("exclude")
        self.meta = cfg.metadata(command)
        self._regions = None
        self._graph = None
        self._panel = None
        self._selection = None
        self._prepared = None

    def file(self, name) -> str:
        return os.path.join(self.out, name)

    def write_csv(self, name, header, rows):
        _io.write_csv(self.file(name), header, rows, self.meta)

    @property
    def regions(self):
        if self._regions is None:
            from .lattice import read_geojson
            self.cfg.require("geometry")
            self._regions = sorted(read_geojson(self.cfg.path("geometry")), key=lambda r: r.id)
        return self._regions

    @property
    def graph(self):
        if self._graph is None:
            from .lattice import build_adjacency, read_edge_list
            ids = [r.id for r in self.regions]
            if self.cfg.path("adjacency"):
                self._graph = read_edge_list(self.cfg.path("adjacency"), ids)
            else:
                self._graph = build_adjacency(self.regions, self.cfg.get("graph", "rule"),
                                              self.cfg.getfloat("graph", "tolerance"))
        return self._graph

    @property
    def panel(self):
        if self._panel is None:
            if self.cfg.path("panel"):
                from .glm import read_panel_csv
                self._panel = read_panel_csv(self.cfg.path("panel"),
                                             region_ids=[r.id for r in self.regions])
            else:
                self._panel = self.fusion().panel
        return self._panel

    def fusion(self):
        from . import fusion as fu
        cfg = self.cfg
        cfg.require("geometry", "census")
        if not (cfg.path("ee_records") or cfg.path("events")):
            raise InputError("config [inputs] needs ee_records or events to build the panel")
        population, census = fu.read_census_csv(cfg.path("census"))
        if cfg.path("ee_records"):
            counts = fu.read_ee_records_csv(cfg.path("ee_records"))
        else:
            counts = fu.aggregate_events(fu.read_events_csv(cfg.path("events")))
        years = _years(cfg.get("panel", "years"))
        if years is None:
            seen = [y for _, y in counts]
            if not seen:
                raise InputError("no event records and no [panel] years configured")
            years = tuple(range(min(seen), max(seen) + 1))
        points = fu.read_points_csv(cfg.path("points")) if cfg.path("points") else ()
        income = None
        if cfg.path("income"):
            income = fu.read_income_csv(cfg.path("income"), cfg.path("income_special"))
        missing = fu.read_missing_services_csv(cfg.path("missing_services")) \
            if cfg.path("missing_services") else ()
        overrides = fu.read_covariate_overrides_csv(cfg.path("covariate_overrides")) \
            if cfg.path("covariate_overrides") else None
        res = fu.fuse(self.regions, census, population, counts, years, points=points,
                      income=income, missing_services=missing, yearly_overrides=overrides,
                      open_top_multiplier=cfg.getfloat("fusion", "open_top_multiplier"),
                      offset_source=cfg.get("panel", "offset_source"))
        self._panel = res.panel
        return res

    def exclusions(self) -> list:
        return read_exclusions(self.exclude_file) if self.exclude_file else []

    def prepared(self):
        """Panel with flagged covariates logged and all covariates standardised."""
        if self._prepared is None:
            from .glm import prepare_covariates
            panel = self.panel
            spec = self.cfg.get("lasso", "log_covariates").strip()
            if spec == "auto":
                x = panel.covariates
                flags = tuple(bool(np.all(x[:, j] >= 0) and np.all(x[:, j] == np.round(x[:, j])))
                              for j in range(panel.p))
            elif spec in ("", "none"):
                flags = (False,) * panel.p
            else:
                names = {s.strip() for s in spec.split(",") if s.strip()}
                unknown = names - set(panel.covariate_names)
                if unknown:
                    raise InputError(f"config [lasso] log_covariates names unknown covariates "
                                     f"{sorted(unknown)}")
                flags = tuple(nm in names for nm in panel.covariate_names)
            self._prepared = prepare_covariates(
                replace(panel, transform_log=flags),
                self.cfg.getfloat("lasso", "log_shift"),
                self.cfg.getfloat("lasso", "proportion_shift"))
        return self._prepared


# --- subcommands ------------------------------------------------------------------

def cmd_fuse(run: Run) -> None:
    """Write ``panel.csv``, ``fusion_report.csv`` and ``adjacency.csv``."""
    from .glm import write_panel_csv
    from .lattice import write_edge_list
    res = run.fusion()
    write_panel_csv(res.panel, run.file("panel.csv"), run.meta)
    rows = []
    for rid, name in sorted(res.report["imputed_cells"]):
        rows.append(["imputed_cell", rid, name, ""])
    for name in sorted(res.report["degraded_imputation"]):
        rows.append(["degraded_imputation", "", name, ""])
    for cat, n in sorted(res.report["unassigned_points"].items()):
        if n:
            rows.append(["unassigned_points", "", cat, n])
    graph = run.graph
    for k in graph.islands:
        rows.append(["island", graph.region_ids[k], "", ""])
    run.write_csv("fusion_report.csv", ("kind", "region_id", "item", "value"), rows)
    write_edge_list(graph, run.file("adjacency.csv"), run.meta)


def _moran_rows(values_by_year, graph, cfg, labels):
    from .autocorr import morans_permutation_test
    perms = cfg.getint("moran", "permutations")
    alt = cfg.get("moran", "alternative")
    seed = cfg.getint("moran", "seed")
    table, detail = [], []
    for k, (label, values) in enumerate(zip(labels, values_by_year)):
        try:
            r = morans_permutation_test(values, graph, perms, seed=[seed, k], alternative=alt)
        except UndefinedStatisticError as exc:
            log.warning("Moran's I undefined for %s: %s", label, exc)
            table.append([label, np.nan, np.nan, np.nan])
            detail.append([label, graph.n, np.nan, np.nan, np.nan, np.nan, np.nan, True])
            continue
        table.append([label, r.p_value_analytic, r.z_score, r.statistic])
        detail.append([label, graph.n, r.statistic, r.expected, r.z_score, r.p_value_analytic,
                       r.p_value_permutation, False])
    return table, detail


def _moran_inputs(panel, graph_ids, rate: bool):
    pos = [panel.region_ids.index(r) for r in graph_ids]
    y = panel.grid()[pos]
    off = panel.grid(panel.offset)[pos]
    if np.isnan(y).any():
        raise InputError("Moran's I needs a count for every region-year")
    columns = [y[:, t] / off[:, t] if rate else y[:, t] for t in range(y.shape[1])]
    columns.append(y.sum(axis=1) / off.sum(axis=1) if rate else y.sum(axis=1))
    return columns, [*panel.years, AGGREGATE_LABEL]


def cmd_moran(run: Run) -> None:
    """Write ``moran.csv`` and ``moran_detail.csv``; with exclusions also the
    ``_excluded`` variants."""
    from .lattice import subset_graph
    cfg = run.cfg
    graph = run.graph
    rate = cfg.get("moran", "values") == "rate"
    values, labels = _moran_inputs(run.panel, graph.region_ids, rate)
    table, detail = _moran_rows(values, graph, cfg, labels)
    run.write_csv("moran.csv", MORAN_HEADER, table)
    run.write_csv("moran_detail.csv", MORAN_DETAIL_HEADER, detail)
    excluded = run.exclusions()
    if excluded:
        sub = subset_graph(graph, excluded)
        values, labels = _moran_inputs(run.panel, sub.region_ids, rate)
        table, detail = _moran_rows(values, sub, cfg, labels)
        run.write_csv("moran_excluded.csv", MORAN_HEADER, table)
        run.write_csv("moran_excluded_detail.csv", MORAN_DETAIL_HEADER, detail)


def cmd_lasso(run: Run) -> list:
    """Write ``lasso_selected.csv`` and ``lasso_path.csv``; return the selected names."""
    from .glm import cv_select_lambda, select_features
    cfg = run.cfg
    data = run.prepared()
    if data.p == 0:
        raise InputError("the panel has no covariates to select from")
    rule = cfg.get("lasso", "rule")
    _, path = cv_select_lambda(
        data, folds=cfg.getint("lasso", "folds"), seed=cfg.getint("lasso", "seed"), rule=rule,
        n_lambda=cfg.getint("lasso", "n_lambda"),
        lambda_min_ratio=cfg.getfloat("lasso", "lambda_min_ratio"),
        use_offset=cfg.getbool("lasso", "use_offset"))
    selected = select_features(path, rule=rule)
    run.write_csv("lasso_selected.csv", LASSO_HEADER, selected)
    rows = []
    for k, lam in enumerate(path.lambdas):
        rows.append([float(lam), float(path.cv_mean_deviance[k]), float(path.cv_se_deviance[k]),
                     float(path.thetas[k]), float(path.intercepts[k]),
                     *map(float, path.coefficients_per_lambda[k])])
    header = ("lambda", "cv_mean", "cv_se", "theta", "intercept", *path.covariate_names)
    run.write_csv("lasso_path.csv", header, rows)
    run._selection = [name for name, _ in selected[1:]]
    return run._selection


def _car_covariates(run: Run) -> tuple:
    spec = run.cfg.get("car", "covariates").strip()
    if spec == "lasso":
        if run._selection is None:
            cmd_lasso(run)
        return tuple(run._selection)
    if spec == "all":
        return tuple(run.prepared().covariate_names)
    if spec in ("", "none"):
        return ()
    return tuple(s.strip() for s in spec.split(",") if s.strip())


def cmd_car(run: Run) -> None:
    """Fit the fixed, spatial and spatial-plus-temporal variants and write the
    comparison, diagnostics, best-model summaries and relative risks."""
    from .carmodel import (CarModelSpec, McmcSettings, compare_models, fit_car, relative_risk,
                           write_comparison_csv, write_diagnostics_csv, write_rr_csv,
                           write_rr_geojson, write_summary_csv)
    cfg = run.cfg
    names = _car_covariates(run)
    data = run.prepared()
    rho = cfg.get("car", "rho")
    base = CarModelSpec(
        likelihood=cfg.get("car", "likelihood"), covariate_names=names,
        use_offset=cfg.getbool("car", "use_offset"), spatial_prior=cfg.get("car", "spatial_prior"),
        rho=cfg.getfloat("car", "rho") if rho else None,
        temporal_prior=cfg.get("car", "temporal_prior"),
        tau_spatial_prior=cfg.getfloats("car", "tau_spatial_prior"),
        tau_temporal_prior=cfg.getfloats("car", "tau_temporal_prior"),
        theta_prior=cfg.getfloats("car", "theta_prior"),
        beta_prior_sd=cfg.getfloat("car", "beta_prior_sd"),
        baseline_region=cfg.get("car", "baseline"))
    mcmc = McmcSettings(chains=cfg.getint("car", "chains"), burn_in=cfg.getint("car", "burn_in"),
                        draws=cfg.getint("car", "draws"), thin=cfg.getint("car", "thin"),
                        seed=cfg.getint("car", "seed"), threads=run.threads,
                        marginal_likelihood=cfg.getbool("car", "marginal_likelihood"))
    variants = [replace(base, include_spatial=False, include_temporal=False),
                replace(base, include_spatial=True, include_temporal=False),
                replace(base, include_spatial=True, include_temporal=True)]
    fits = []
    for k, spec in enumerate(variants):
        log.info("fitting model %d (%s)", k + 1, spec.effects_label)
        fits.append(fit_car(spec, data, run.graph, mcmc))
    labels = [f"Model {k + 1}" for k in range(len(fits))]
    write_comparison_csv(fits, run.file("car_comparison.csv"), labels, run.meta)
    write_diagnostics_csv(fits, run.file("car_diagnostics.csv"), labels, run.meta)
    best = compare_models(fits)[0]
    write_summary_csv(best, run.file("car_summary.csv"), run.meta)
    write_summary_csv(best, run.file("car_effects.csv"), run.meta, include_random=True)
    rr = relative_risk(best, data, mode=cfg.get("car", "rr_mode"))
    write_rr_csv(rr, run.file("rr.csv"), run.meta)
    write_rr_geojson(rr, run.regions, run.file("rr.geojson"), run.meta)


def cmd_trends(run: Run, group_by: Optional[str] = None) -> None:
    """Write trend series from raw events: ``trends_year.csv``,
    ``trends_top_k.csv`` and, when statuses are present, ``trends_status.csv``."""
    from . import fusion as fu
    cfg = run.cfg
    cfg.require("events")
    events = fu.read_events_csv(cfg.path("events"))
    years = _years(cfg.get("panel", "years"))
    if years is None:
        if not events:
            raise InputError("no events and no [panel] years configured")
        seen = [e.year for e in events]
        years = tuple(range(min(seen), max(seen) + 1))
    wanted = [group_by] if group_by else ["year", "region_top_k", "status"]
    if "year" in wanted:
        run.write_csv("trends_year.csv", ("year", "count"), fu.annual_totals(events, years))
    if "region_top_k" in wanted:
        series = fu.top_k_regions(events, years, cfg.getint("trends", "top_k"))
        rows = [[rid, y, c] for rid, pts in series.items() for y, c in pts]
        run.write_csv("trends_top_k.csv", ("region_id", "year", "count"), rows)
    if "status" in wanted:
        has_status = all(e.indigenous_status is not None for e in events)
        if group_by == "status" or has_status:
            series = fu.status_series(events, years)
            rows = [[s, y, c] for s, pts in series.items() for y, c in pts]
            run.write_csv("trends_status.csv", ("status", "year", "count"), rows)


def cmd_synth(run: Run) -> None:
    """Write a synthetic bundle plus a ``config.ini`` that runs the pipeline on it."""
    from .synth import SyntheticScenario, simulate, write_bundle
    cfg = run.cfg
    corr = cfg.getfloats("synth", "covariate_correlation")
    beta = cfg.getfloats("synth", "beta")
    p = len(beta) - 1
    if corr and len(corr) != p * p:
        raise InputError(f"config [synth] covariate_correlation needs {p * p} values")
    scenario = SyntheticScenario(
        n_regions=cfg.getint("synth", "n_regions"), n_years=cfg.getint("synth", "n_years"),
        beta=beta, tau_spatial=cfg.getfloat("synth", "tau_spatial"),
        tau_temporal=cfg.getfloat("synth", "tau_temporal"), theta=cfg.getfloat("synth", "theta"),
        offset_log_mean=cfg.getfloat("synth", "offset_log_mean"),
        offset_log_sd=cfg.getfloat("synth", "offset_log_sd"),
        covariate_correlation=np.reshape(corr, (p, p)) if corr else None,
        time_varying_covariates=cfg.getbool("synth", "time_varying"),
        seed=cfg.getint("synth", "seed"), start_year=cfg.getint("synth", "start_year"))
    written = write_bundle(simulate(scenario), run.out, run.meta)
    out = configparser.ConfigParser(interpolation=None)
    out.read_dict({s: dict(cfg.cp.items(s)) for s in cfg.cp.sections() if s != "synth"})
    inputs = {k: "" for k in INPUT_KEYS}
    inputs.update({"geometry": "geometry.geojson", "census": "census.csv",
                   "ee_records": "ee_records.csv", "points": "points.csv",
                   "income": "income.csv", "income_special": "income_special.csv"})
    if "events.csv" in written:
        inputs["events"] = "events.csv"
    if "covariates_by_year.csv" in written:
        inputs["covariate_overrides"] = "covariates_by_year.csv"
    out.read_dict({"inputs": inputs})
    out.set("panel", "years", f"{scenario.years[0]}-{scenario.years[-1]}")
    buf = io.StringIO()
    buf.write("".join(f"# {k}: {v}\n" for k, v in run.meta.items()))
    out.write(buf)
    _io.atomic_write_text(run.file("config.ini"), buf.getvalue())


def cmd_all(run: Run) -> None:
    if not run.cfg.path("panel"):
        cmd_fuse(run)
    cmd_moran(run)
    cmd_lasso(run)
    cmd_car(run)
    if run.cfg.path("events"):
        cmd_trends(run)


# --- entry point -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="arealrisk", description=__doc__.split("\n\n")[0])
    ap.add_argument("--version", action="version", version=f"arealrisk {__version__}")
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", help="INI settings file (default: $AREALRISK_CONFIG)")
    ap.add_argument("--out", default="out", help="output directory (default: ./out)")
    ap.add_argument("--seed", type=int, help="override every seed in the config")
    ap.add_argument("--exclude-file", help="region ids to drop for the Moran sensitivity run")
    ap.add_argument("--threads", type=int, default=1, help="threads for MCMC chains")
    ap.add_argument("--group-by", choices=("year", "region_top_k", "status"),
                    help="trends: emit only this grouping")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def run_command(args) -> int:
    config_path = args.config or os.environ.get("AREALRISK_CONFIG") or None
    cfg = PipelineConfig.load(config_path, seed=args.seed)
    if args.threads < 1:
        raise InputError("--threads must be at least 1")
    if args.exclude_file and not os.path.isfile(args.exclude_file):
        raise InputError(f"exclusion file not found: {args.exclude_file}")
    os.makedirs(args.out, exist_ok=True)
    run = Run(cfg, args.out, args.command, args.threads, args.exclude_file)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", ConvergenceWarning)
        handler = {"fuse": cmd_fuse, "moran": cmd_moran, "lasso": cmd_lasso, "car": cmd_car,
                   "synth": cmd_synth, "all": cmd_all,
                   "trends": lambda r: cmd_trends(r, args.group_by)}[args.command]
        handler(run)
        head = "".join(f"# {k}: {v}\n" for k, v in run.meta.items())
        _io.atomic_write_text(run.file("config_resolved.ini"), head + cfg.text)
    conv = [w for w in caught if issubclass(w.category, ConvergenceWarning)]
    for w in caught:
        log.warning("%s", w.message)
    return EXIT_WARN if conv else EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="arealrisk: %(levelname)s: %(message)s")
    try:
        return run_command(args)
    except (InputError, configparser.Error) as exc:
        print(f"arealrisk: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as exc:
        where = f": {exc.filename}" if exc.filename else ""
        print(f"arealrisk: error: {exc.strerror or exc}{where}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as exc:  # noqa: BLE001 - stable exit-code contract
        log.debug("internal error", exc_info=True)
        print(f"arealrisk: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
