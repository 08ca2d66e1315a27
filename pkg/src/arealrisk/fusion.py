"""Assemble the region-by-year analysis panel from heterogeneous inputs.

Service locations are counted per region by point-in-polygon tests,
weekly income is estimated from bracket frequencies, missing service
counts are imputed with a population-based NB regression, and event
counts are joined with time-constant census covariates into a dense
panel.
"""

from __future__ import annotations

import datetime as _dt
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from . import _io, _kernels
from .errors import InputError, SingularDesignError
from .glm import PanelDataset, fit_nb_glm
from .lattice import Region, validate_regions

log = logging.getLogger(__name__)

CATEGORIES = ("pharmacy", "gp", "liquor", "school", "library")
BOUNDARY_TOL = 1e-12
MIN_OBSERVED_FOR_GLM = 10

BLUE_COLLAR = frozenset({
    "technicians and trades workers",
    "community and personal service workers",
    "labourers",
})
WHITE_COLLAR = frozenset({
    "managers",
    "clerical and administrative workers",
    "clerical and administrative staff",
    "sales workers",
})


# --- points ----------------------------------------------------------------------

@dataclass(frozen=True)
class PointRecord:
    longitude: float
    latitude: float
    category: str
    source_id: str = ""

    def __post_init__(self):
        lon, lat = float(self.longitude), float(self.latitude)
        if not -180.0 <= lon <= 180.0:
            raise InputError(f"longitude {lon} outside [-180, 180]")
        if not -90.0 <= lat <= 90.0:
            raise InputError(f"latitude {lat} outside [-90, 90]")
        if self.category not in CATEGORIES:
            raise InputError(f"unknown point category {self.category!r}; expected one of {CATEGORIES}")
        object.__setattr__(self, "longitude", lon)
        object.__setattr__(self, "latitude", lat)
        object.__setattr__(self, "source_id", str(self.source_id))


def _check_ring(ring):
    ring = np.asarray(ring, dtype=float)
    if ring.ndim != 2 or ring.shape[1] != 2 or ring.shape[0] < 4:
        raise InputError("a ring must be an (n, 2) array with at least 4 vertices")
    if not np.array_equal(ring[0], ring[-1]):
        raise InputError("ring is not closed (first vertex differs from last)")
    return np.ascontiguousarray(ring[:, 0]), np.ascontiguousarray(ring[:, 1])


def point_in_polygon(point, rings) -> bool:
    """Even-odd containment of ``point = (x, y)`` in a set of closed rings.

    Interior rings (holes) flip the parity, so a point in a hole is
    outside. Points exactly on an edge may fall either way; use
    :func:`aggregate_points` for a deterministic boundary rule.
    """
    px = np.array([float(point[0])])
    py = np.array([float(point[1])])
    parity = 0
    for ring in rings:
        rx, ry = _check_ring(ring)
        parity ^= int(_kernels.ring_crossing_parity(px, py, rx, ry)[0])
    return bool(parity)


@dataclass(frozen=True)
class PointAggregation:
    """Per-region, per-category counts of assigned points.

    ``assignment`` holds the region id for every input point, or None
    for points that fell in no region.
    """

    counts: Mapping[str, Mapping[str, int]]
    unassigned: Mapping[str, int]
    assignment: tuple

    def total(self, category: str) -> int:
        return sum(c[category] for c in self.counts.values()) + self.unassigned[category]


def _region_hits(region: Region, px, py, tol):
    x0, y0, x1, y1 = region.bounds
    cand = np.flatnonzero((px >= x0 - tol) & (px <= x1 + tol) & (py >= y0 - tol) & (py <= y1 + tol))
    hit = np.zeros(px.shape[0], dtype=bool)
    if cand.size == 0:
        return hit
    cx = np.ascontiguousarray(px[cand])
    cy = np.ascontiguousarray(py[cand])
    parity = np.zeros(cand.size, dtype=np.uint8)
    edge = np.zeros(cand.size, dtype=bool)
    for ring in region.geometry:
        rx, ry = _check_ring(ring)
        parity ^= _kernels.ring_crossing_parity(cx, cy, rx, ry)
        edge |= _kernels.ring_on_boundary(cx, cy, rx, ry, tol)
    hit[cand] = (parity == 1) | edge
    return hit


def aggregate_points(points: Sequence[PointRecord], regions: Sequence[Region],
                     boundary_tol: float = BOUNDARY_TOL) -> PointAggregation:
    """Count points per region and category.

    A point inside (or within ``boundary_tol`` of the boundary of) several
    regions goes to the lexicographically smallest region id. Points in
    no region are counted as unassigned.
    """
    validate_regions(regions)
    n = len(points)
    px = np.array([p.longitude for p in points], dtype=float)
    py = np.array([p.latitude for p in points], dtype=float)
    best: list = [None] * n
    for region in sorted(regions, key=lambda r: r.id, reverse=True):
        # visiting ids in descending order lets the smallest containing id win
        for k in np.flatnonzero(_region_hits(region, px, py, boundary_tol)):
            best[k] = region.id
    counts = {r.id: {c: 0 for c in CATEGORIES} for r in regions}
    unassigned = {c: 0 for c in CATEGORIES}
    for p, rid in zip(points, best):
        if rid is None:
            unassigned[p.category] += 1
        else:
            counts[rid][p.category] += 1
    return PointAggregation(counts=counts, unassigned=unassigned, assignment=tuple(best))


# --- income ----------------------------------------------------------------------

@dataclass(frozen=True)
class IncomeBrackets:
    """Weekly income brackets for one region.

    ``brackets`` is a tuple of ``(lower, upper, frequency)``; ``upper`` is
    None for the open-top bracket, which must come last.
    """

    brackets: tuple
    negative_count: int = 0
    nil_count: int = 0
    not_stated_count: int = 0

    def __post_init__(self):
        rows = tuple((float(lo), None if hi is None else float(hi), float(f))
                     for lo, hi, f in self.brackets)
        for k, (lo, hi, f) in enumerate(rows):
            if f < 0:
                raise InputError("bracket frequencies must be non-negative")
            if hi is None and k != len(rows) - 1:
                raise InputError("only the last bracket may be open-topped")
            if hi is not None and hi < lo:
                raise InputError(f"bracket {k} has upper bound below lower bound")
            if k and (rows[k - 1][1] is None or lo < rows[k - 1][1]):
                raise InputError("brackets must be sorted ascending and non-overlapping")
        for name in ("negative_count", "nil_count", "not_stated_count"):
            if getattr(self, name) < 0:
                raise InputError(f"{name} must be non-negative")
        object.__setattr__(self, "brackets", rows)


@dataclass(frozen=True)
class IncomeBracketTable:
    regions: Mapping[str, IncomeBrackets]


def estimate_average_income(table: IncomeBracketTable, open_top_multiplier: float = 1.5) -> dict:
    """Frequency-weighted mean of bracket midpoints per region.

    The midpoint of ``[lower, upper]`` is ``(lower + upper) / 2`` and the
    open-top bracket is valued at ``lower * open_top_multiplier``. Nil,
    negative and not-stated residents are excluded. A region whose
    adjusted population is zero maps to NaN.
    """
    out = {}
    for rid, inc in table.regions.items():
        total = 0.0
        weighted = 0.0
        for lo, hi, f in inc.brackets:
            mid = lo * open_top_multiplier if hi is None else 0.5 * (lo + hi)
            weighted += mid * f
            total += f
        out[rid] = weighted / total if total > 0 else float("nan")
    return out


# --- occupations -----------------------------------------------------------------

def classify_occupation(label: str) -> str:
    """Map an occupation label to ``blue_collar``, ``white_collar`` or ``unclassified``."""
    key = " ".join(str(label).strip().lower().split())
    if key in BLUE_COLLAR:
        return "blue_collar"
    if key in WHITE_COLLAR:
        return "white_collar"
    return "unclassified"


def count_occupations(labels_with_counts) -> Counter:
    """Sum ``(label, count)`` pairs into occupation classes."""
    out = Counter({"blue_collar": 0, "white_collar": 0, "unclassified": 0})
    for label, n in labels_with_counts:
        out[classify_occupation(label)] += int(n)
    return out


# --- imputation ------------------------------------------------------------------

@dataclass(frozen=True)
class ImputationResult:
    values: np.ndarray
    imputed: np.ndarray
    method: str
    degraded: bool
    intercept: float = float("nan")
    slope: float = float("nan")


def impute_missing_counts(counts, population) -> ImputationResult:
    """Fill NaN counts from an NB regression on ``log(population + 1)``.

    The model is fitted on observed regions only and missing cells get
    the rounded fitted mean. With fewer than 10 observed regions, or when
    the regression cannot be fitted, missing cells get the observed
    median and ``degraded`` is set. Observed cells are never changed.
    """
    y = np.asarray(counts, dtype=float)
    pop = np.asarray(population, dtype=float)
    if y.shape != pop.shape or y.ndim != 1:
        raise InputError("counts and population must be 1-d arrays of equal length")
    if np.any(pop < 0) or not np.all(np.isfinite(pop)):
        raise InputError("population must be finite and non-negative")
    obs = np.isfinite(y)
    if np.any(y[obs] < 0) or np.any(y[obs] != np.round(y[obs])):
        raise InputError("observed counts must be non-negative integers")
    missing = ~obs
    if not missing.any():
        return ImputationResult(values=y.copy(), imputed=missing, method="none", degraded=False)
    if not obs.any():
        raise InputError("cannot impute: no observed counts")
    x = np.log(pop + 1.0)
    if obs.sum() >= MIN_OBSERVED_FOR_GLM:
        k = int(obs.sum())
        data = PanelDataset(region_index=np.arange(k), year_index=np.zeros(k, dtype=int),
                            counts=y[obs], offset=np.ones(k), covariates=x[obs, None],
                            covariate_names=("log_population",))
        try:
            fit = fit_nb_glm(data, use_offset=False)
        except (SingularDesignError, InputError) as exc:
            log.warning("imputation regression failed (%s); using the observed median", exc)
        else:
            out = y.copy()
            out[missing] = np.round(np.exp(fit.intercept + fit.coefficients[0] * x[missing]))
            return ImputationResult(values=out, imputed=missing, method="nb_glm", degraded=False,
                                    intercept=fit.intercept, slope=float(fit.coefficients[0]))
    out = y.copy()
    out[missing] = np.round(np.median(y[obs]))
    return ImputationResult(values=out, imputed=missing, method="median", degraded=True)


# --- covariates ------------------------------------------------------------------

KINDS = ("count", "share", "real")


@dataclass(frozen=True)
class CovariateTable:
    """Time-constant covariates per region.

    ``values`` has shape ``(n_regions, n_covariates)``; ``imputed`` flags
    cells that were filled in rather than observed. ``kinds`` marks each
    column as ``count`` (non-negative), ``share`` (in [0, 1]) or ``real``.
    """

    region_ids: tuple
    names: tuple
    values: np.ndarray
    imputed: np.ndarray
    kinds: tuple

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        flags = np.array(self.imputed, dtype=bool)
        n, k = len(self.region_ids), len(self.names)
        if v.shape != (n, k) or flags.shape != (n, k) or len(self.kinds) != k:
            raise InputError("covariate table shapes are inconsistent")
        if len(set(self.names)) != k:
            raise InputError("duplicate covariate names")
        for j, kind in enumerate(self.kinds):
            if kind not in KINDS:
                raise InputError(f"unknown covariate kind {kind!r}")
            col = v[:, j][np.isfinite(v[:, j])]
            if kind == "count" and np.any(col < 0):
                raise InputError(f"count covariate {self.names[j]!r} has negative values")
            if kind == "share" and np.any((col < 0) | (col > 1)):
                raise InputError(f"share covariate {self.names[j]!r} outside [0, 1]")
        v.setflags(write=False)
        flags.setflags(write=False)
        object.__setattr__(self, "region_ids", tuple(str(r) for r in self.region_ids))
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "kinds", tuple(self.kinds))
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "imputed", flags)

    def column(self, name):
        return self.values[:, self.names.index(name)]

    def complete(self) -> bool:
        return bool(np.all(np.isfinite(self.values)))

    def with_column(self, name, values, kind, imputed=None) -> "CovariateTable":
        values = np.asarray(values, dtype=float).reshape(-1, 1)
        flags = np.zeros_like(values, dtype=bool) if imputed is None else np.asarray(imputed).reshape(-1, 1)
        return CovariateTable(self.region_ids, self.names + (name,),
                              np.hstack([self.values, values]), np.hstack([self.imputed, flags]),
                              self.kinds + (kind,))

    def replace_column(self, name, values, imputed) -> "CovariateTable":
        j = self.names.index(name)
        v = self.values.copy()
        f = self.imputed.copy()
        v[:, j] = values
        f[:, j] |= np.asarray(imputed, dtype=bool)
        return CovariateTable(self.region_ids, self.names, v, f, self.kinds)


# --- events and panel ------------------------------------------------------------

@dataclass(frozen=True)
class EventRecord:
    region_id: str
    date: _dt.date
    indigenous_status: Optional[str] = None
    age_band: Optional[str] = None

    @property
    def year(self) -> int:
        return self.date.year


def aggregate_events(events: Sequence[EventRecord]) -> dict:
    """Counts per ``(region_id, year)``."""
    out: Counter = Counter()
    for e in events:
        out[(e.region_id, e.year)] += 1
    return dict(out)


def build_panel(ee_counts: Mapping, covariates: CovariateTable, years: Sequence[int],
                population: Optional[Mapping[str, float]] = None,
                offset_source: str = "population",
                yearly_overrides: Optional[Mapping] = None) -> PanelDataset:
    """Dense region-by-year panel of counts, offsets and covariates.

    Parameters
    ----------
    ee_counts : mapping
        ``(region_id, year) -> count``. Region-years without an entry are
        structural zeros.
    covariates : CovariateTable
        Complete time-constant covariates; their regions define the panel
        rows. Values are replicated across years.
    years : sequence of int
    population : mapping, optional
        Region population, required when ``offset_source="population"``.
    offset_source : {"population", "none"}
    yearly_overrides : mapping, optional
        ``(region_id, year) -> {name: value}`` replacing the census value
        of a covariate in one year.
    """
    if offset_source not in ("population", "none"):
        raise InputError(f"unknown offset source {offset_source!r}")
    if not covariates.complete():
        raise InputError("covariates still contain missing values; impute them first")
    ids = covariates.region_ids
    years = tuple(int(y) for y in years)
    if len(set(years)) != len(years) or not years:
        raise InputError("years must be a non-empty sequence of distinct integers")
    pos = {rid: i for i, rid in enumerate(ids)}
    ypos = {y: t for t, y in enumerate(years)}
    unknown = sorted({r for r, _ in ee_counts} - set(ids))
    if unknown:
        raise InputError(f"event records reference regions not in the region set: {unknown}")
    bad_years = sorted({y for _, y in ee_counts} - set(years))
    if bad_years:
        raise InputError(f"event records fall outside the panel years: {bad_years}")
    n, T = len(ids), len(years)
    y = np.zeros((n, T))
    for (rid, yr), c in ee_counts.items():
        if c < 0:
            raise InputError(f"negative count for {rid} in {yr}")
        y[pos[rid], ypos[yr]] += c
    if offset_source == "population":
        if population is None:
            raise InputError("population offsets requested but no population given")
        pop = np.array([float(population.get(rid, float("nan"))) for rid in ids])
        bad = [rid for rid, p in zip(ids, pop) if not p > 0]
        if bad:
            raise InputError(f"population offset must be positive; offending regions: {bad}")
        off = np.repeat(pop, T)
    else:
        off = np.ones(n * T)
    X = np.repeat(covariates.values[:, None, :], T, axis=1)
    if yearly_overrides:
        for (rid, yr), vals in yearly_overrides.items():
            if rid not in pos or yr not in ypos:
                raise InputError(f"covariate override for unknown region-year ({rid}, {yr})")
            for name, v in vals.items():
                if name not in covariates.names:
                    raise InputError(f"covariate override names unknown covariate {name!r}")
                X[pos[rid], ypos[yr], covariates.names.index(name)] = float(v)
    ri, ti = np.meshgrid(np.arange(n), np.arange(T), indexing="ij")
    return PanelDataset(region_index=ri.ravel(), year_index=ti.ravel(), counts=y.ravel(),
                        offset=off, covariates=X.reshape(n * T, -1),
                        covariate_names=covariates.names, region_ids=ids, years=years)


# --- trends ----------------------------------------------------------------------

def annual_totals(events: Sequence[EventRecord], years: Sequence[int]) -> list:
    """``(year, total)`` for every year, with explicit zeros."""
    c = Counter(e.year for e in events)
    return [(y, c.get(y, 0)) for y in years]


def top_k_regions(events: Sequence[EventRecord], years: Sequence[int], k: int = 5) -> dict:
    """Annual series for the ``k`` regions with most events (ties by id)."""
    totals = Counter(e.region_id for e in events)
    top = sorted(totals, key=lambda r: (-totals[r], r))[:k]
    per = Counter((e.region_id, e.year) for e in events)
    return {r: [(y, per.get((r, y), 0)) for y in years] for r in top}


def status_series(events: Sequence[EventRecord], years: Sequence[int]) -> dict:
    """Annual series per indigenous-status value."""
    if any(e.indigenous_status is None for e in events):
        raise InputError("grouping by status needs an indigenous_status value on every event")
    per = Counter((e.indigenous_status, e.year) for e in events)
    statuses = sorted({e.indigenous_status for e in events})
    return {s: [(y, per.get((s, y), 0)) for y in years] for s in statuses}


# --- readers ---------------------------------------------------------------------

def _require(header, cols, path):
    missing = [c for c in cols if c not in header]
    if missing:
        raise InputError(f"{path}: missing column(s) {missing}")
    return {c: header.index(c) for c in header}


def _num(value, path, line, col, kind=float):
    try:
        v = kind(value)
    except (TypeError, ValueError):
        raise InputError(f"{path}:{line}: column {col!r}: cannot parse {value!r}") from None
    if kind is float and not math.isfinite(v):
        raise InputError(f"{path}:{line}: column {col!r}: non-finite value")
    return v


def _wrap(path, line, fn):
    try:
        return fn()
    except InputError as exc:
        raise InputError(f"{path}:{line}: {exc}") from None


def read_points_csv(path) -> list:
    header, rows = _io.read_csv_numbered(path)
    ix = _require(header, ["longitude", "latitude", "category"], path)
    out = []
    for line, row in rows:
        lon = _num(row[ix["longitude"]], path, line, "longitude")
        lat = _num(row[ix["latitude"]], path, line, "latitude")
        cat = row[ix["category"]].strip().lower()
        sid = row[ix["source_id"]] if "source_id" in ix else ""
        out.append(_wrap(path, line, lambda: PointRecord(lon, lat, cat, sid)))
    return out


def _upper(value, path, line):
    v = value.strip().lower()
    if v in ("", "open", "inf", "+"):
        return None
    return _num(v, path, line, "upper")


def read_income_csv(brackets_path, special_path=None) -> IncomeBracketTable:
    """Read bracket rows ``region_id, lower, upper, frequency`` (blank upper = open top)
    and optional special categories ``region_id, negative, nil, not_stated``."""
    header, rows = _io.read_csv_numbered(brackets_path)
    ix = _require(header, ["region_id", "lower", "upper", "frequency"], brackets_path)
    per: dict = {}
    first_line: dict = {}
    for line, row in rows:
        rid = row[ix["region_id"]].strip()
        per.setdefault(rid, []).append((
            _num(row[ix["lower"]], brackets_path, line, "lower"),
            _upper(row[ix["upper"]], brackets_path, line),
            _num(row[ix["frequency"]], brackets_path, line, "frequency"),
        ))
        first_line.setdefault(rid, line)
    special = {}
    if special_path is not None:
        sh, srows = _io.read_csv_numbered(special_path)
        six = _require(sh, ["region_id", "negative", "nil", "not_stated"], special_path)
        for line, row in srows:
            special[row[six["region_id"]].strip()] = tuple(
                _num(row[six[c]], special_path, line, c, int) for c in ("negative", "nil", "not_stated"))
    out = {}
    for rid in sorted(set(per) | set(special)):
        brackets = sorted(per.get(rid, []), key=lambda b: b[0])
        neg, nil, ns = special.get(rid, (0, 0, 0))
        out[rid] = _wrap(brackets_path, first_line.get(rid, 0),
                         lambda: IncomeBrackets(tuple(brackets), neg, nil, ns))
    return IncomeBracketTable(out)


def read_ee_records_csv(path) -> dict:
    """Read ``region_id, year, count`` rows into a ``(region_id, year) -> count`` map."""
    header, rows = _io.read_csv_numbered(path)
    ix = _require(header, ["region_id", "year", "count"], path)
    out: Counter = Counter()
    for line, row in rows:
        c = _num(row[ix["count"]], path, line, "count", int)
        if c < 0:
            raise InputError(f"{path}:{line}: negative count")
        out[(row[ix["region_id"]].strip(), _num(row[ix["year"]], path, line, "year", int))] += c
    return dict(out)


def read_events_csv(path) -> list:
    """Read raw event rows ``region_id, date[, indigenous_status][, age_band]``."""
    header, rows = _io.read_csv_numbered(path)
    ix = _require(header, ["region_id", "date"], path)
    out = []
    for line, row in rows:
        try:
            d = _dt.date.fromisoformat(row[ix["date"]].strip())
        except ValueError:
            raise InputError(f"{path}:{line}: bad date {row[ix['date']]!r}") from None
        status = (row[ix["indigenous_status"]].strip() or None) if "indigenous_status" in ix else None
        band = (row[ix["age_band"]].strip() or None) if "age_band" in ix else None
        out.append(EventRecord(row[ix["region_id"]].strip(), d, status, band))
    return out


def read_census_csv(path) -> tuple:
    """Read ``region_id, population, <covariates...>``.

    Column kinds are inferred: ``share`` for names ending in ``_share``,
    ``count`` for non-negative integer columns, ``real`` otherwise. Empty
    cells are missing values. Returns ``(population, table)``.
    """
    header, rows = _io.read_csv_numbered(path)
    ix = _require(header, ["region_id", "population"], path)
    names = [h for h in header if h not in ("region_id", "population")]
    ids, pops, vals = [], {}, []
    for line, row in rows:
        rid = row[ix["region_id"]].strip()
        ids.append(rid)
        pops[rid] = _num(row[ix["population"]], path, line, "population")
        vals.append([float("nan") if row[ix[c]].strip() == "" else _num(row[ix[c]], path, line, c)
                     for c in names])
    if len(set(ids)) != len(ids):
        raise InputError(f"{path}: duplicate region ids")
    v = np.array(vals, dtype=float).reshape(len(ids), len(names))
    kinds = []
    for j, c in enumerate(names):
        col = v[:, j][np.isfinite(v[:, j])]
        if c.endswith("_share"):
            kinds.append("share")
        elif col.size and np.all(col == np.round(col)) and np.all(col >= 0):
            kinds.append("count")
        else:
            kinds.append("real")
    table = CovariateTable(tuple(ids), tuple(names), v, np.zeros_like(v, dtype=bool), tuple(kinds))
    return pops, table


def read_missing_services_csv(path) -> set:
    """Read ``region_id, category`` pairs whose service counts are unavailable."""
    header, rows = _io.read_csv_numbered(path)
    ix = _require(header, ["region_id", "category"], path)
    out = set()
    for line, row in rows:
        cat = row[ix["category"]].strip().lower()
        if cat not in CATEGORIES:
            raise InputError(f"{path}:{line}: unknown category {cat!r}")
        out.add((row[ix["region_id"]].strip(), cat))
    return out


def read_covariate_overrides_csv(path) -> dict:
    """Read ``region_id, year, <covariates...>`` into ``(region_id, year) -> {name: value}``."""
    header, rows = _io.read_csv_numbered(path)
    ix = _require(header, ["region_id", "year"], path)
    names = [h for h in header if h not in ("region_id", "year")]
    out = {}
    for line, row in rows:
        key = (row[ix["region_id"]].strip(), _num(row[ix["year"]], path, line, "year", int))
        out[key] = {c: _num(row[ix[c]], path, line, c) for c in names if row[ix[c]].strip() != ""}
    return out


# --- pipeline --------------------------------------------------------------------

@dataclass(frozen=True)
class FusionResult:
    panel: PanelDataset
    covariates: CovariateTable
    aggregation: Optional[PointAggregation]
    report: dict = field(default_factory=dict)


def fuse(regions: Sequence[Region], census: CovariateTable, population: Mapping[str, float],
         ee_counts: Mapping, years: Sequence[int], points: Sequence[PointRecord] = (),
         income: Optional[IncomeBracketTable] = None, missing_services=(),
         yearly_overrides=None, open_top_multiplier: float = 1.5,
         offset_source: str = "population") -> FusionResult:
    """Run the full fusion: aggregate points, estimate income, impute, build the panel.

    Service counts become covariates ``n_<category>``; cells listed in
    ``missing_services`` are treated as unobserved and imputed. Average
    weekly income becomes ``avg_income``; regions with no adjusted
    population get the median of the others, flagged as imputed.
    """
    validate_regions(regions)
    ids = tuple(sorted(r.id for r in regions))
    census_ids = set(census.region_ids)
    if census_ids != set(ids):
        raise InputError(f"census regions differ from the geometry: "
                         f"{sorted(census_ids ^ set(ids))[:10]}")
    order = [census.region_ids.index(r) for r in ids]
    table = CovariateTable(ids, census.names, census.values[order], census.imputed[order], census.kinds)
    pop = np.array([float(population[r]) for r in ids])
    report: dict = {"imputed_cells": [], "degraded_imputation": [], "unassigned_points": {}}

    agg = None
    if points:
        agg = aggregate_points(points, regions)
        report["unassigned_points"] = dict(agg.unassigned)
        unknown = sorted({r for r, _ in missing_services} - set(ids))
        if unknown:
            raise InputError(f"missing-service entries for unknown regions: {unknown}")
        for cat in CATEGORIES:
            col = np.array([agg.counts[r][cat] for r in ids], dtype=float)
            for k, rid in enumerate(ids):
                if (rid, cat) in missing_services:
                    col[k] = np.nan
            res = impute_missing_counts(col, pop)
            name = f"n_{cat}"
            table = table.with_column(name, res.values, "count", res.imputed)
            report["imputed_cells"].extend((ids[k], name) for k in np.flatnonzero(res.imputed))
            if res.degraded:
                report["degraded_imputation"].append(name)

    if income is not None:
        avg = estimate_average_income(income, open_top_multiplier)
        col = np.array([avg.get(r, float("nan")) for r in ids])
        miss = ~np.isfinite(col)
        if miss.all():
            raise InputError("no region has a usable income distribution")
        col[miss] = np.median(col[~miss])
        table = table.with_column("avg_income", col, "real", miss)
        report["imputed_cells"].extend((ids[k], "avg_income") for k in np.flatnonzero(miss))

    # census gaps that remain are count-like columns imputed from population
    for j, name in enumerate(table.names):
        col = table.values[:, j]
        if np.all(np.isfinite(col)):
            continue
        if table.kinds[j] == "count":
            res = impute_missing_counts(col, pop)
            table = table.replace_column(name, res.values, res.imputed)
            if res.degraded:
                report["degraded_imputation"].append(name)
            flags = res.imputed
        else:
            flags = ~np.isfinite(col)
            filled = col.copy()
            filled[flags] = np.median(col[~flags])
            table = table.replace_column(name, filled, flags)
        report["imputed_cells"].extend((ids[k], name) for k in np.flatnonzero(flags))

    panel = build_panel(ee_counts, table, years, population=dict(zip(ids, pop)),
                        offset_source=offset_source, yearly_overrides=yearly_overrides)
    return FusionResult(panel=panel, covariates=table, aggregation=agg, report=report)
