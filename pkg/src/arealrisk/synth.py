"""Seeded synthetic scenarios drawn from the separable CAR count model.

Regions are Voronoi cells of random points in the unit square. The
seed points are mirrored across the four sides before tessellating, so
every original cell is bounded, lies inside the square, and neighbouring
cells share vertex coordinates exactly. Spatial effects follow an
intrinsic CAR prior on the resulting queen graph, temporal effects a
first-order random walk, and counts are negative binomial.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import Voronoi

from .errors import InputError
from .glm import PanelDataset
from .lattice import AdjacencyGraph, Region, build_adjacency


@dataclass(frozen=True)
class SyntheticScenario:
    """Parameters of a synthetic panel.

    Parameters
    ----------
    n_regions, n_years : int
    beta : tuple of float
        Intercept followed by one slope per covariate.
    tau_spatial, tau_temporal : float
        Precisions of the ICAR and RW1 effects. ``inf`` switches a block off.
    theta : float
        NB size; ``inf`` gives Poisson counts.
    offset_log_mean, offset_log_sd : float
        Offsets are log-normal per region and constant over years; they
        play the role of expected counts.
    covariate_correlation : array_like or None
        Correlation of the standard normal covariates. Defaults to the
        identity of size ``len(beta) - 1``.
    time_varying_covariates : bool
        Draw covariates per region-year instead of once per region.
    seed : int
    start_year : int
    """

    n_regions: int = 30
    n_years: int = 10
    beta: tuple = (0.3, -0.5)
    tau_spatial: float = 4.0
    tau_temporal: float = 25.0
    theta: float = 3.0
    offset_log_mean: float = float(np.log(10.0))
    offset_log_sd: float = 0.5
    covariate_correlation: Optional[tuple] = None
    time_varying_covariates: bool = True
    seed: int = 0
    start_year: int = 2009

    def __post_init__(self):
        if self.n_regions < 3 or self.n_years < 1:
            raise InputError("need at least 3 regions and 1 year")
        object.__setattr__(self, "beta", tuple(float(b) for b in self.beta))
        if len(self.beta) < 1:
            raise InputError("beta needs at least an intercept")
        for name in ("tau_spatial", "tau_temporal", "theta"):
            if not getattr(self, name) > 0:
                raise InputError(f"{name} must be positive")
        if not self.offset_log_sd >= 0:
            raise InputError("offset_log_sd must be non-negative")
        p = len(self.beta) - 1
        corr = np.eye(p) if self.covariate_correlation is None else np.asarray(
            self.covariate_correlation, dtype=float)
        if corr.shape != (p, p):
            raise InputError(f"covariate correlation must be {p}x{p}")
        if not np.allclose(corr, corr.T) or not np.allclose(np.diag(corr), 1.0):
            raise InputError("covariate correlation must be symmetric with unit diagonal")
        if p and np.linalg.eigvalsh(corr)[0] < -1e-10:
            raise InputError("covariate correlation matrix is not positive semi-definite")
        object.__setattr__(self, "covariate_correlation", tuple(map(tuple, corr)))

    @property
    def n_covariates(self) -> int:
        return len(self.beta) - 1

    @property
    def covariate_names(self) -> tuple:
        return tuple(f"x{k + 1}" for k in range(self.n_covariates))

    @property
    def years(self) -> tuple:
        return tuple(range(self.start_year, self.start_year + self.n_years))


@dataclass(frozen=True)
class SyntheticBundle:
    scenario: SyntheticScenario
    regions: tuple
    graph: AdjacencyGraph
    panel: PanelDataset
    spatial: np.ndarray
    temporal: np.ndarray
    mu: np.ndarray = field(repr=False)

    def truth(self) -> dict:
        sc = asdict(self.scenario)
        sc["covariate_correlation"] = [list(r) for r in self.scenario.covariate_correlation]
        for key in ("tau_spatial", "tau_temporal", "theta"):
            if not np.isfinite(sc[key]):
                sc[key] = "inf"
        return {
            "scenario": sc,
            "beta": list(self.scenario.beta),
            "spatial": {rid: float(v) for rid, v in zip(self.graph.region_ids, self.spatial)},
            "temporal": {str(y): float(v) for y, v in zip(self.scenario.years, self.temporal)},
        }


def voronoi_regions(n: int, rng, prefix: str = "R") -> list[Region]:
    """Voronoi cells of ``n`` uniform points clipped to the unit square."""
    pts = rng.random((n, 2))
    mirrored = [pts,
                np.column_stack([-pts[:, 0], pts[:, 1]]),
                np.column_stack([2.0 - pts[:, 0], pts[:, 1]]),
                np.column_stack([pts[:, 0], -pts[:, 1]]),
                np.column_stack([pts[:, 0], 2.0 - pts[:, 1]])]
    vor = Voronoi(np.vstack(mirrored))
    width = len(str(n))
    regions = []
    for i in range(n):
        idx = vor.regions[vor.point_region[i]]
        if -1 in idx or len(idx) < 3:
            raise InputError("degenerate Voronoi cell; try another seed")
        verts = vor.vertices[idx]
        c = verts.mean(axis=0)
        order = np.argsort(np.arctan2(verts[:, 1] - c[1], verts[:, 0] - c[0]))
        ring = verts[order]
        ring = np.vstack([ring, ring[:1]])
        regions.append(Region(f"{prefix}{i + 1:0{width}d}", (ring,), 0))
    return regions


def constrained_gmrf_sample(precision, tau, rng, tol=1e-9):
    """Draw ``x ~ N(0, (tau Q)^+)`` restricted to the range of ``Q``.

    The result is orthogonal to the null space of ``Q``, so for a
    connected graph Laplacian it sums to zero.
    """
    if not np.isfinite(tau):
        return np.zeros(precision.shape[0])
    ev, vec = np.linalg.eigh(precision)
    keep = ev > tol * ev.max()
    z = rng.standard_normal(int(keep.sum()))
    return vec[:, keep] @ (z / np.sqrt(tau * ev[keep]))


def _covariates(sc: SyntheticScenario, rng):
    p = sc.n_covariates
    n, T = sc.n_regions, sc.n_years
    if p == 0:
        return np.zeros((n, T, 0))
    corr = np.asarray(sc.covariate_correlation)
    ev, vec = np.linalg.eigh(corr)
    root = vec * np.sqrt(np.clip(ev, 0, None))
    if sc.time_varying_covariates:
        z = rng.standard_normal((n, T, p))
    else:
        z = np.repeat(rng.standard_normal((n, 1, p)), T, axis=1)
    return z @ root.T


def simulate(scenario: SyntheticScenario) -> SyntheticBundle:
    """Draw a synthetic bundle. Identical scenarios give identical bundles."""
    sc = scenario
    geo_rng, par_rng, cnt_rng = (np.random.default_rng(s)
                                 for s in np.random.SeedSequence(sc.seed).spawn(3))
    regions = voronoi_regions(sc.n_regions, geo_rng)
    offsets = np.exp(sc.offset_log_mean + sc.offset_log_sd * geo_rng.standard_normal(sc.n_regions))
    regions = [Region(r.id, r.geometry, int(round(o * 1000))) for r, o in zip(regions, offsets)]
    graph = build_adjacency(regions, "queen")

    q_s = graph.laplacian() + np.diag([1.0 if k in graph.islands else 0.0 for k in range(graph.n)])
    s = constrained_gmrf_sample(q_s, sc.tau_spatial, par_rng)
    T = sc.n_years
    path = np.zeros((T, T))
    path[np.arange(T - 1), np.arange(1, T)] = 1.0
    path = path + path.T
    g = constrained_gmrf_sample(np.diag(path.sum(axis=1)) - path, sc.tau_temporal, par_rng) \
        if T > 1 else np.zeros(1)
    X = _covariates(sc, par_rng)

    beta = np.asarray(sc.beta)
    eta = np.log(offsets)[:, None] + beta[0] + X @ beta[1:] + s[:, None] + g[None, :]
    mu = np.exp(eta)
    if np.isfinite(sc.theta):
        lam = cnt_rng.gamma(sc.theta, mu / sc.theta)
    else:
        lam = mu
    y = cnt_rng.poisson(lam)

    n = sc.n_regions
    ri, ti = np.meshgrid(np.arange(n), np.arange(T), indexing="ij")
    panel = PanelDataset(
        region_index=ri.ravel(), year_index=ti.ravel(), counts=y.ravel(),
        offset=np.repeat(offsets, T), covariates=X.reshape(n * T, -1),
        covariate_names=sc.covariate_names, region_ids=tuple(r.id for r in regions),
        years=sc.years,
    )
    return SyntheticBundle(scenario=sc, regions=tuple(regions), graph=graph, panel=panel,
                           spatial=s, temporal=g, mu=mu)


# --- bundle files ----------------------------------------------------------------

MAX_EVENT_ROWS = 200_000
SERVICE_RATE = 1.0 / 800.0
INCOME_EDGES = (1, 150, 300, 400, 500, 650, 800, 1000, 1250, 1500, 1750, 2000, 3000)
STATUSES = ("indigenous", "non_indigenous")
AGE_BANDS = ("under_18", "18_64", "65_plus")


def _points_in_region(region: Region, k: int, rng):
    from .fusion import point_in_polygon

    x0, y0, x1, y1 = region.bounds
    out = []
    while len(out) < k:
        x, y = rng.uniform(x0, x1), rng.uniform(y0, y1)
        if point_in_polygon((x, y), region.geometry):
            out.append((x, y))
    return out


def bundle_inputs(bundle: SyntheticBundle):
    """Raw fusion inputs consistent with the bundle's panel.

    Returns a dict of CSV tables ``name -> (header, rows)``: service
    points (a few outside every region), income brackets and special
    categories, census, per-year covariate overrides, aggregated event
    counts and, when small enough, raw event rows.
    """
    from .fusion import CATEGORIES

    sc = bundle.scenario
    rng = np.random.default_rng(np.random.SeedSequence(sc.seed).spawn(4)[3])
    regions = bundle.regions
    p = bundle.panel
    points = []
    for r in regions:
        for cat in CATEGORIES:
            k = rng.poisson(max(r.population, 1) * SERVICE_RATE)
            for j, (x, y) in enumerate(_points_in_region(r, k, rng)):
                points.append([x, y, cat, f"{r.id}-{cat}-{j}"])
    for j in range(3):
        points.append([1.5 + j, 1.5, CATEGORIES[j], f"outside-{j}"])

    income, special = [], []
    for r in regions:
        weights = rng.dirichlet(np.ones(len(INCOME_EDGES)))
        freq = rng.multinomial(max(r.population // 2, 1), weights)
        for k, lo in enumerate(INCOME_EDGES):
            hi = INCOME_EDGES[k + 1] - 1 if k + 1 < len(INCOME_EDGES) else ""
            income.append([r.id, lo, hi, int(freq[k])])
        special.append([r.id, int(rng.poisson(3)), int(rng.poisson(10)), int(rng.poisson(5))])

    names = sc.covariate_names
    grid = {nm: p.grid(p.covariates[:, k]) for k, nm in enumerate(names)}
    census = [[r.id, r.population] + [float(grid[nm][i, 0]) for nm in names]
              for i, r in enumerate(regions)]
    overrides = []
    if sc.time_varying_covariates and names:
        for i, r in enumerate(regions):
            for t, yr in enumerate(sc.years):
                overrides.append([r.id, yr] + [float(grid[nm][i, t]) for nm in names])

    y = p.grid()
    ee = [[r.id, yr, int(y[i, t])] for i, r in enumerate(regions) for t, yr in enumerate(sc.years)
          if y[i, t] > 0]
    events = None
    if y.sum() <= MAX_EVENT_ROWS:
        events = []
        for i, r in enumerate(regions):
            for t, yr in enumerate(sc.years):
                for _ in range(int(y[i, t])):
                    day = int(rng.integers(0, 365))
                    date = np.datetime64(f"{yr}-01-01") + np.timedelta64(day, "D")
                    events.append([r.id, str(date), STATUSES[int(rng.random() < 0.8)],
                                   AGE_BANDS[int(rng.integers(0, 3))]])
    tables = {
        "points.csv": (["longitude", "latitude", "category", "source_id"], points),
        "income.csv": (["region_id", "lower", "upper", "frequency"], income),
        "income_special.csv": (["region_id", "negative", "nil", "not_stated"], special),
        "census.csv": (["region_id", "population"] + list(names), census),
        "ee_records.csv": (["region_id", "year", "count"], ee),
    }
    if overrides:
        tables["covariates_by_year.csv"] = (["region_id", "year"] + list(names), overrides)
    if events is not None:
        tables["events.csv"] = (["region_id", "date", "indigenous_status", "age_band"], events)
    return tables


def write_bundle(bundle: SyntheticBundle, out_dir, metadata=None) -> list:
    """Write geometry, adjacency, panel, raw inputs and ``truth.json``.

    Returns the written file names. Output is a pure function of the
    scenario and ``metadata``.
    """
    import json
    import os

    from . import _io
    from .glm import write_panel_csv
    from .lattice import regions_to_geojson, write_edge_list

    os.makedirs(out_dir, exist_ok=True)
    meta = dict(metadata or {})
    written = []

    def path(name):
        written.append(name)
        return os.path.join(out_dir, name)

    geo = regions_to_geojson(bundle.regions)
    if meta:
        geo["metadata"] = meta
    _io.atomic_write_text(path("geometry.geojson"), json.dumps(geo, indent=1, sort_keys=True) + "\n")
    write_edge_list(bundle.graph, path("adjacency.csv"), meta)
    write_panel_csv(bundle.panel, path("panel.csv"), meta)
    for name, (header, rows) in bundle_inputs(bundle).items():
        _io.write_csv(path(name), header, rows, meta)
    truth = bundle.truth()
    if meta:
        truth["metadata"] = meta
    _io.atomic_write_text(path("truth.json"), json.dumps(truth, indent=1, sort_keys=True) + "\n")
    return written
