import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial import Voronoi

from arealrisk.errors import InputError
from arealrisk.fusion import aggregate_points, read_census_csv, read_points_csv
from arealrisk.glm import read_panel_csv
from arealrisk.lattice import build_adjacency, read_geojson
from arealrisk.synth import (SyntheticScenario, constrained_gmrf_sample, simulate,
                             voronoi_regions, write_bundle)


def ridge_edges(n, seed):
    pts = np.random.default_rng(seed).random((n, 2))
    mirrored = np.vstack([pts, np.column_stack([-pts[:, 0], pts[:, 1]]),
                          np.column_stack([2 - pts[:, 0], pts[:, 1]]),
                          np.column_stack([pts[:, 0], -pts[:, 1]]),
                          np.column_stack([pts[:, 0], 2 - pts[:, 1]])])
    vor = Voronoi(mirrored)
    out = set()
    for (a, b), verts in zip(vor.ridge_points, vor.ridge_vertices):
        if a < n and b < n and -1 not in verts:
            length = np.linalg.norm(vor.vertices[verts[0]] - vor.vertices[verts[1]])
            if length > 1e-9:
                out.add((min(a, b), max(a, b)))
    return out


@settings(max_examples=15, deadline=None)
@given(n=st.integers(5, 40), seed=st.integers(0, 10_000))
def test_voronoi_adjacency_matches_ridges(n, seed):
    regions = voronoi_regions(n, np.random.default_rng(seed))
    g = build_adjacency(regions, "rook")
    assert set(g.edges()) == ridge_edges(n, seed)


@settings(max_examples=10, deadline=None)
@given(n=st.integers(5, 30), seed=st.integers(0, 10_000))
def test_voronoi_cells_tile_unit_square(n, seed):
    regions = voronoi_regions(n, np.random.default_rng(seed))
    area = 0.0
    for r in regions:
        x, y = r.geometry[0][:, 0], r.geometry[0][:, 1]
        area += 0.5 * abs(np.dot(x[:-1], y[1:]) - np.dot(x[1:], y[:-1]))
        assert x.min() >= -1e-12 and x.max() <= 1 + 1e-12
        assert y.min() >= -1e-12 and y.max() <= 1 + 1e-12
    assert area == pytest.approx(1.0, abs=1e-9)


def test_same_seed_same_bundle():
    a = simulate(SyntheticScenario(seed=7))
    b = simulate(SyntheticScenario(seed=7))
    c = simulate(SyntheticScenario(seed=8))
    assert np.array_equal(a.panel.counts, b.panel.counts)
    assert np.array_equal(a.panel.covariates, b.panel.covariates)
    assert a.truth() == b.truth()
    assert not np.array_equal(a.panel.counts, c.panel.counts)


def test_poisson_limit_dispersion():
    sc = SyntheticScenario(n_regions=200, n_years=20, beta=(0.0,), tau_spatial=np.inf,
                           tau_temporal=np.inf, theta=1e6, offset_log_sd=0.0, seed=1)
    y = simulate(sc).panel.counts
    assert y.var(ddof=1) / y.mean() == pytest.approx(1.0, rel=0.10)


def test_large_spatial_precision_shrinks_effects():
    b = simulate(SyntheticScenario(tau_spatial=1e6, seed=2))
    assert np.max(np.abs(b.spatial)) < 0.05


def test_icar_effects_sum_to_zero():
    b = simulate(SyntheticScenario(seed=3))
    assert abs(b.spatial.sum()) < 1e-9
    assert abs(b.temporal.sum()) < 1e-9


def test_constrained_sample_covariance():
    # path graph on 3 nodes: sample covariance approaches the pseudo-inverse
    q = np.array([[1.0, -1, 0], [-1, 2, -1], [0, -1, 1]])
    rng = np.random.default_rng(0)
    draws = np.array([constrained_gmrf_sample(q, 2.0, rng) for _ in range(20000)])
    assert np.allclose(np.cov(draws.T), np.linalg.pinv(2.0 * q), atol=0.02)


def test_non_psd_correlation_rejected():
    bad = [[1.0, 0.9, -0.9], [0.9, 1.0, 0.9], [-0.9, 0.9, 1.0]]
    with pytest.raises(InputError, match="positive semi-definite"):
        SyntheticScenario(beta=(0, 1, 1, 1), covariate_correlation=bad)


@pytest.mark.parametrize("field,value", [("tau_spatial", 0.0), ("theta", -1.0), ("tau_temporal", 0.0)])
def test_non_positive_precision_rejected(field, value):
    with pytest.raises(InputError):
        SyntheticScenario(**{field: value})


def test_covariate_correlation_respected():
    corr = [[1.0, 0.7], [0.7, 1.0]]
    b = simulate(SyntheticScenario(n_regions=100, n_years=20, beta=(0, 0.1, 0.1),
                                   covariate_correlation=corr, seed=4))
    r = np.corrcoef(b.panel.covariates.T)[0, 1]
    assert r == pytest.approx(0.7, abs=0.05)


def test_time_constant_covariates():
    b = simulate(SyntheticScenario(time_varying_covariates=False, seed=5))
    grid = b.panel.grid(b.panel.covariates[:, 0])
    assert np.all(grid == grid[:, :1])


def test_bundle_files_consistent(tmp_path):
    b = simulate(SyntheticScenario(n_regions=12, n_years=4, seed=6))
    names = write_bundle(b, tmp_path, {"tool": "test"})
    for f in ("geometry.geojson", "adjacency.csv", "panel.csv", "truth.json", "census.csv",
              "ee_records.csv", "events.csv", "points.csv", "income.csv"):
        assert f in names and (tmp_path / f).exists()
    regions = read_geojson(tmp_path / "geometry.geojson")
    assert [r.id for r in regions] == list(b.graph.region_ids)
    panel = read_panel_csv(tmp_path / "panel.csv", region_ids=b.graph.region_ids)
    assert np.array_equal(panel.counts, b.panel.counts)
    truth = json.loads((tmp_path / "truth.json").read_text())
    assert truth["beta"] == list(b.scenario.beta)
    pop, table = read_census_csv(tmp_path / "census.csv")
    assert set(pop) == set(b.graph.region_ids)
    # every synthetic service point inside a region lands in that region
    agg = aggregate_points(read_points_csv(tmp_path / "points.csv"), regions)
    assert sum(agg.unassigned.values()) == 3
    events = (tmp_path / "events.csv").read_text().splitlines()
    assert len([ln for ln in events if not ln.startswith("#")]) - 1 == int(b.panel.counts.sum())


def test_bundle_writer_deterministic(tmp_path):
    for d in ("a", "b"):
        write_bundle(simulate(SyntheticScenario(n_regions=8, n_years=3, seed=9)), tmp_path / d)
    for f in (tmp_path / "a").iterdir():
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()
