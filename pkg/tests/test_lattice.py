import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from arealrisk.errors import InputError
from arealrisk.lattice import (
    AdjacencyGraph,
    Region,
    build_adjacency,
    graph_from_edges,
    grid_regions,
    neighbors,
    read_edge_list,
    read_geojson,
    regions_to_geojson,
    st_neighborhood,
    subset_graph,
    write_edge_list,
    write_matrix,
)


def square(x0, y0, size=1.0, rid="a"):
    ring = [(x0, y0), (x0 + size, y0), (x0 + size, y0 + size), (x0, y0 + size), (x0, y0)]
    return Region(rid, (ring,), 10)


def grid_oracle_edges(nrows, ncols):
    """All pairs of cells at Manhattan distance 1 (rook) by enumeration."""
    cells = [(r, c) for r in range(nrows) for c in range(ncols)]
    out = set()
    for a, (r1, c1) in enumerate(cells):
        for b, (r2, c2) in enumerate(cells):
            if a < b and abs(r1 - r2) + abs(c1 - c2) == 1:
                out.add((a, b))
    return out


class TestRegion:
    def test_unclosed_ring_rejected(self):
        with pytest.raises(InputError):
            Region("x", ([(0, 0), (1, 0), (1, 1), (0, 1)],))

    def test_short_ring_rejected(self):
        with pytest.raises(InputError):
            Region("x", ([(0, 0), (1, 0), (0, 0)],))

    def test_negative_population_rejected(self):
        with pytest.raises(InputError):
            square(0, 0).__class__("x", square(0, 0).geometry, -1)


class TestBuildAdjacency:
    def test_shared_edge_queen(self):
        g = build_adjacency([square(0, 0, rid="a"), square(1, 0, rid="b")])
        assert g.w[0, 1] == 1 and g.w_total == 2

    def test_corner_touch_queen_vs_rook(self):
        regs = [square(0, 0, rid="a"), square(1, 1, rid="b")]
        assert build_adjacency(regs, "queen").w[0, 1] == 1
        assert build_adjacency(regs, "rook").w[0, 1] == 0

    def test_rook_grid_matches_enumeration(self):
        g = build_adjacency(grid_regions(3, 3), rule="rook")
        assert set(g.edges()) == grid_oracle_edges(3, 3)
        assert g.w_total == 24
        assert len(g.neighbor_lists[4]) == 4
        for corner in (0, 2, 6, 8):
            assert len(g.neighbor_lists[corner]) == 2

    def test_queen_grid_has_diagonals(self):
        g = build_adjacency(grid_regions(3, 3), rule="queen")
        assert len(g.neighbor_lists[4]) == 8

    def test_tolerance_snaps_near_vertices(self):
        a = square(0, 0, rid="a")
        b = square(1 + 1e-7, 0, rid="b")
        assert build_adjacency([a, b], tolerance=1e-9).w_total == 0
        assert build_adjacency([a, b], tolerance=1e-6).w_total == 2

    def test_island_reported(self, caplog):
        g = build_adjacency([square(0, 0, rid="a"), square(1, 0, rid="b"), square(5, 5, rid="c")])
        assert g.islands == ("c",)
        assert neighbors(g, 2) == set()
        assert "island" in caplog.text

    def test_duplicate_ids_rejected(self):
        with pytest.raises(InputError):
            build_adjacency([square(0, 0, rid="a"), square(1, 0, rid="a")])

    def test_empty_rejected(self):
        with pytest.raises(InputError):
            build_adjacency([])

    def test_bad_rule_and_tolerance(self):
        with pytest.raises(InputError):
            build_adjacency([square(0, 0)], rule="bishop")
        with pytest.raises(InputError):
            build_adjacency([square(0, 0)], tolerance=-1)

    def test_multipolygon_uses_union_of_rings(self):
        parts = square(0, 0).geometry + square(3, 0).geometry
        multi = Region("m", parts, 5)
        g = build_adjacency([multi, square(4, 0, rid="z"), square(1, 0, rid="y")], rule="rook")
        assert neighbors(g, 0) == {1, 2}

    def test_order_invariance(self, rng):
        regs = grid_regions(4, 5)
        g = build_adjacency(regs, "queen")
        perm = rng.permutation(len(regs))
        gp = build_adjacency([regs[k] for k in perm], "queen")
        assert np.array_equal(gp.w, g.w[np.ix_(perm, perm)])

    @given(st.integers(1, 5), st.integers(1, 5))
    @settings(max_examples=25, deadline=None)
    def test_invariants_and_rook_subset_queen(self, nr, nc):
        regs = grid_regions(nr, nc)
        q = build_adjacency(regs, "queen")
        r = build_adjacency(regs, "rook")
        for g in (q, r):
            assert np.array_equal(g.w, g.w.T)
            assert not np.diag(g.w).any()
            assert g.w_total % 2 == 0
            assert g.w_total == sum(len(nl) for nl in g.neighbor_lists)
        assert np.all(r.w <= q.w)


class TestNeighbourhoods:
    def test_two_node(self):
        g = graph_from_edges(2, [(0, 1)])
        assert neighbors(g, 0) == {1}

    def test_out_of_range(self):
        g = graph_from_edges(2, [(0, 1)])
        with pytest.raises(InputError):
            neighbors(g, 2)
        with pytest.raises(InputError):
            neighbors(g, -1)

    def test_grid_center(self):
        g = build_adjacency(grid_regions(3, 3), rule="rook")
        assert neighbors(g, 4) == {1, 3, 5, 7}

    def test_lagged_neighbourhood_example(self):
        # region 1 with neighbours {3, 7, 8} in year 5
        g = graph_from_edges(9, [(1, 3), (1, 7), (1, 8)])
        assert st_neighborhood(g, 1, 5) == {(3, 4), (7, 4), (8, 4)}

    def test_lagged_neighbourhood_edge_cases(self):
        g = graph_from_edges(3, [(0, 1)])
        assert st_neighborhood(g, 2, 4) == set()
        assert st_neighborhood(g, 0, 0) == set()


class TestSubset:
    def test_exclude_none(self):
        g = build_adjacency(grid_regions(3, 3))
        assert subset_graph(g, set()) == g

    def test_keep_two_connected(self):
        g = build_adjacency(grid_regions(3, 3), "rook")
        keep = {g.region_ids[0], g.region_ids[1]}
        sub = subset_graph(g, set(g.region_ids) - keep)
        assert sub.n == 2 and sub.w_total == 2

    def test_no_rewiring(self):
        g = graph_from_edges(3, [(0, 1), (1, 2)], ids=("A", "B", "C"))
        sub = subset_graph(g, {"B"})
        assert sub.region_ids == ("A", "C")
        assert sub.w_total == 0

    def test_unknown_id(self):
        g = graph_from_edges(2, [(0, 1)])
        with pytest.raises(InputError):
            subset_graph(g, {"nope"})

    def test_idempotent(self):
        g = build_adjacency(grid_regions(3, 3))
        ex = {g.region_ids[4]}
        once = subset_graph(g, ex)
        assert subset_graph(once, set()) == once
        assert subset_graph(g, ex) == once


class TestGraphType:
    def test_rejects_asymmetric(self):
        with pytest.raises(InputError):
            AdjacencyGraph(("a", "b"), [[0, 1], [0, 0]])

    def test_rejects_self_loop(self):
        with pytest.raises(InputError):
            AdjacencyGraph(("a", "b"), [[1, 0], [0, 0]])

    def test_immutable(self):
        g = graph_from_edges(2, [(0, 1)])
        with pytest.raises(ValueError):
            g.w[0, 1] = 0


class TestIO:
    def test_geojson_roundtrip(self, tmp_path):
        regs = grid_regions(2, 2)
        path = tmp_path / "g.geojson"
        path.write_text(json.dumps(regions_to_geojson(regs)))
        back = read_geojson(path)
        assert [r.id for r in back] == [r.id for r in regs]
        assert build_adjacency(back) == build_adjacency(regs)

    def test_multipolygon_geojson(self, tmp_path):
        fc = {"type": "FeatureCollection", "features": [{
            "type": "Feature", "properties": {"id": "m", "population": 3},
            "geometry": {"type": "MultiPolygon", "coordinates": [
                [[[0, 0], [1, 0], [1, 1], [0, 1], [0, 0]]],
                [[[2, 0], [3, 0], [3, 1], [2, 1], [2, 0]]]]}}]}
        path = tmp_path / "m.geojson"
        path.write_text(json.dumps(fc))
        (r,) = read_geojson(path)
        assert len(r.geometry) == 2 and r.population == 3

    def test_edge_list_and_matrix(self, tmp_path):
        g = build_adjacency(grid_regions(2, 2), "rook")
        write_edge_list(g, tmp_path / "e.csv", {"seed": 1})
        assert read_edge_list(tmp_path / "e.csv", g.region_ids) == g
        write_matrix(g, tmp_path / "m.csv")
        lines = (tmp_path / "m.csv").read_text().splitlines()
        assert lines[0].split(",") == list(g.region_ids)
        assert len(lines) == 5
