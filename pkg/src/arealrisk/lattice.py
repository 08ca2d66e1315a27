"""Areal regions and binary contiguity graphs.

Regions carry polygon rings in longitude/latitude. Two regions are
neighbours under the *queen* rule when their boundaries share at least
one vertex (within a coordinate tolerance), and under the *rook* rule
when they share at least one edge, i.e. two consecutive vertices.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from . import _io
from .errors import InputError

log = logging.getLogger(__name__)

RULES = ("queen", "rook")


def _freeze(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Region:
    """A postcode-like areal unit.

    ``geometry`` is a tuple of closed rings, each an (k, 2) array of
    (longitude, latitude) with first vertex equal to last. Exterior
    rings, holes and the parts of a multi-polygon are all stored in the
    same flat tuple; containment uses the even-odd rule across all rings.
    """

    id: str
    geometry: tuple
    population: int = 0

    def __post_init__(self):
        rings = tuple(_freeze(r) for r in self.geometry)
        object.__setattr__(self, "geometry", rings)
        object.__setattr__(self, "id", str(self.id))
        if not rings:
            raise InputError(f"region {self.id!r} has no rings")
        for k, ring in enumerate(rings):
            if ring.ndim != 2 or ring.shape[1] != 2:
                raise InputError(f"region {self.id!r} ring {k} must be an (n, 2) array")
            if ring.shape[0] < 4:
                raise InputError(f"region {self.id!r} ring {k} has fewer than 4 vertices")
            if not np.array_equal(ring[0], ring[-1]):
                raise InputError(f"region {self.id!r} ring {k} is not closed")
        if self.population < 0:
            raise InputError(f"region {self.id!r} has negative population")

    @property
    def bounds(self):
        allv = np.vstack(self.geometry)
        return (*allv.min(axis=0), *allv.max(axis=0))


def validate_regions(regions: Sequence[Region]) -> None:
    if len(regions) == 0:
        raise InputError("empty region set")
    seen = set()
    dupes = []
    for r in regions:
        if r.id in seen:
            dupes.append(r.id)
        seen.add(r.id)
    if dupes:
        raise InputError(f"duplicate region ids: {sorted(set(dupes))}")


@dataclass(frozen=True, eq=False)
class AdjacencyGraph:
    """Symmetric 0/1 contiguity matrix over an ordered list of regions."""

    region_ids: tuple
    w: np.ndarray = field(repr=False)

    def __post_init__(self):
        ids = tuple(str(i) for i in self.region_ids)
        w = np.array(self.w, dtype=np.int8)
        n = len(ids)
        if w.shape != (n, n):
            raise InputError(f"adjacency matrix shape {w.shape} does not match {n} regions")
        if not np.array_equal(w, w.T):
            raise InputError("adjacency matrix is not symmetric")
        if np.any(np.diag(w) != 0):
            raise InputError("adjacency matrix has a nonzero diagonal")
        if not np.isin(w, (0, 1)).all():
            raise InputError("adjacency matrix must be binary")
        if len(set(ids)) != n:
            raise InputError("duplicate region ids in graph")
        w.setflags(write=False)
        object.__setattr__(self, "region_ids", ids)
        object.__setattr__(self, "w", w)

    def __eq__(self, other):
        if not isinstance(other, AdjacencyGraph):
            return NotImplemented
        return self.region_ids == other.region_ids and np.array_equal(self.w, other.w)

    def __hash__(self):
        return hash((self.region_ids, self.w.tobytes()))

    @property
    def n(self) -> int:
        return len(self.region_ids)

    @cached_property
    def neighbor_lists(self) -> tuple:
        return tuple(tuple(int(j) for j in np.flatnonzero(row)) for row in self.w)

    @cached_property
    def w_total(self) -> int:
        return int(self.w.sum())

    @cached_property
    def n_neighbors(self) -> np.ndarray:
        return self.w.sum(axis=1).astype(np.int64)

    @cached_property
    def islands(self) -> tuple:
        """Ids of regions without any neighbour."""
        return tuple(self.region_ids[i] for i in np.flatnonzero(self.n_neighbors == 0))

    @cached_property
    def csr(self):
        """``(indptr, indices)`` as contiguous ``intp`` arrays."""
        indptr = np.zeros(self.n + 1, dtype=np.intp)
        indptr[1:] = np.cumsum(self.n_neighbors)
        indices = np.concatenate(
            [np.asarray(nl, dtype=np.intp) for nl in self.neighbor_lists] or [np.zeros(0, np.intp)]
        ).astype(np.intp)
        return indptr, np.ascontiguousarray(indices)

    @cached_property
    def index(self) -> dict:
        return {rid: k for k, rid in enumerate(self.region_ids)}

    def components(self) -> np.ndarray:
        """Connected-component label per region."""
        _, labels = connected_components(self.w.astype(float), directed=False)
        return labels

    def laplacian(self) -> np.ndarray:
        """Graph Laplacian ``D - W`` as a float matrix."""
        w = self.w.astype(float)
        return np.diag(w.sum(axis=1)) - w

    def edges(self):
        """Undirected edges as sorted ``(i, j)`` index pairs with ``i < j``."""
        ii, jj = np.nonzero(np.triu(self.w, 1))
        return list(zip(ii.tolist(), jj.tolist()))


def _vertex_nodes(regions, tolerance):
    """Cluster all ring vertices within ``tolerance`` into shared nodes.

    Returns, per region, a list of per-ring node-id arrays (closing vertex
    dropped).
    """
    coords = []
    owner = []
    for r in regions:
        for ring in r.geometry:
            coords.append(ring[:-1])
            owner.append(ring.shape[0] - 1)
    allv = np.vstack(coords)
    pairs = cKDTree(allv).query_pairs(tolerance, output_type="ndarray")
    nv = allv.shape[0]
    if len(pairs):
        g = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(nv, nv))
        _, labels = connected_components(g, directed=False)
    else:
        labels = np.arange(nv)
    out = []
    pos = 0
    k = 0
    for r in regions:
        rings = []
        for _ in r.geometry:
            m = owner[k]
            rings.append(labels[pos:pos + m])
            pos += m
            k += 1
        out.append(rings)
    return out


def build_adjacency(regions: Sequence[Region], rule: str = "queen",
                    tolerance: float = 1e-9) -> AdjacencyGraph:
    """Construct the binary contiguity graph of ``regions``.

    Parameters
    ----------
    regions : sequence of Region
        Must be non-empty with unique ids.
    rule : {"queen", "rook"}
        ``queen`` links regions sharing any boundary vertex; ``rook``
        requires a shared edge (two consecutive shared vertices).
    tolerance : float
        Vertices closer than this (in degrees) are treated as identical.

    Returns
    -------
    AdjacencyGraph
        Rows and columns follow the order of ``regions``. Regions without
        neighbours are kept and listed in ``graph.islands``.
    """
    if rule not in RULES:
        raise InputError(f"unknown contiguity rule {rule!r}; expected one of {RULES}")
    if tolerance < 0:
        raise InputError("tolerance must be non-negative")
    validate_regions(regions)
    n = len(regions)
    nodes = _vertex_nodes(regions, tolerance)

    keys_by_region = []
    for rings in nodes:
        keys = set()
        for ring in rings:
            if rule == "queen":
                keys.update(int(v) for v in ring)
            else:
                nxt = np.roll(ring, -1)
                for a, b in zip(ring.tolist(), nxt.tolist()):
                    if a != b:
                        keys.add((a, b) if a < b else (b, a))
        keys_by_region.append(keys)

    owners = {}
    for i, keys in enumerate(keys_by_region):
        for key in keys:
            owners.setdefault(key, []).append(i)

    w = np.zeros((n, n), dtype=np.int8)
    for members in owners.values():
        if len(members) > 1:
            idx = np.unique(members)
            w[np.ix_(idx, idx)] = 1
    np.fill_diagonal(w, 0)
    graph = AdjacencyGraph(tuple(r.id for r in regions), w)
    if graph.islands:
        log.warning("%d island region(s) without neighbours: %s",
                    len(graph.islands), ", ".join(graph.islands))
    return graph


def neighbors(graph: AdjacencyGraph, region_index: int) -> set:
    """Indices ``j`` with ``w[region_index, j] == 1``."""
    if not 0 <= region_index < graph.n:
        raise InputError(f"region index {region_index} out of range [0, {graph.n})")
    return set(graph.neighbor_lists[region_index])


def st_neighborhood(graph: AdjacencyGraph, region_index: int, year_index: int) -> set:
    """Lagged spatio-temporal neighbourhood of ``(region, year)``.

    The spatial neighbours of the region paired with the preceding year.
    Year 0 has no predecessor and yields the empty set. Diagnostic only:
    the fitted model uses separable spatial and temporal effects.
    """
    nbrs = neighbors(graph, region_index)
    if year_index < 1:
        return set()
    return {(j, year_index - 1) for j in nbrs}


def subset_graph(graph: AdjacencyGraph, excluded_ids: Iterable[str]) -> AdjacencyGraph:
    """Drop regions by id; remaining adjacency is not rewired."""
    excluded = {str(e) for e in excluded_ids}
    unknown = excluded.difference(graph.region_ids)
    if unknown:
        raise InputError(f"unknown region ids in exclusion set: {sorted(unknown)}")
    keep = [k for k, rid in enumerate(graph.region_ids) if rid not in excluded]
    return AdjacencyGraph(tuple(graph.region_ids[k] for k in keep),
                          graph.w[np.ix_(keep, keep)])


# --- GeoJSON / CSV interfaces ---------------------------------------------

def regions_from_geojson(obj) -> list[Region]:
    """Parse a GeoJSON FeatureCollection (dict) into regions."""
    if obj.get("type") != "FeatureCollection":
        raise InputError("geometry input must be a GeoJSON FeatureCollection")
    regions = []
    for k, feat in enumerate(obj.get("features", [])):
        props = feat.get("properties") or {}
        if "id" not in props:
            raise InputError(f"feature {k} lacks an 'id' property")
        geom = feat.get("geometry") or {}
        gtype = geom.get("type")
        if gtype == "Polygon":
            rings = geom["coordinates"]
        elif gtype == "MultiPolygon":
            rings = [ring for poly in geom["coordinates"] for ring in poly]
        else:
            raise InputError(f"feature {props['id']!r}: unsupported geometry type {gtype!r}")
        pop = props.get("population", 0)
        regions.append(Region(str(props["id"]), tuple(rings), int(pop or 0)))
    validate_regions(regions)
    return regions


def read_geojson(path) -> list[Region]:
    with open(path, encoding="utf-8") as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise InputError(f"{path}: invalid JSON ({exc})") from exc
    return regions_from_geojson(obj)


def regions_to_geojson(regions: Sequence[Region], properties=None) -> dict:
    """FeatureCollection with one Polygon/MultiPolygon feature per region.

    ``properties`` optionally maps region id to extra feature properties.
    Rings of a region are emitted as one polygon each (holes are not
    reassembled), which round-trips through :func:`regions_from_geojson`.
    """
    feats = []
    for r in regions:
        rings = [ring.tolist() for ring in r.geometry]
        if len(rings) == 1:
            geom = {"type": "Polygon", "coordinates": rings}
        else:
            geom = {"type": "MultiPolygon", "coordinates": [[ring] for ring in rings]}
        props = {"id": r.id, "population": int(r.population)}
        if properties and r.id in properties:
            props.update(properties[r.id])
        feats.append({"type": "Feature", "properties": props, "geometry": geom})
    return {"type": "FeatureCollection", "features": feats}


def write_edge_list(graph: AdjacencyGraph, path, metadata=None) -> None:
    rows = [(graph.region_ids[i], graph.region_ids[j]) for i, j in graph.edges()]
    _io.write_csv(path, ["id_a", "id_b"], rows, metadata)


def write_matrix(graph: AdjacencyGraph, path, metadata=None) -> None:
    rows = [row.tolist() for row in graph.w]
    _io.write_csv(path, list(graph.region_ids), rows, metadata)


def read_edge_list(path, region_ids: Sequence[str]) -> AdjacencyGraph:
    header, rows = _io.read_csv(path)
    if header[:2] != ["id_a", "id_b"]:
        raise InputError(f"{path}: expected columns id_a,id_b")
    idx = {rid: k for k, rid in enumerate(region_ids)}
    w = np.zeros((len(region_ids), len(region_ids)), dtype=np.int8)
    for a, b in rows:
        if a not in idx or b not in idx:
            raise InputError(f"{path}: unknown region id in edge ({a}, {b})")
        w[idx[a], idx[b]] = w[idx[b], idx[a]] = 1
    return AdjacencyGraph(tuple(region_ids), w)


def grid_regions(nrows: int, ncols: int, prefix: str = "r") -> list[Region]:
    """Unit-square cells of an ``nrows x ncols`` grid, row-major ids.

    Handy for building regular lattices in tests and examples.
    """
    out = []
    for r in range(nrows):
        for c in range(ncols):
            ring = [(c, r), (c + 1, r), (c + 1, r + 1), (c, r + 1), (c, r)]
            out.append(Region(f"{prefix}{r * ncols + c:04d}", (ring,), 1))
    return out


def graph_from_edges(n: int, edges, ids=None) -> AdjacencyGraph:
    """Graph on ``n`` nodes from an iterable of undirected index pairs."""
    w = np.zeros((n, n), dtype=np.int8)
    for i, j in edges:
        if i != j:
            w[i, j] = w[j, i] = 1
    ids = ids if ids is not None else tuple(str(k) for k in range(n))
    return AdjacencyGraph(tuple(ids), w)
