"""Compiled and pure-Python kernels must agree on identical inputs."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from arealrisk import _kernels
from arealrisk._kernels import _fallback
from conftest import random_graph

pytestmark = pytest.mark.skipif(_kernels.BACKEND != "cython", reason="extension not built")

seeds = st.integers(0, 2**31 - 1)


@settings(max_examples=30, deadline=None)
@given(seed=seeds, n=st.integers(2, 30), r=st.integers(1, 20))
def test_moran_cross_products(seed, n, r):
    rng = np.random.default_rng(seed)
    g = random_graph(rng, n)
    indptr, indices = g.csr
    z = rng.normal(size=(r, n))
    np.testing.assert_allclose(_kernels.moran_cross_products(z, indptr, indices),
                               _fallback.moran_cross_products(z, indptr, indices),
                               rtol=1e-12, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=seeds, n=st.integers(2, 12), poisson=st.booleans())
def test_car_sweep(seed, n, poisson):
    rng = np.random.default_rng(seed)
    g = random_graph(rng, n)
    indptr, indices = g.csr
    base = rng.normal(size=(n, 4))
    y = rng.poisson(3, size=(n, 4)).astype(float)
    z, logu = rng.normal(size=n), np.log(rng.random(n))
    x0 = rng.normal(size=n)
    out = []
    for mod in (_kernels, _fallback):
        x, acc = x0.copy(), np.zeros(n, dtype=np.int64)
        mod.car_sweep(x, base, y, 2.5, int(poisson), 1.3, 1.0, indptr, indices,
                      np.full(n, 0.4), z, logu, acc)
        out.append((x, acc))
    np.testing.assert_allclose(out[0][0], out[1][0], rtol=1e-12)
    np.testing.assert_array_equal(out[0][1], out[1][1])


def test_proper_car_gibbs():
    rng = np.random.default_rng(1)
    g = random_graph(rng, 5, p=0.5)
    indptr, indices = g.csr
    normals = rng.normal(size=(500, 5))
    sigma2 = np.full(5, 0.5)
    a = _kernels.proper_car_gibbs(0.1, sigma2, indptr, indices, normals, 50)
    b = _fallback.proper_car_gibbs(0.1, sigma2, indptr, indices, normals, 50)
    np.testing.assert_allclose(a[0], b[0], rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(a[1], b[1], rtol=1e-10, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=seeds, k=st.integers(3, 12))
def test_ring_kernels(seed, k):
    rng = np.random.default_rng(seed)
    ang = np.sort(rng.uniform(0, 2 * np.pi, k))
    rad = rng.uniform(0.5, 1.5, k)
    rx = np.append(rad * np.cos(ang), rad[0] * np.cos(ang[0]))
    ry = np.append(rad * np.sin(ang), rad[0] * np.sin(ang[0]))
    px, py = rng.uniform(-2, 2, 200), rng.uniform(-2, 2, 200)
    # include vertices themselves so the boundary branch is exercised
    px, py = np.append(px, rx[:-1]), np.append(py, ry[:-1])
    np.testing.assert_array_equal(
        np.asarray(_kernels.ring_crossing_parity(px, py, rx, ry)),
        _fallback.ring_crossing_parity(px, py, rx, ry))
    np.testing.assert_array_equal(
        np.asarray(_kernels.ring_on_boundary(px, py, rx, ry, 1e-9)).astype(bool),
        _fallback.ring_on_boundary(px, py, rx, ry, 1e-9))


@settings(max_examples=30, deadline=None)
@given(seed=seeds, p=st.integers(1, 12), lam=st.floats(0.0, 2.0))
def test_lasso_cd_gram(seed, p, lam):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(3 * p, p))
    gram = a.T @ a / (3 * p)
    c = rng.normal(size=p)
    out = []
    for mod in (_kernels, _fallback):
        b = np.zeros(p)
        trace = np.empty(500)
        sweeps = mod.lasso_cd_gram(gram, c, b, lam, 1e-12, 500, trace)
        out.append((b, sweeps))
    np.testing.assert_allclose(out[0][0], out[1][0], rtol=1e-9, atol=1e-12)
    assert out[0][1] == out[1][1]
