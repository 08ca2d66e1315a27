import csv
import json
import warnings
from dataclasses import replace
from types import MappingProxyType

import numpy as np
import pytest
from scipy import stats

from arealrisk import _kernels
from arealrisk.carmodel import (
    COMPARISON_HEADER,
    RR_HEADER,
    SUMMARY_HEADER,
    CarModelSpec,
    McmcSettings,
    PosteriorSummary,
    car_joint_covariance_check,
    compare_models,
    dic,
    fit_car,
    gaussian_kld,
    marginal_loglik_estimate,
    posterior_mode,
    relative_risk,
    split_rhat,
    write_comparison_csv,
    write_rr_csv,
    write_rr_geojson,
    write_summary_csv,
)
from arealrisk.carmodel import model as car_model
from arealrisk.errors import ConvergenceWarning, InputError
from arealrisk.glm import PanelDataset
from arealrisk.lattice import graph_from_edges
from arealrisk.synth import SyntheticScenario, simulate

from conftest import cycle_graph

FAST = McmcSettings(chains=2, burn_in=600, draws=1000, seed=11)


@pytest.fixture(scope="module")
def bundle():
    return simulate(SyntheticScenario(n_regions=20, n_years=6, tau_spatial=1.0, seed=5))


@pytest.fixture(scope="module")
def full_fit(bundle):
    return fit_car(CarModelSpec(), bundle.panel, bundle.graph, FAST)


def read_header(path):
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return next(csv.reader(lines))


class TestSummaries:
    def test_invariants_enforced(self):
        with pytest.raises(InputError):
            PosteriorSummary(0, -1, 0, 0, 0, 0, 0)
        with pytest.raises(InputError):
            PosteriorSummary(0, 1, 1, 0, 2, 0, 0)

    def test_gaussian_draws(self):
        x = np.random.default_rng(0).normal(2.0, 3.0, 40000)
        ps = PosteriorSummary.from_draws(x)
        assert ps.mean == pytest.approx(2.0, abs=0.05)
        assert ps.sd == pytest.approx(3.0, rel=0.02)
        assert ps.q2_5 <= ps.median <= ps.q97_5
        assert abs(ps.mode - 2.0) < 0.3
        assert ps.kld < 0.01

    def test_kld_detects_skew(self):
        rng = np.random.default_rng(1)
        assert gaussian_kld(rng.exponential(size=20000)) > 5 * gaussian_kld(rng.normal(size=20000))
        assert gaussian_kld(np.ones(50)) == 0.0

    def test_mode_of_skewed(self):
        x = np.random.default_rng(2).gamma(3.0, 1.0, 20000)
        assert posterior_mode(x) == pytest.approx(2.0, abs=0.3)


class TestRhat:
    def test_mixed_chains(self):
        x = np.random.default_rng(0).normal(size=(4, 2000))
        assert split_rhat(x) < 1.01

    def test_separated_chains(self):
        x = np.random.default_rng(0).normal(size=(4, 2000)) + np.arange(4)[:, None]
        assert split_rhat(x) > 1.1

    def test_drifting_single_chain(self):
        x = np.linspace(0, 10, 2000)[None, :] + np.random.default_rng(0).normal(size=(1, 2000))
        assert split_rhat(x) > 1.1

    def test_constant(self):
        assert split_rhat(np.ones((2, 100))) == 1.0


class TestDic:
    def test_constant_trace(self):
        res = dic(np.full(200, 17.5), 17.5)
        assert (res.dbar, res.p_d, res.dic) == (17.5, 0.0, 17.5)

    def test_negative_pd_flagged(self):
        with pytest.warns(ConvergenceWarning):
            res = dic(np.full(200, 10.0), 12.0)
        assert res.negative_p_d and res.p_d == -2.0

    def test_needs_100_draws(self):
        with pytest.raises(InputError):
            dic(np.ones(99), 1.0)


class TestEvidence:
    @staticmethod
    def toy(n_draws, seed):
        # y_i ~ N(mu, 1), mu ~ N(0, 10^2)
        rng = np.random.default_rng(100)
        y = rng.normal(1.5, 1.0, 25)
        prior_var = 100.0
        post_var = 1.0 / (1.0 / prior_var + y.size)
        post_mean = post_var * y.sum()
        cov = np.eye(y.size) + prior_var
        exact = stats.multivariate_normal(np.zeros(y.size), cov).logpdf(y)

        def logpost(u):
            mu = np.asarray(u)[:, 0]
            return (stats.norm.logpdf(mu, 0, 10)
                    + stats.norm.logpdf(y[None, :], mu[:, None], 1).sum(axis=1))

        draws = np.random.default_rng(seed).normal(post_mean, np.sqrt(post_var), (n_draws, 1))
        return exact, marginal_loglik_estimate(draws, logpost, seed=seed)

    def test_conjugate_toy(self):
        exact, est = self.toy(2000, 1)
        assert abs(est.log_evidence - exact) < 0.1
        assert not est.unstable
        assert est.mcse < 0.1

    def test_stable_when_doubling_draws(self):
        _, a = self.toy(2000, 2)
        _, b = self.toy(4000, 3)
        assert abs(a.log_evidence - b.log_evidence) < 0.2

    def test_unstable_flag_below_200(self):
        _, est = self.toy(150, 4)
        assert est.unstable


class TestKernelConditional:
    @pytest.mark.parametrize("backend", ["cython", "python"])
    def test_icar_conditional_density(self, backend):
        mod = _kernels._fallback if backend == "python" else _kernels
        if backend == "cython" and _kernels.BACKEND != "cython":
            pytest.skip("extension not built")
        g = cycle_graph(5)
        indptr, indices = g.csr
        rng = np.random.default_rng(3)
        x0 = rng.normal(size=5)
        # likelihood switched off: Poisson with zero counts and mu ~ 0
        base = np.full((5, 1), -800.0)
        y = np.zeros((5, 1))
        tau, site, step = 2.5, 2, 0.7
        z = np.zeros(5)
        z[site] = 1.3
        m = x0[indices[indptr[site]:indptr[site + 1]]].mean()
        sd = 1.0 / np.sqrt(tau * 2)
        prop = x0[site] + step * z[site]
        expected = stats.norm.logpdf(prop, m, sd) - stats.norm.logpdf(x0[site], m, sd)
        for delta, accept in ((-1e-12, True), (1e-12, False)):
            x = x0.copy()
            logu = np.zeros(5)
            logu[site] = expected + delta
            acc = np.zeros(5, dtype=np.int64)
            mod.car_sweep(x, base, y, 1.0, 1, tau, 1.0, indptr, indices, np.full(5, step), z, logu, acc)
            assert bool(x[site] == prop) is accept
            assert acc.sum() == int(accept)

    def test_backends_agree(self):
        if _kernels.BACKEND != "cython":
            pytest.skip("extension not built")
        g = cycle_graph(6)
        indptr, indices = g.csr
        rng = np.random.default_rng(4)
        base = rng.normal(size=(6, 3))
        y = rng.poisson(2, size=(6, 3)).astype(float)
        z = rng.normal(size=6)
        logu = np.log(rng.random(6))
        out = []
        for mod in (_kernels, _kernels._fallback):
            x = rng.normal(size=6) * 0 + np.linspace(-1, 1, 6)
            acc = np.zeros(6, dtype=np.int64)
            mod.car_sweep(x, base, y, 2.0, 0, 1.5, 0.9, indptr, indices, np.full(6, 0.5), z, logu, acc)
            out.append((x, acc))
        np.testing.assert_allclose(out[0][0], out[1][0], rtol=1e-12)
        np.testing.assert_array_equal(out[0][1], out[1][1])


class TestFitCar:
    def test_structure_and_invariants(self, full_fit, bundle):
        assert full_fit.dic == pytest.approx(full_fit.dbar + full_fit.p_d, abs=1e-9)
        assert set(full_fit.spatial_effects) == set(bundle.graph.region_ids)
        assert tuple(full_fit.temporal_effects) == bundle.panel.years
        assert all(np.isfinite(v) for v in full_fit.rhat.values())
        s = full_fit.samples["s"]
        assert np.max(np.abs(s.sum(axis=1))) < 1e-10
        assert np.max(np.abs(full_fit.samples["gamma"].sum(axis=1))) < 1e-10
        assert abs(sum(p.mean for p in full_fit.spatial_effects.values())) < 1e-6
        assert full_fit.samples["beta"].shape == (2000, 2)
        with pytest.raises(ValueError):
            full_fit.samples["beta"][0, 0] = 1.0

    def test_recovers_spatial_pattern(self, full_fit, bundle):
        est = np.array([p.mean for p in full_fit.spatial_effects.values()])
        assert np.corrcoef(est, bundle.spatial)[0, 1] > 0.7

    def test_deterministic(self, bundle):
        mc = McmcSettings(chains=2, burn_in=100, draws=200, seed=3, marginal_likelihood=False)
        a = fit_car(CarModelSpec(), bundle.panel, bundle.graph, mc)
        b = fit_car(CarModelSpec(), bundle.panel, bundle.graph, replace(mc, threads=2))
        for key in a.samples:
            np.testing.assert_array_equal(a.samples[key], b.samples[key])
        c = fit_car(CarModelSpec(), bundle.panel, bundle.graph, replace(mc, seed=4))
        assert not np.array_equal(a.samples["beta"], c.samples["beta"])

    def test_tuple_settings(self, bundle):
        fit = fit_car(CarModelSpec(include_temporal=False), bundle.panel, bundle.graph, (1, 50, 300, 3, 0))
        assert fit.chains == 1 and fit.draws_per_chain == 100
        assert fit.temporal_effects == {}

    def test_null_effects_shrink(self):
        b = simulate(SyntheticScenario(n_regions=30, n_years=10, tau_spatial=np.inf,
                                       tau_temporal=np.inf, seed=8))
        fit = fit_car(CarModelSpec(), b.panel, b.graph, FAST)
        assert np.median([abs(p.mean) for p in fit.spatial_effects.values()]) < 0.1

    def test_offset_doubling(self, full_fit, bundle):
        p = bundle.panel
        doubled = replace(p, offset=p.offset * 2.0)
        fit2 = fit_car(CarModelSpec(), doubled, bundle.graph, FAST)
        a, b = full_fit.summaries["Intercept"], fit2.summaries["Intercept"]
        assert abs((b.mean - a.mean) + np.log(2.0)) < 2 * max(a.sd, b.sd)
        rr1 = relative_risk(full_fit, p)
        rr2 = relative_risk(fit2, doubled)
        assert np.max(np.abs(rr1.region_mean - rr2.region_mean) / rr1.region_sd) < 1.0

    def test_poisson_limit(self):
        b = simulate(SyntheticScenario(n_regions=20, n_years=6, theta=1e6, seed=9))
        nb = fit_car(CarModelSpec(), b.panel, b.graph, FAST)
        po = fit_car(CarModelSpec(likelihood="poisson"), b.panel, b.graph, FAST)
        assert po.theta_summary is None
        for name in nb.summaries:
            x, y = nb.summaries[name], po.summaries[name]
            assert x.q2_5 <= y.q97_5 and y.q2_5 <= x.q97_5

    def test_proper_car_and_iid(self, bundle):
        spec = CarModelSpec(spatial_prior="proper_car", rho=0.9, temporal_prior="iid")
        fit = fit_car(spec, bundle.panel, bundle.graph, McmcSettings(2, 300, 400, 1, 0))
        assert np.isfinite(fit.dic)
        with pytest.raises(InputError, match="rho"):
            fit_car(replace(spec, rho=1.5), bundle.panel, bundle.graph, McmcSettings(1, 10, 20))

    def test_nonconvergence_flag(self, bundle, monkeypatch):
        monkeypatch.setattr(car_model, "split_rhat", lambda x: 2.0)
        with pytest.warns(ConvergenceWarning):
            fit = fit_car(CarModelSpec(include_spatial=False, include_temporal=False),
                          bundle.panel, bundle.graph, McmcSettings(1, 10, 200, 1, 0))
        assert not fit.converged

    def test_input_errors(self, bundle):
        p = bundle.panel
        with pytest.raises(InputError, match="regions differ"):
            fit_car(CarModelSpec(), p, graph_from_edges(3, [(0, 1)]), FAST)
        with pytest.raises(InputError, match="every region-year"):
            fit_car(CarModelSpec(), p.subset(np.arange(1, p.n_rows)), bundle.graph, FAST)
        one_year = p.subset(np.flatnonzero(p.year_index == 0))
        one_year = replace(one_year, year_index=np.zeros(one_year.n_rows, int), years=p.years[:1])
        with pytest.raises(InputError, match="two distinct years"):
            fit_car(CarModelSpec(), one_year, bundle.graph, FAST)
        with pytest.raises(InputError):
            CarModelSpec(likelihood="gaussian")
        with pytest.raises(InputError):
            CarModelSpec(spatial_prior="proper_car")
        with pytest.raises(InputError):
            fit_car(CarModelSpec(covariate_names=("nope",)), p, bundle.graph, FAST)


class TestCompareModels:
    def test_table_ordering(self, full_fit):
        fits = [replace(full_fit, dic=d) for d in (4336.0, 4329.0, 4083.0)]
        ranked = compare_models(fits)
        assert [fits.index(f) for f in ranked] == [2, 1, 0]

    def test_tie_breaks(self, full_fit):
        a = replace(full_fit, dic=10.0, marginal_loglik_estimate=-10.0)
        b = replace(full_fit, dic=10.0, marginal_loglik_estimate=-5.0)
        assert compare_models([a, b])[0] is b
        fixed = replace(full_fit, dic=10.0, marginal_loglik_estimate=-5.0,
                        spec=CarModelSpec(include_spatial=False, include_temporal=False))
        assert compare_models([b, fixed])[0] is fixed

    def test_single_and_mismatch(self, full_fit):
        assert compare_models([full_fit]) == [full_fit]
        with pytest.raises(InputError):
            compare_models([full_fit, replace(full_fit, data_signature="other")])


class TestRelativeRisk:
    def test_baseline_identity(self, full_fit, bundle):
        for rule in ("lowest_risk", "closest_to_average", bundle.graph.region_ids[3]):
            rr = relative_risk(full_fit, bundle.panel, "vs_baseline", baseline=rule)
            k = rr.region_ids.index(rr.baseline)
            np.testing.assert_array_equal(rr.mean[k], 1.0)
            np.testing.assert_array_equal(rr.sd[k], 0.0)

    def test_lowest_risk_baseline_is_minimal(self, full_fit, bundle):
        rr = relative_risk(full_fit, bundle.panel, "vs_baseline", baseline="lowest_risk")
        assert rr.region_mean.min() == pytest.approx(1.0)

    def test_closest_to_average(self, full_fit, bundle):
        y = bundle.panel.grid()
        totals = y.sum(axis=1)
        rr = relative_risk(full_fit, bundle.panel, "vs_baseline", baseline="closest_to_average")
        k = bundle.panel.region_ids.index(rr.baseline)
        assert abs(totals[k] - totals.mean()) == np.abs(totals - totals.mean()).min()

    def test_homogeneous_reference(self, full_fit, bundle):
        rr = relative_risk(full_fit, bundle.panel)
        p = bundle.panel
        assert rr.reference_rate == pytest.approx(p.counts.sum() / p.offset.sum())
        assert rr.mean.shape == (p.n_regions, p.n_years)
        assert np.all(rr.q2_5 <= rr.median) and np.all(rr.median <= rr.q97_5)

    def test_zero_baseline_draws(self, full_fit, bundle):
        s = np.array(full_fit.samples["s"])
        k = 0
        s[: s.shape[0] // 10, k] = -800.0
        broken = replace(full_fit, samples=MappingProxyType({**full_fit.samples, "s": s}))
        with pytest.raises(InputError, match="numerically zero"):
            relative_risk(broken, bundle.panel, "vs_baseline", baseline=full_fit.region_ids[k])
        s = np.array(full_fit.samples["s"])
        s[:5, k] = -800.0
        few = replace(full_fit, samples=MappingProxyType({**full_fit.samples, "s": s}))
        rr = relative_risk(few, bundle.panel, "vs_baseline", baseline=full_fit.region_ids[k])
        assert rr.skipped_draws == 5

    def test_rejects_other_data(self, full_fit, bundle):
        p = bundle.panel
        with pytest.raises(InputError, match="does not match"):
            relative_risk(full_fit, replace(p, counts=p.counts + 1))
        with pytest.raises(InputError):
            relative_risk(full_fit, p, mode="vs_moon")


class TestCovarianceCheck:
    def test_independence(self):
        g = cycle_graph(4)
        assert car_joint_covariance_check(g, 0.0, np.ones(4)) < 0.05

    def test_two_nodes(self):
        g = graph_from_edges(2, [(0, 1)])
        assert car_joint_covariance_check(g, 0.3, [1.0, 1.0]) < 0.05

    def test_four_cycle(self):
        assert car_joint_covariance_check(cycle_graph(4), 0.2, np.full(4, 0.5)) < 0.05

    def test_rejections(self):
        g = cycle_graph(4)
        with pytest.raises(InputError, match="positive definite"):
            car_joint_covariance_check(g, 0.6, np.ones(4))
        with pytest.raises(InputError, match="symmetry"):
            car_joint_covariance_check(g, 0.2, [1.0, 2.0, 1.0, 1.0])
        with pytest.raises(InputError, match="at most 8"):
            car_joint_covariance_check(cycle_graph(9), 0.1, np.ones(9))


class TestExports:
    def test_table_headers(self, full_fit, bundle, tmp_path):
        write_summary_csv(full_fit, tmp_path / "s.csv", {"seed": 11}, include_random=True)
        assert tuple(read_header(tmp_path / "s.csv")) == SUMMARY_HEADER == (
            "Variable", "Mean", "SD", "2.5% Quant", "Median", "97.5% Quant", "Mode", "KLD")
        write_comparison_csv([full_fit, full_fit], tmp_path / "c.csv")
        assert tuple(read_header(tmp_path / "c.csv")) == COMPARISON_HEADER == (
            "Model", "Effects", "DIC", "Marginal Log-likelihood", "Dbar")
        rr = relative_risk(full_fit, bundle.panel)
        write_rr_csv(rr, tmp_path / "rr.csv")
        assert tuple(read_header(tmp_path / "rr.csv")) == RR_HEADER
        write_rr_geojson(rr, bundle.regions, tmp_path / "rr.geojson")
        doc = json.loads((tmp_path / "rr.geojson").read_text())
        assert len(doc["features"]) == bundle.graph.n
        assert all("rr_mean" in f["properties"] and "rr_sd" in f["properties"] for f in doc["features"])
