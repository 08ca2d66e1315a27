import configparser
import csv
import json
import os
import warnings

import numpy as np
import pytest

import arealrisk.carmodel
from arealrisk import cli
from arealrisk.errors import ConvergenceWarning

N_REGIONS, N_YEARS, N_LAMBDA = 15, 5, 12


def rows_of(path):
    lines = [ln for ln in path.read_text().splitlines() if not ln.startswith("#")]
    return list(csv.reader(lines))


def meta_of(path):
    out = {}
    for ln in path.read_text().splitlines():
        if not ln.startswith("#"):
            break
        key, value = ln[2:].split(": ", 1)
        out[key] = value
    return out


def write_config(path, base, overrides=None):
    cp = configparser.ConfigParser(interpolation=None)
    cp.read(base)
    # keep inputs pointing at the bundle when the config moves
    for key, value in cp.items("inputs"):
        if value and not os.path.isabs(value):
            cp.set("inputs", key, os.path.join(os.path.dirname(base), value))
    for (section, key), value in (overrides or {}).items():
        cp.set(section, key, str(value))
    with open(path, "w") as fh:
        cp.write(fh)
    return path


@pytest.fixture(scope="module")
def bundle(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    settings = root / "synth.ini"
    settings.write_text(f"[synth]\nn_regions = {N_REGIONS}\nn_years = {N_YEARS}\nseed = 4\n"
                        "tau_spatial = 1\n")
    assert cli.main(["synth", "--config", str(settings), "--out", str(root / "data")]) == 0
    data = root / "data"
    fast = {("car", "chains"): 2, ("car", "burn_in"): 2000, ("car", "draws"): 2000,
            ("lasso", "n_lambda"): N_LAMBDA, ("lasso", "folds"): 5, ("moran", "permutations"): 99}
    return write_config(data / "fast.ini", data / "config.ini",
                        fast)


@pytest.fixture(scope="module")
def full_run(bundle, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    excl = out.parent / "exclude.txt"
    excl.write_text("# hospital regions\nR01\nR02\n")
    code = cli.main(["all", "--config", str(bundle), "--out", str(out), "--exclude-file", str(excl)])
    return code, out, excl


def test_all_exit_code(full_run):
    code, _, _ = full_run
    assert code == cli.EXIT_OK


def test_moran_table_layout(full_run):
    _, out, _ = full_run
    rows = rows_of(out / "moran.csv")
    assert tuple(rows[0]) == ("Year", "P-value", "Z-score", "Moran's I")
    assert len(rows) - 1 == N_YEARS + 1
    assert rows[-1][0] == cli.AGGREGATE_LABEL
    detail = rows_of(out / "moran_detail.csv")
    assert tuple(detail[0]) == cli.MORAN_DETAIL_HEADER
    assert all(0 < float(r[6]) <= 1 for r in detail[1:])


def test_exclusion_variant_written(full_run):
    _, out, _ = full_run
    rows = rows_of(out / "moran_excluded_detail.csv")
    assert all(int(r[1]) == N_REGIONS - 2 for r in rows[1:])
    assert len(rows_of(out / "moran_excluded.csv")) - 1 == N_YEARS + 1


def test_lasso_outputs(full_run):
    _, out, _ = full_run
    sel = rows_of(out / "lasso_selected.csv")
    assert tuple(sel[0]) == ("Variable", "Coefficient")
    assert sel[1][0] == "Intercept"
    path = rows_of(out / "lasso_path.csv")
    assert len(path) - 1 == N_LAMBDA
    assert path[0][:5] == ["lambda", "cv_mean", "cv_se", "theta", "intercept"]


def test_car_outputs(full_run):
    _, out, _ = full_run
    comp = rows_of(out / "car_comparison.csv")
    assert tuple(comp[0]) == ("Model", "Effects", "DIC", "Marginal Log-likelihood", "Dbar")
    assert [r[1] for r in comp[1:]] == ["Fixed", "Spatial", "Spatial & Temporal"]
    summ = rows_of(out / "car_summary.csv")
    assert tuple(summ[0][1:]) == ("Mean", "SD", "2.5% Quant", "Median", "97.5% Quant", "Mode", "KLD")
    diag = rows_of(out / "car_diagnostics.csv")
    assert len(diag) == 4 and diag[0][1] == "converged"
    doc = json.loads((out / "rr.geojson").read_text())
    assert len(doc["features"]) == N_REGIONS
    assert all("rr_mean" in f["properties"] for f in doc["features"])
    rr = rows_of(out / "rr.csv")
    assert len(rr) - 1 == N_REGIONS * N_YEARS


def test_fuse_outputs(full_run):
    _, out, _ = full_run
    panel = rows_of(out / "panel.csv")
    assert len(panel) - 1 == N_REGIONS * N_YEARS
    report = rows_of(out / "fusion_report.csv")
    assert tuple(report[0]) == ("kind", "region_id", "item", "value")
    assert sum(int(r[3]) for r in report[1:] if r[0] == "unassigned_points") == 3


def test_trend_outputs(full_run, bundle):
    _, out, _ = full_run
    years = rows_of(out / "trends_year.csv")
    panel = rows_of(out / "panel.csv")
    assert sum(int(r[1]) for r in years[1:]) == sum(int(r[2]) for r in panel[1:])
    top = rows_of(out / "trends_top_k.csv")
    assert len({r[0] for r in top[1:]}) == 5


def test_every_output_has_metadata(full_run):
    _, out, _ = full_run
    files = [p for p in out.iterdir() if p.suffix in (".csv", ".ini")]
    assert len(files) > 10
    for p in files:
        meta = meta_of(p)
        assert set(meta) == {"tool", "version", "command", "config_sha256", "seeds"}
        assert meta["command"] == "all"
    doc = json.loads((out / "rr.geojson").read_text())
    assert doc["metadata"]["config_sha256"] == meta_of(out / "moran.csv")["config_sha256"]


def test_rerun_byte_identical(full_run, bundle, tmp_path):
    _, out, excl = full_run
    code = cli.main(["all", "--config", str(bundle), "--out", str(tmp_path), "--exclude-file",
                     str(excl), "--threads", "2"])
    assert code == cli.EXIT_OK
    names = sorted(p.name for p in out.iterdir())
    assert names == sorted(p.name for p in tmp_path.iterdir())
    for name in names:
        assert (out / name).read_bytes() == (tmp_path / name).read_bytes(), name


def test_seed_override_recorded(bundle, tmp_path):
    assert cli.main(["moran", "--config", str(bundle), "--out", str(tmp_path), "--seed", "42"]) == 0
    assert meta_of(tmp_path / "moran.csv")["seeds"] == "moran=42 lasso=42 car=42 synth=42"


def test_env_config_used(bundle, tmp_path, monkeypatch):
    monkeypatch.setenv("AREALRISK_CONFIG", str(bundle))
    assert cli.main(["trends", "--out", str(tmp_path), "--group-by", "year"]) == 0
    assert (tmp_path / "trends_year.csv").exists()
    assert not (tmp_path / "trends_top_k.csv").exists()


def test_missing_geometry_exit_2(bundle, tmp_path, capsys):
    cfg = write_config(tmp_path / "c.ini", bundle, {("inputs", "geometry"): "nowhere.geojson"})
    assert cli.main(["fuse", "--config", str(cfg), "--out", str(tmp_path / "o")]) == cli.EXIT_INPUT
    assert "nowhere.geojson" in capsys.readouterr().err


def test_missing_config_exit_2(tmp_path, capsys):
    assert cli.main(["moran", "--config", str(tmp_path / "x.ini")]) == cli.EXIT_INPUT
    assert "x.ini" in capsys.readouterr().err


def test_unknown_key_exit_2(tmp_path):
    cfg = tmp_path / "c.ini"
    cfg.write_text("[moran]\npermutation = 10\n")
    assert cli.main(["moran", "--config", str(cfg), "--out", str(tmp_path)]) == cli.EXIT_INPUT


def test_bad_value_exit_2(bundle, tmp_path):
    cfg = write_config(tmp_path / "c.ini", bundle, {("graph", "rule"): "bishop"})
    assert cli.main(["moran", "--config", str(cfg), "--out", str(tmp_path)]) == cli.EXIT_INPUT


def test_unknown_exclusion_exit_2(bundle, tmp_path):
    excl = tmp_path / "e.txt"
    excl.write_text("NOPE\n")
    code = cli.main(["moran", "--config", str(bundle), "--out", str(tmp_path),
                     "--exclude-file", str(excl)])
    assert code == cli.EXIT_INPUT


def test_status_required_for_status_trends(bundle, tmp_path):
    events = tmp_path / "events.csv"
    events.write_text("region_id,date\nR01,2009-03-01\n")
    cfg = write_config(tmp_path / "c.ini", bundle, {("inputs", "events"): str(events)})
    code = cli.main(["trends", "--config", str(cfg), "--out", str(tmp_path / "o"),
                     "--group-by", "status"])
    assert code == cli.EXIT_INPUT


def test_trend_zero_year_explicit(bundle, tmp_path):
    events = tmp_path / "events.csv"
    events.write_text("region_id,date,indigenous_status\nR01,2009-03-01,a\nR02,2011-05-02,b\n")
    cfg = write_config(tmp_path / "c.ini", bundle, {("inputs", "events"): str(events),
                                                      ("panel", "years"): "2009-2011"})
    assert cli.main(["trends", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    rows = rows_of(tmp_path / "o" / "trends_year.csv")
    assert rows[1:] == [["2009", "1"], ["2010", "0"], ["2011", "1"]]


def test_constant_year_flagged(bundle, tmp_path):
    src = rows_of(bundle.parent / "panel.csv")
    header, body = src[0], src[1:]
    first = body[0][1]
    for r in body:
        if r[1] == first:
            r[2] = "7"
    panel = tmp_path / "panel.csv"
    with open(panel, "w", newline="") as fh:
        csv.writer(fh).writerows([header] + body)
    cfg = write_config(tmp_path / "c.ini", bundle, {("inputs", "panel"): str(panel)})
    assert cli.main(["moran", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    rows = rows_of(tmp_path / "o" / "moran.csv")
    assert rows[1] == [first, "NA", "NA", "NA"]
    detail = rows_of(tmp_path / "o" / "moran_detail.csv")
    assert detail[1][-1] == "True" and detail[2][-1] == "False"
    assert len(rows) - 1 == N_YEARS + 1


def test_convergence_warning_exit_1(bundle, tmp_path, monkeypatch):
    real = arealrisk.carmodel.fit_car

    def noisy(*args, **kwargs):
        warnings.warn("synthetic non-convergence", ConvergenceWarning)
        return real(*args, **kwargs)

    monkeypatch.setattr(arealrisk.carmodel, "fit_car", noisy)
    cfg = write_config(tmp_path / "c.ini", bundle, {("car", "covariates"): "all",
                                                      ("car", "marginal_likelihood"): "false"})
    assert cli.main(["car", "--config", str(cfg), "--out", str(tmp_path / "o")]) == cli.EXIT_WARN
    # outputs are still written
    assert (tmp_path / "o" / "car_comparison.csv").exists()


def test_internal_error_exit_3(bundle, tmp_path, monkeypatch):
    def boom(run):
        raise RuntimeError("unexpected")

    monkeypatch.setattr(cli, "cmd_moran", boom)
    assert cli.main(["moran", "--config", str(bundle), "--out", str(tmp_path)]) == cli.EXIT_INTERNAL


def test_synth_bundle_runs_from_generated_config(bundle):
    cp = configparser.ConfigParser(interpolation=None)
    cp.read(bundle.parent / "config.ini")
    assert cp.get("inputs", "geometry") == "geometry.geojson"
    assert cp.get("panel", "years") == f"2009-{2009 + N_YEARS - 1}"


def test_config_years_parsing():
    assert cli._years("2009-2011, 2015") == (2009, 2010, 2011, 2015)
    assert cli._years("") is None


def test_read_exclusions(tmp_path):
    p = tmp_path / "e.csv"
    p.write_text("region_id,reason\nR1,hospital  # main site\n\nR2,x\n")
    assert cli.read_exclusions(p) == ["R1", "R2"]
    assert np.array_equal(cli.read_exclusions(p), ["R1", "R2"])
