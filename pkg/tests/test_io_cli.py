import csv
import json

import numpy as np
import pytest

from conftest import GTDL_TRUTH
from gtdl import cli, io
from gtdl.diagnostics import influence_analysis
from gtdl.estimation import FitResult, fit
from gtdl.model import ParamVector
from gtdl.simulation import simulate_dataset


def write_csv(path, rows, header=("time", "status", "x1", "grp")):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path


@pytest.fixture(scope="module")
def sim_csv(tmp_path_factory):
    rng = np.random.default_rng(5)
    data, _ = simulate_dataset(GTDL_TRUTH, 80, 0.3, rng)
    grp = rng.choice(["A", "B", "C"], size=80)
    rows = [[f"{t:.10g}", s, f"{x:.10g}", g] for t, s, x, g in zip(data.times, data.status, data.covariates_beta[:, 1], grp)]
    rows[3][2] = "NA"
    rows[7][3] = ""
    return write_csv(tmp_path_factory.mktemp("data") / "d.csv", rows)


def config(**kw):
    return io.RunConfig.from_mapping({"beta_covariates": ["x1"], **kw})


class TestRunConfig:
    def test_unknown_key(self):
        with pytest.raises(ValueError, match="unknown configuration keys"):
            io.RunConfig.from_mapping({"bogus": 1})

    def test_toml_and_override(self, tmp_path):
        p = tmp_path / "c.toml"
        p.write_text('model_kind = "frailty"\nbeta_covariates = ["x1"]\nci_level = 0.95\n')
        cfg = io.RunConfig.from_toml(p, ci_level=0.8, seed=None)
        assert cfg.model_kind == "frailty" and cfg.ci_level == 0.8 and cfg.beta_covariates == ["x1"]

    @pytest.mark.parametrize("kw", [{"command": "nope"}, {"model_kind": "weibull"}, {"ci_level": 1.0}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            io.RunConfig.from_mapping(kw)

    def test_variables_deduplicated(self):
        cfg = io.RunConfig.from_mapping({"beta_covariates": ["a", "b"], "alpha_covariates": ["b"], "group_by": "g"})
        assert cfg.variables == ["a", "b", "g"]


class TestReadTable:
    def test_listwise_deletion(self, sim_csv):
        cfg = config(alpha_covariates=["grp"], categorical={"grp": None})
        table = io.load_pool(sim_csv, cfg)
        assert table.dropped_lines == [5, 9]
        assert table.pool.times.size == 78
        assert 5 not in table.row_ids

    def test_deletion_depends_on_covariates(self, sim_csv):
        assert io.load_csv(sim_csv, config()).n == 79

    def test_dummy_coding(self, sim_csv):
        cfg = config(beta_covariates=["grp"], categorical={"grp": "B"})
        data = io.load_csv(sim_csv, cfg)
        assert data.beta_names == ["(Intercept)", "grp[A]", "grp[C]"]
        table = io.load_pool(sim_csv, cfg)
        g = table.categories["grp"]
        np.testing.assert_array_equal(data.covariates_beta[:, 1], (g == "A").astype(float))
        assert table.reference == {"grp": "B"}

    def test_default_reference_is_first_sorted(self, sim_csv):
        data = io.load_csv(sim_csv, config(beta_covariates=["grp"], categorical={"grp": None}))
        assert data.beta_names[1:] == ["grp[B]", "grp[C]"]

    def test_bad_reference(self, sim_csv):
        with pytest.raises(io.DataError):
            io.load_csv(sim_csv, config(beta_covariates=["grp"], categorical={"grp": "Z"}))

    def test_status_error_names_lines(self, tmp_path):
        p = write_csv(tmp_path / "b.csv", [[1.0, 1, 0.1, "A"], [2.0, 2, 0.2, "A"], [3.0, 0, 0.3, "B"], [4.0, -1, 0.1, "A"]])
        with pytest.raises(io.DataError) as exc:
            io.load_csv(p, config())
        assert exc.value.lines == [3, 5]
        assert "lines 3, 5" in str(exc.value)

    @pytest.mark.parametrize("bad, kind", [("0", "nonpositive"), ("abc", "unparseable"), ("-2", "nonpositive")])
    def test_time_errors(self, tmp_path, bad, kind):
        p = write_csv(tmp_path / "t.csv", [[1.0, 1, 0.1, "A"], [bad, 1, 0.2, "A"]])
        with pytest.raises(io.DataError, match=kind):
            io.load_csv(p, config())

    def test_missing_column(self, sim_csv):
        with pytest.raises(io.DataError, match="columns not found"):
            io.load_csv(sim_csv, config(beta_covariates=["nope"]))

    def test_unknown_level(self, sim_csv):
        with pytest.raises(io.DataError, match="unknown category"):
            io.load_csv(sim_csv, config(beta_covariates=["grp"], categorical={"grp": "A"}, levels={"grp": ["A", "B"]}))


@pytest.fixture(scope="module")
def fitted(sim_csv):
    return fit("gtdl", io.load_csv(sim_csv, config()))


@pytest.fixture(scope="module")
def reported():
    names = ["alpha:(Intercept)", "alpha:x1", "beta:(Intercept)", "beta:x1"]
    return FitResult.from_estimates(ParamVector([0.5, -0.2], [-1.0, 0.5]), [0.1] * 4, names=names)


class TestFitReport:
    def test_json_round_trip_exact(self, fitted, tmp_path):
        result = fitted
        json_path, _ = io.emit_fit_report(result, tmp_path)
        back = io.load_fit_report(json_path)
        np.testing.assert_array_equal(back.estimates, result.estimates)
        np.testing.assert_array_equal(back.se, result.se)
        np.testing.assert_array_equal(back.observed_info, result.observed_info)
        assert back.names == result.names and back.loglik == result.loglik

    def test_nan_written_as_null(self, tmp_path):
        r = FitResult.from_estimates(ParamVector([0.1], [0.2]), [np.nan, 0.1])
        json_path, csv_path = io.emit_fit_report(r, tmp_path)
        d = json.loads(json_path.read_text())
        assert d["se"][0] is None
        assert np.isnan(io.load_fit_report(json_path).se[0])
        assert "NA" in csv_path.read_text()

    def test_csv_table(self, fitted, tmp_path):
        result = fitted
        _, csv_path = io.emit_fit_report(result, tmp_path)
        rows = list(csv.reader(csv_path.open()))
        assert rows[0] == ["Parameter", "MLE", "SE", "90% CI lower", "90% CI upper"]
        assert rows[1][1] == f"{result.estimates[0]:.4f}"
        assert len(rows) == 1 + result.n_params

    def test_schema_checked(self, tmp_path):
        p = tmp_path / "x.json"
        p.write_text('{"schema": "other"}')
        with pytest.raises(ValueError):
            io.load_fit_report(p)


class TestCurves:
    def test_reliability(self, reported):
        req = io.CurveRequest("reliability", {"a": {"x1": 0.0}, "b": {"x1": 1.0}}, np.linspace(0, 5, 21))
        out = io.compute_curves(reported, req)
        assert out["a"][0] == 1.0
        assert np.all(np.diff(out["a"]) < 0)

    def test_identical_profiles_ratio_one(self, reported):
        req = io.CurveRequest("hazard_ratio", {"a": {"x1": 0.3}, "b": {"x1": 0.3}}, np.linspace(0, 5, 11))
        np.testing.assert_allclose(io.compute_curves(reported, req)["a/b"], 1.0, rtol=1e-14)

    def test_cure_surface(self, reported):
        req = io.CurveRequest("cure_surface", grid={"x1": [0.0, 5.0]})
        out = io.compute_curves(reported, req)
        assert out["cure_fraction"][0] == 0.0  # proper at x1=0 (alpha > 0)
        assert 0 < out["cure_fraction"][1] < 1  # alpha = 0.5 - 1.0 < 0

    def test_missing_profile_value(self, reported):
        with pytest.raises(io.ProfileError):
            io.compute_curves(reported, io.CurveRequest("hazard", {"a": {}}))

    @pytest.mark.parametrize(
        "kwargs",
        [{"kind": "density"}, {"kind": "hazard_ratio", "profiles": {"a": {}}}, {"kind": "hazard"},
         {"kind": "cure_surface"}, {"kind": "hazard", "profiles": {"a": {}}, "times": [-1.0]}],
    )
    def test_request_validation(self, kwargs):
        with pytest.raises(ValueError):
            io.CurveRequest(**kwargs)

    def test_design_row_categorical(self):
        np.testing.assert_array_equal(io.design_row(["(Intercept)", "g[B]", "x"], {"g": "B", "x": 2}), [1.0, 1.0, 2.0])

    def test_profiles(self, sim_csv):
        table = io.load_pool(sim_csv, config(alpha_covariates=["grp"], categorical={"grp": None}))
        base = io.median_profile(table)
        assert base["grp"] == "A"
        q = io.quartile_profiles(table, "x1")
        assert list(q) == ["x1=Q1", "x1=Q3"] and q["x1=Q1"]["x1"] < q["x1=Q3"]["x1"]
        assert len(io.sweep_profiles(table, "x1", 4)) == 4
        with pytest.raises(KeyError):
            io.quartile_profiles(table, "grp")


class TestInfluenceEmit:
    def test_row_counts(self, sim_csv, tmp_path):
        data = io.load_csv(sim_csv, config())
        result = fit("gtdl", data)
        report = influence_analysis(result, data, k=2)
        idx, rc = io.emit_influence_report(report, tmp_path)
        idx_rows = list(csv.reader(idx.open()))
        rc_rows = list(csv.reader(rc.open()))
        assert len(idx_rows) == 1 + data.n
        assert len(rc_rows) == 1 + len(report.flagged_union) + 1
        assert rc_rows[-1][0] == "All"
        assert rc_rows[0][1] == "alpha:(Intercept) RC_est"


class TestCLI:
    def test_fit(self, sim_csv, tmp_path, capsys):
        code = cli.main(["fit", "--input", str(sim_csv), "--beta", "x1", "--output-dir", str(tmp_path)])
        assert code == 0
        assert (tmp_path / "fit.json").exists() and (tmp_path / "fit.csv").exists()
        assert "beta:x1" in capsys.readouterr().out

    def test_curves_from_report(self, sim_csv, tmp_path):
        cli.main(["fit", "--input", str(sim_csv), "--beta", "x1", "--output-dir", str(tmp_path)])
        code = cli.main([
            "curves", "--input", str(sim_csv), "--beta", "x1", "--fit-report", str(tmp_path / "fit.json"),
            "--kind", "reliability", "--quartiles", "x1", "--times", "0:2:5", "--output-dir", str(tmp_path),
        ])
        assert code == 0
        rows = list(csv.reader((tmp_path / "reliability.csv").open()))
        assert rows[0] == ["t", "x1=Q1", "x1=Q3"] and len(rows) == 6

    def test_diagnose(self, sim_csv, tmp_path):
        code = cli.main([
            "diagnose", "--input", str(sim_csv), "--beta", "x1", "--output-dir", str(tmp_path),
            "--group-by", "grp", "--categorical", "grp=A",
        ])
        assert code == 0
        for name in ("qq.csv", "cumhaz.csv", "influence_index.csv", "influence_rc.csv"):
            assert (tmp_path / name).exists()

    def test_select(self, sim_csv, tmp_path):
        code = cli.main(["select", "--input", str(sim_csv), "--candidate-beta", "x1", "--output-dir", str(tmp_path)])
        assert code == 0
        assert json.loads((tmp_path / "selection.json").read_text())["heterogeneity"] is not None

    def test_simulate(self, tmp_path):
        code = cli.main([
            "simulate", "--seed", "1", "--replicates", "3", "--sizes", "50", "--censoring", "0.3",
            "--models", "gtdl", "--output-dir", str(tmp_path),
        ])
        assert code == 0 and (tmp_path / "simulation.csv").exists()

    def test_simulate_requires_seed(self):
        with pytest.raises(SystemExit):
            cli.main(["simulate"])

    def test_data_error_exit_code(self, tmp_path, capsys):
        p = write_csv(tmp_path / "b.csv", [[1.0, 3, 0.1, "A"]])
        assert cli.main(["fit", "--input", str(p), "--beta", "x1"]) == 1
        assert "line" in capsys.readouterr().err
