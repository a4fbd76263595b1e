"""End-to-end model fitting, persistence and the command-line interface."""
import numpy as np
import pytest

from scopfit.ar1 import acf
from scopfit.cli import main
from scopfit.data import DataTable, read_csv, write_csv
from scopfit.model import fit_model, load_model, save_model
from scopfit.simulate import scalar_on_function, simulate, sitka_like


def read_table(path):
    return read_csv(path)


@pytest.fixture
def monotone_csv(tmp_path):
    rng = np.random.default_rng(7)
    x = rng.uniform(0, 1, 150)
    z = rng.normal(size=150)
    path = tmp_path / "mono.csv"
    write_csv(path, DataTable({"y": np.exp(x) + 0.3 * z + 0.2 * rng.normal(size=150),
                               "x": x, "z": z}))
    return path


@pytest.fixture
def fitted_file(tmp_path, monotone_csv):
    out = tmp_path / "model.json"
    assert main(["fit", str(monotone_csv), "--formula", "y ~ s(x, k=10, bs=mpi) + z",
                 "--out", str(out)]) == 0
    return out


class TestFitModel:
    def test_intercept_only(self):
        m = fit_model("y ~ 1", DataTable({"y": [1.0, 2.0, 6.0]}))
        assert m.beta[0] == pytest.approx(3.0)
        assert m.edf == pytest.approx(1.0)

    def test_round_trip_predictions(self, tmp_path):
        data = sitka_like(groups=12, per_group=8, seed=3)
        m = fit_model("log_size ~ s(days, k=6, bs=mpi) + ozone + s(id, bs=re)", data)
        save_model(m, tmp_path / "m.json")
        back = load_model(tmp_path / "m.json")
        np.testing.assert_allclose(back.predict(data), m.fitted, rtol=0, atol=1e-12)
        np.testing.assert_allclose(back.predict(data), m.predict(data), rtol=0, atol=1e-12)

    def test_summary_contents(self):
        data = sitka_like(groups=10, per_group=8, seed=1)
        m = fit_model("log_size ~ s(days, k=6, bs=mpi) + ozone", data, ar1_rho="search",
                      ar_start="start", rho_grid=np.array([0.0, 0.3, 0.6]))
        text = m.summary()
        for needle in ("s(days).mpi", "ozone", "AIC", "AR1 rho", "rho        AIC"):
            assert needle in text
        assert m.ar1["rho"] in (0.0, 0.3, 0.6)
        assert len(m.ar1["table"]) == 3

    def test_schema_mismatch(self, tmp_path):
        data = sitka_like(groups=6, per_group=6, seed=2)
        m = fit_model("log_size ~ s(days, k=5)", data)
        with pytest.raises(ValueError, match="schema mismatch"):
            m.predict(DataTable({"day": data["days"]}))
        with pytest.raises(ValueError, match="schema mismatch"):
            m.predict(DataTable({"days": data["id"]}))

    def test_unknown_term(self):
        m = fit_model("log_size ~ s(days, k=5)", sitka_like(groups=6, per_group=6, seed=2))
        with pytest.raises(KeyError, match="unknown term"):
            m.term_curve("s(height)")

    def test_bad_options(self):
        data = DataTable({"y": [1.0, 2.0, 6.0]})
        with pytest.raises(ValueError, match="optimizer"):
            fit_model("y ~ 1", data, optimizer="bfgs")
        with pytest.raises(ValueError, match="gamma"):
            fit_model("y ~ 1", data, gamma=0.0)


class TestSimulate:
    def test_scalar_on_function_shape(self):
        t = scalar_on_function()
        assert t.n == 200
        assert t["Z"].shape == (200, 100) and t["X"].shape == (200, 100)

    def test_cli_header_and_determinism(self, tmp_path):
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        assert main(["simulate", "scalar-on-function", "--seed", "5", "--out", str(a)]) == 0
        assert main(["simulate", "scalar-on-function", "--seed", "5", "--out", str(b)]) == 0
        assert a.read_bytes() == b.read_bytes()
        header = a.read_text().splitlines()[0].split(",")
        assert header[1:101] == [f"Z[{j}]" for j in range(1, 101)]
        assert header[101:] == [f"X[{j}]" for j in range(1, 101)]

    def test_seed_changes_output(self):
        a = simulate("wesdr-like", seed=1, n=20)
        b = simulate("wesdr-like", seed=2, n=20)
        assert not np.array_equal(a["dur"], b["dur"])

    def test_sitka_uncorrelated_errors(self, tmp_path):
        path = tmp_path / "s.csv"
        assert main(["simulate", "sitka-like", "--rho", "0", "--per-group", "40",
                     "--seed", "9", "--out", str(path)]) == 0
        data = read_csv(path, factors=("id",))
        m = fit_model("log_size ~ s(days, k=8, bs=mpi) + ozone + s(id, bs=re)", data)
        r = acf(m.residuals, 1, data["start"] != 0)
        assert abs(r[1]) < 0.05

    def test_unknown_scenario(self):
        with pytest.raises(ValueError, match="unknown scenario"):
            simulate("nope")


class TestCli:
    def test_fit_report(self, fitted_file, capsys, monotone_csv):
        assert main(["fit", str(monotone_csv), "--formula", "y ~ s(x, k=10, bs=mpi) + z"]) == 0
        out = capsys.readouterr().out
        assert "Smooth terms" in out and "AIC" in out
        assert load_model(fitted_file).labels == ["(Intercept)", "z", "s(x).mpi"]

    def test_config_file(self, tmp_path, monotone_csv, capsys):
        cfg = tmp_path / "run.json"
        cfg.write_text('{"formula": "y ~ s(x, k=10, bs=mpi) + z", "gamma": 1.2}')
        out = tmp_path / "m.json"
        assert main(["fit", str(monotone_csv), "--config", str(cfg), "--out", str(out)]) == 0
        assert load_model(out).labels == ["(Intercept)", "z", "s(x).mpi"]
        # an explicit flag overrides the config field
        assert main(["fit", str(monotone_csv), "--config", str(cfg), "--formula", "y ~ x",
                     "--out", str(out)]) == 0
        assert load_model(out).labels == ["(Intercept)", "x"]

    def test_config_errors(self, tmp_path, monotone_csv, capsys):
        cfg = tmp_path / "run.json"
        cfg.write_text('{"formula": "y ~ x", "colour": "red"}')
        assert main(["fit", str(monotone_csv), "--config", str(cfg)]) == 2
        assert "colour" in capsys.readouterr().err
        cfg.write_text('{"formula": \n oops}')
        assert main(["fit", str(monotone_csv), "--config", str(cfg)]) == 2
        assert "run.json:2" in capsys.readouterr().err

    def test_predict_training_data(self, tmp_path, fitted_file, monotone_csv):
        out = tmp_path / "pred.csv"
        assert main(["predict", str(fitted_file), str(monotone_csv), "--terms",
                     "--out", str(out)]) == 0
        pred = read_table(out)
        model = load_model(fitted_file)
        np.testing.assert_allclose(pred["fit"], model.fitted, atol=1e-12)
        total = pred["(Intercept)"] + pred["z"] + pred["s(x).mpi"]
        np.testing.assert_allclose(total, model.fitted, atol=1e-12)

    def test_predict_sorted_grid_nondecreasing(self, tmp_path, fitted_file):
        grid = tmp_path / "grid.csv"
        write_csv(grid, DataTable({"x": np.linspace(0.01, 0.99, 200), "z": np.zeros(200)}))
        out = tmp_path / "pred.csv"
        assert main(["predict", str(fitted_file), str(grid), "--extrapolate",
                     "--out", str(out)]) == 0
        assert np.all(np.diff(read_table(out)["fit"]) >= -1e-10)

    def test_plotdata_curve(self, tmp_path, fitted_file):
        out, svg = tmp_path / "curve.csv", tmp_path / "curve.svg"
        assert main(["plotdata", str(fitted_file), "--term", "x", "--out", str(out),
                     "--svg", str(svg)]) == 0
        c = read_table(out)
        assert np.all(np.diff(c["fit"]) >= -1e-10)
        # the band is fit +/- 2 se; recovering the half-widths by subtraction rounds
        ulp = np.spacing(np.abs(c["fit"]) + np.abs(c["upper"]))
        np.testing.assert_array_less(np.abs((c["upper"] - c["fit"]) - (c["fit"] - c["lower"])),
                                     4 * ulp)
        np.testing.assert_allclose(c["upper"] - c["fit"], 2 * c["se"], rtol=1e-12)
        assert svg.read_text().startswith("<svg")

    def test_plotdata_acf(self, tmp_path, fitted_file):
        out = tmp_path / "acf.csv"
        assert main(["plotdata", str(fitted_file), "--term", "acf", "--out", str(out)]) == 0
        c = read_table(out)
        assert c["raw"][0] == 1.0 and c.n == 21

    def test_acf_command(self, fitted_file, capsys):
        assert main(["acf", str(fitted_file)]) == 0
        assert capsys.readouterr().out.startswith("acf1 raw = ")

    def test_invalid_bs_code(self, monotone_csv, capsys):
        assert main(["fit", str(monotone_csv), "--formula", "y ~ s(x, bs=zz)"]) == 2
        err = capsys.readouterr().err
        assert "'zz'" in err and "offset 12" in err

    def test_unknown_term(self, fitted_file, capsys):
        assert main(["plotdata", str(fitted_file), "--term", "w"]) == 2
        assert "unknown term" in capsys.readouterr().err

    def test_missing_file(self, tmp_path, capsys):
        assert main(["fit", str(tmp_path / "none.csv"), "--formula", "y ~ x"]) == 2

    def test_csv_error_has_line_number(self, tmp_path, capsys):
        p = tmp_path / "bad.csv"
        p.write_text("y,x\n1,2\n3\n")
        assert main(["fit", str(p), "--formula", "y ~ x"]) == 2
        assert "bad.csv:3" in capsys.readouterr().err

    def test_predict_out_of_range(self, tmp_path, fitted_file, capsys):
        grid = tmp_path / "far.csv"
        write_csv(grid, DataTable({"x": [5.0], "z": [0.0]}))
        assert main(["predict", str(fitted_file), str(grid), "--out",
                     str(tmp_path / "p.csv")]) == 2
        assert "training range" in capsys.readouterr().err
