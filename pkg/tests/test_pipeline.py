from pathlib import Path
import json

import numpy as np
import pandas as pd
import pytest
from click.testing import CliRunner
from scipy import stats

from copulasmm import __version__, dists, pipeline
from copulasmm.cli import main
from copulasmm.config import config_from_dict
from copulasmm.margins import MarginModel, simulate_margin
from copulasmm.simcore import FactorCopulaSpec, make_draw_bank, simulate_panel

COLUMNS = ["a", "b", "c", "d"]


def write_panel(path: Path, T=300, seed=0):
    rng = np.random.default_rng(seed)
    shocks = rng.standard_normal(T)
    w = np.zeros(T)
    w[0] = shocks[0]
    for t in range(1, T):
        w[t] = 0.65 * w[t - 1] + shocks[t]
    spec = FactorCopulaSpec((0, 0, 0, 0), p_beta=1)
    x = simulate_panel(spec, spec.expand([1.0, 0.5, 0.25, -0.5, 0.25, 0.0]), shocks,
                       make_draw_bank((4, T, 1, 1), seed))[:, :, 0]
    frame = pd.DataFrame(2.0 * x.T + 1.0, columns=COLUMNS)
    frame.insert(0, "date", pd.date_range("2015-01-01", periods=T, freq="D").strftime("%Y-%m-%d"))
    frame["w"] = w
    frame.to_csv(path, index=False)
    return frame


def base_config(data_path: Path, **estimation):
    est = {"S": 3, "B": 20, "n_draws": 50, "n_starts": 4, "seed": 11}
    est.update(estimation)
    return {
        "data": {"path": str(data_path), "date_column": "date", "columns": COLUMNS, "factor_column": "w"},
        "margins": {"mean": "constant", "variance": "constant", "innovations": "gaussian",
                    "overrides": {"a": {"mean": "ar1"}}},
        "copula": {"ties": {"zeta_eps": "zeta_f1"}, "fixed": {"xi_eps": 0.0}},
        "moments": {"taus": [0.15, 0.35, 0.65, 0.85]},
        "estimation": est,
    }


def write_config(path: Path, data: dict) -> Path:
    path.write_text(json.dumps(data), encoding="utf-8")
    return path


def invoke(*args):
    return CliRunner().invoke(main, [str(a) for a in args])


@pytest.fixture
def panel_csv(tmp_path):
    path = tmp_path / "returns.csv"
    write_panel(path)
    return path


def test_version_flag():
    result = invoke("--version")
    assert result.exit_code == 0
    assert __version__ in result.output


def test_filter_writes_residuals_and_report(tmp_path, panel_csv):
    cfg = write_config(tmp_path / "cfg.json", base_config(panel_csv))
    out = tmp_path / "out"
    result = invoke("filter", "--config", cfg, "--out", out)
    assert result.exit_code == 0, result.output

    residuals = pipeline.read_csv(out / "residuals.csv")
    assert list(residuals.columns) == ["date"] + COLUMNS
    raw = pd.read_csv(panel_csv)
    # constant margins give standardized columns
    b = raw["b"].to_numpy()
    assert np.allclose(residuals["b"], (b - b.mean()) / b.std(), atol=1e-12)
    assert list(residuals["date"]) == list(raw["date"])

    factor = pipeline.read_csv(out / "factor.csv")
    assert factor.shape == (300, 2)

    report = pipeline.read_csv(out / "margin_report.csv", index_col=0)
    assert "phi" in report.columns and "loglik" in report.columns
    assert np.isnan(report.loc["b", "phi"])
    for col in COLUMNS:
        assert report.loc[col, "mean"] == pytest.approx(raw[col].mean(), abs=1e-10)
        assert report.loc[col, "std"] == pytest.approx(raw[col].std(ddof=1), abs=1e-10)
        assert report.loc[col, "skewness"] == pytest.approx(stats.skew(raw[col]), abs=1e-10)
        assert report.loc[col, "kurtosis"] == pytest.approx(stats.kurtosis(raw[col], fisher=False), abs=1e-10)

    with open(out / "residuals.csv", encoding="utf-8") as f:
        header = [line for line in f if line.startswith("#")]
    assert any(line.startswith("# margins=") for line in header)


def test_factor_lag_drops_leading_periods(tmp_path, panel_csv):
    data = base_config(panel_csv)
    data["factor_source"] = {"model": "ar1", "lag": 1}
    cfg = config_from_dict(data)
    full = pipeline.filter_panel(config_from_dict(base_config(panel_csv)))
    lagged = pipeline.filter_panel(cfg)
    assert lagged.eta.shape == (4, 299)
    assert np.array_equal(lagged.eta, full.eta[:, 1:])
    assert np.array_equal(lagged.z_hat, full.z_hat[:-1])


def test_filter_then_estimate_matches_one_shot(tmp_path, panel_csv):
    one_shot = tmp_path / "one_shot"
    cfg = write_config(tmp_path / "cfg.json", base_config(panel_csv))
    assert invoke("estimate", "--config", cfg, "--out", one_shot).exit_code == 0

    staged = tmp_path / "staged"
    assert invoke("filter", "--config", cfg, "--out", staged).exit_code == 0
    staged_cfg = base_config(panel_csv)
    staged_cfg["data"] = {"date_column": "date", "columns": COLUMNS,
                          "residuals_path": str(staged / "residuals.csv"),
                          "factor_path": str(staged / "factor.csv")}
    cfg2 = write_config(tmp_path / "cfg2.json", staged_cfg)
    result = invoke("estimate", "--config", cfg2, "--out", staged)
    assert result.exit_code == 0, result.output

    for name in ("estimates.csv", "sigma.csv", "psi_gap.csv", "qdep_curve.csv"):
        assert (one_shot / name).read_bytes() == (staged / name).read_bytes(), name


def test_estimate_outputs_and_determinism(tmp_path, panel_csv):
    cfg = write_config(tmp_path / "cfg.json", base_config(panel_csv))
    first, second = tmp_path / "first", tmp_path / "second"
    result = invoke("estimate", "--config", cfg, "--out", first)
    assert result.exit_code == 0, result.output
    assert "J =" in result.output
    assert invoke("estimate", "--config", cfg, "--out", second).exit_code == 0

    produced = sorted(p.name for p in first.iterdir() if not p.name.startswith("copulasmm.log"))
    assert produced == sorted(["estimates.csv", "estimate.txt", "qdep_curve.csv"] + list(pipeline.ARTIFACTS))
    for name in produced:
        assert (first / name).read_bytes() == (second / name).read_bytes(), name

    table = pipeline.read_csv(first / "estimates.csv", index_col=0)
    assert list(table.index) == ["alpha[1,1]", "beta[1,1]", "zeta_f1", "xi_f1"]
    assert list(table.columns) == ["estimate", "std_error", "t_stat"]

    with open(first / "estimates.csv", encoding="utf-8") as f:
        header = {line[2:].split("=", 1)[0] for line in f if line.startswith("#")}
    assert {"seed", "S", "B", "pi_T", "measures", "bounds"} <= header

    curve = pipeline.read_csv(first / "qdep_curve.csv")
    assert list(curve.columns) == ["tau", "empirical[1]", "fitted[1]"]
    assert len(curve) == 19

    meta = json.loads((first / "artifacts.json").read_text(encoding="utf-8"))
    assert meta["j_df"] == 5 - 4


def test_jtest_reproduces_estimate(tmp_path, panel_csv):
    cfg = write_config(tmp_path / "cfg.json", base_config(panel_csv))
    out = tmp_path / "out"
    assert invoke("estimate", "--config", cfg, "--out", out).exit_code == 0
    result = invoke("jtest", "--config", cfg, "--out", out)
    assert result.exit_code == 0, result.output
    meta = json.loads((out / "artifacts.json").read_text(encoding="utf-8"))
    jt = pipeline.read_csv(out / "jtest.csv")
    assert jt["J"][0] == pytest.approx(meta["j_stat"], rel=1e-12, abs=1e-15)
    assert jt["mode"][0] == "simulated"


def test_tampered_sigma_halves_efficient_j(tmp_path, panel_csv):
    cfg_dict = base_config(panel_csv, two_step=True)
    cfg = write_config(tmp_path / "cfg.json", cfg_dict)
    out = tmp_path / "out"
    assert invoke("estimate", "--config", cfg, "--out", out).exit_code == 0
    parsed = config_from_dict(cfg_dict)
    parsed.output_dir = str(out)
    before = pipeline.jtest(parsed)
    assert before.mode == "chi2"

    sigma = pipeline.read_csv(out / "sigma.csv", index_col=0)
    pipeline.write_csv(2.0 * sigma, out / "sigma.csv", {"tampered": True})
    after = pipeline.jtest(parsed)
    assert after.statistic == pytest.approx(before.statistic / 2.0, rel=1e-8)


def test_jtest_without_artifacts_names_expected_file(tmp_path, panel_csv):
    cfg = write_config(tmp_path / "cfg.json", base_config(panel_csv))
    result = invoke("jtest", "--config", cfg, "--out", tmp_path / "empty")
    assert result.exit_code == 3
    assert "theta.csv" in result.output


def test_missing_column_is_config_error(tmp_path, panel_csv):
    data = base_config(panel_csv)
    data["data"]["columns"] = COLUMNS + ["zz"]
    cfg = write_config(tmp_path / "cfg.json", data)
    result = invoke("filter", "--config", cfg, "--out", tmp_path / "out")
    assert result.exit_code == 2
    assert "zz" in result.output


def test_missing_values_list_cells(tmp_path, panel_csv):
    frame = pd.read_csv(panel_csv)
    frame.loc[4, "b"] = np.nan
    frame.to_csv(panel_csv, index=False)
    cfg = write_config(tmp_path / "cfg.json", base_config(panel_csv))
    result = invoke("filter", "--config", cfg, "--out", tmp_path / "out")
    assert result.exit_code == 3
    assert "row 5 column 'b'" in result.output


def test_bad_dates_are_data_errors(tmp_path, panel_csv):
    frame = pd.read_csv(panel_csv)
    frame.loc[2, "date"] = "yesterday"
    frame.to_csv(panel_csv, index=False)
    cfg = write_config(tmp_path / "cfg.json", base_config(panel_csv))
    assert invoke("filter", "--config", cfg, "--out", tmp_path / "out").exit_code == 3


def test_unidentified_model_fails_before_fitting(tmp_path, panel_csv):
    data = base_config(panel_csv)
    data["moments"] = {"taus": [0.25]}
    cfg = write_config(tmp_path / "cfg.json", data)
    out = tmp_path / "out"
    result = invoke("estimate", "--config", cfg, "--out", out)
    assert result.exit_code == 2
    assert "not identified" in result.output


def test_montecarlo_command_writes_summary(tmp_path):
    data = {"montecarlo": {"design": "design1A", "n": 3, "T": 200, "S": 2, "reps": 2, "B": 20,
                           "n_draws": 50, "n_starts": 4, "burn": 100, "reference_draws": 20000}}
    cfg = write_config(tmp_path / "cfg.json", data)
    out = tmp_path / "mc"
    result = invoke("montecarlo", "--config", cfg, "--out", out)
    assert result.exit_code == 0, result.output
    summary = pipeline.read_csv(out / "mc_summary.csv", index_col=0)
    assert list(summary.columns) == ["mean", "median", "var", "rmse", "t", "J"]
    assert (out / "mc_summary.txt").exists()
    first = (out / "mc_summary.csv").read_bytes()
    assert invoke("montecarlo", "--config", cfg, "--out", out).exit_code == 0
    assert (out / "mc_summary.csv").read_bytes() == first


def test_one_column_as_exogenous_regressor_and_factor_source(tmp_path, panel_csv):
    frame = pd.read_csv(panel_csv)
    dgp = MarginModel("zero", "gjr", "skewt", np.array([0.05, 0.9, 0.05, 0.04, 1 / 6, 0.03]))
    u = np.random.default_rng(41).uniform(size=len(frame))
    frame["gold"] = simulate_margin(dgp, dists.skewt_quantile(u, dists.SkewT(1 / 6, 0.03)))
    frame.to_csv(panel_csv, index=False)

    data = base_config(panel_csv)
    data["data"].update(exog_column="gold", factor_column="gold")
    data["factor_source"] = {"model": "logabs_gjr", "lag": 1, "innovations": "skewt"}
    cfg = config_from_dict(data)
    panel = pipeline.load_data(cfg)
    assert panel.exog.shape == panel.factor.shape == (300,)
    assert np.array_equal(panel.exog, frame["gold"].to_numpy())

    filtered = pipeline.filter_panel(cfg)
    assert filtered.source.margin.innovation_dist == "skewt"
    assert filtered.z_hat.shape == (299, 1)
    assert filtered.eta.shape == (4, 299)
