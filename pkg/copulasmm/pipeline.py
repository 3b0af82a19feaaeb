"""Run the filter / estimate / jtest / montecarlo workflows and write their outputs."""
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple
import contextlib
import json
import warnings

import numpy as np
import pandas as pd
from dateutil import parser as dateparser
from scipy import stats

from . import __version__, depmeas
from .config import Config
from .errors import ConfigError, DataError
from .infer import InferenceOptions, j_test, run_inference
from .logger import RunStats, logger, setup_logging
from .margins import FactorSourceModel, MarginFit, MarginModel, estimable_factor, filter_residuals, fit_margin
from .mc import McDesign, run_design
from .simcore import FactorCopulaSpec, make_draw_bank
from .smm import SMMOptions, SMMProblem, efficient_weight, smm_estimate

FLOAT_FORMAT = "%.17g"
CURVE_TAUS = tuple(np.round(np.arange(0.05, 0.951, 0.05), 2))
ARTIFACTS = ("theta.csv", "sigma.csv", "jacobian.csv", "weight.csv", "psi_gap.csv", "artifacts.json")


@contextlib.contextmanager
def _capture_warnings(print_logs_to_screen: bool):
    """Send numerical warnings to the log file unless logs go to the screen."""
    if print_logs_to_screen:
        yield
    else:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            yield
            for w in caught:
                logger.warning("library warning: %s", w.message)


def _start(cfg: Config, verbose: bool, print_logs_to_screen: bool) -> RunStats:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    log_file = Path(cfg.log_file)
    if not log_file.is_absolute():
        log_file = out / log_file
    setup_logging(verbose=verbose, debug=cfg.debug_level.upper() == "DEBUG", log_file=str(log_file),
                  max_bytes=cfg.log_max_bytes, backup_count=cfg.log_backup_count,
                  console_output=print_logs_to_screen)
    stats_ = RunStats()
    stats_.start()
    return stats_


# --- CSV helpers -----------------------------------------------------------------------

def write_csv(frame: pd.DataFrame, path: Path, settings: Dict[str, object], index: bool = True):
    """Write `frame` behind `# key=value` settings lines."""
    with open(path, "w", encoding="utf-8", newline="") as f:
        for key in sorted(settings):
            f.write(f"# {key}={settings[key]}\n")
        frame.to_csv(f, index=index, float_format=FLOAT_FORMAT)


def read_csv(path: Path, **kwargs) -> pd.DataFrame:
    if not Path(path).exists():
        raise DataError(f"file not found: {path}")
    try:
        return pd.read_csv(path, comment="#", **kwargs)
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc


def _check_missing(frame: pd.DataFrame, path: str):
    missing = frame.isna().to_numpy()
    if missing.any():
        rows, cols = np.nonzero(missing)
        cells = [f"row {r + 1} column {frame.columns[c]!r}" for r, c in zip(rows, cols)]
        raise DataError(f"{path} has missing values at: {', '.join(cells[:20])}"
                        + (f" (and {len(cells) - 20} more)" if len(cells) > 20 else ""))


def _check_dates(values: pd.Series, path: str):
    bad = []
    for k, value in enumerate(values.astype(str)):
        try:
            dateparser.isoparse(value)
        except (ValueError, OverflowError):
            bad.append(f"row {k + 1}: {value!r}")
    if bad:
        raise DataError(f"{path}: date column has non-ISO entries: {', '.join(bad[:10])}")


@dataclass
class PanelData:
    columns: List[str]
    values: np.ndarray
    dates: Optional[pd.Series]
    exog: Optional[np.ndarray]
    factor: Optional[np.ndarray]


def load_data(cfg: Config) -> PanelData:
    data = cfg.data
    if not data.path:
        raise ConfigError("data.path is required for this command")
    frame = read_csv(Path(data.path))
    # the same column may serve as exogenous regressor and factor source
    special = [c for c in (data.date_column, data.exog_column, data.factor_column) if c]
    special = list(dict.fromkeys(special))
    columns = list(data.columns) or [c for c in frame.columns if c not in special]
    for col in columns + special:
        if col not in frame.columns:
            raise ConfigError(f"column {col!r} not found in {data.path}; available: {list(frame.columns)}")
    _check_missing(frame[columns + special], data.path)
    dates = None
    if data.date_column:
        dates = frame[data.date_column].astype(str).reset_index(drop=True)
        _check_dates(dates, data.path)
    numeric = frame[columns + [c for c in special if c != data.date_column]]
    try:
        numeric = numeric.astype(float)
    except ValueError as exc:
        raise DataError(f"{data.path} has non-numeric values: {exc}") from exc
    return PanelData(
        columns=columns,
        values=numeric[columns].to_numpy().T.copy(),
        dates=dates,
        exog=numeric[data.exog_column].to_numpy() if data.exog_column else None,
        factor=numeric[data.factor_column].to_numpy() if data.factor_column else None,
    )


# --- filter ----------------------------------------------------------------------------

def margin_model_for(cfg: Config, column: str) -> MarginModel:
    spec = {"mean": cfg.margins.mean, "variance": cfg.margins.variance,
            "innovations": cfg.margins.innovations}
    override = cfg.margins.overrides.get(column, {})
    unknown = set(override) - set(spec)
    if unknown:
        raise ConfigError(f"unknown margin override key(s) {sorted(unknown)} for column {column!r}")
    spec.update(override)
    return MarginModel(spec["mean"], spec["variance"], spec["innovations"])


@dataclass
class FilterOutput:
    columns: List[str]
    eta: np.ndarray
    z_hat: Optional[np.ndarray]
    dates: Optional[pd.Series]
    fits: Dict[str, MarginFit]
    source: Optional[FactorSourceModel]
    descriptives: pd.DataFrame


def _descriptives(columns: List[str], values: np.ndarray) -> pd.DataFrame:
    return pd.DataFrame({
        "mean": values.mean(axis=1),
        "std": values.std(axis=1, ddof=1),
        "skewness": stats.skew(values, axis=1),
        "kurtosis": stats.kurtosis(values, axis=1, fisher=False),
    }, index=pd.Index(columns, name="series"))


def filter_panel(cfg: Config, stats_: Optional[RunStats] = None) -> FilterOutput:
    """Fit every margin, filter residuals and build the lag-aligned estimable factor."""
    panel = load_data(cfg)
    fits: Dict[str, MarginFit] = {}
    eta = []
    for column, series in zip(panel.columns, panel.values):
        model = margin_model_for(cfg, column)
        exog = panel.exog if model.uses_exog else None
        fit = fit_margin(series, exog, model)
        eta.append(filter_residuals(series, exog, fit.model))
        fits[column] = fit
        logger.info("filtered %s: %s loglik=%.4f", column, fit.model.params(), fit.loglik)
        if stats_ is not None:
            stats_.series_filtered += 1
    eta = np.vstack(eta)

    source = z_hat = None
    if panel.factor is not None:
        source_model = FactorSourceModel(cfg.factor_source.model, cfg.factor_source.innovations)
        source, z = estimable_factor(panel.factor, None, source_model)
        z_hat = z.reshape(-1, 1)
    lag = cfg.factor_source.lag
    dates = panel.dates
    if lag:
        if z_hat is None:
            raise ConfigError("factor_source.lag needs data.factor_column")
        eta = eta[:, lag:]
        z_hat = z_hat[:-lag]
        dates = dates.iloc[lag:].reset_index(drop=True) if dates is not None else None
    return FilterOutput(panel.columns, eta, z_hat, dates, fits, source,
                        _descriptives(panel.columns, panel.values))


def _with_dates(frame: pd.DataFrame, dates: Optional[pd.Series], date_column: Optional[str]) -> pd.DataFrame:
    if dates is not None:
        frame.insert(0, date_column or "date", dates.values)
    return frame


def run_filter(cfg: Config, verbose: bool = False, print_logs_to_screen: bool = False) -> RunStats:
    stats_ = _start(cfg, verbose, print_logs_to_screen)
    out = Path(cfg.output_dir)
    with _capture_warnings(print_logs_to_screen):
        result = filter_panel(cfg, stats_)
    settings = {"command": "filter", "version": __version__, "data": cfg.data.path,
                "margins": f"{cfg.margins.mean}/{cfg.margins.variance}/{cfg.margins.innovations}",
                "factor_source": cfg.factor_source.model, "lag": cfg.factor_source.lag,
                "factor_innovations": cfg.factor_source.innovations}

    residuals = _with_dates(pd.DataFrame(result.eta.T, columns=result.columns), result.dates,
                            cfg.data.date_column)
    write_csv(residuals, out / "residuals.csv", settings, index=False)
    if result.z_hat is not None:
        factor = _with_dates(pd.DataFrame({"z_hat": result.z_hat[:, 0]}), result.dates, cfg.data.date_column)
        write_csv(factor, out / "factor.csv", settings, index=False)

    report = pd.DataFrame({c: fit.report() for c, fit in result.fits.items()}).T
    report.index.name = "series"
    report = report.join(result.descriptives)
    write_csv(report, out / "margin_report.csv", settings)
    if result.source is not None and result.source.nu is not None:
        logger.info("factor source %s: nu=%s", result.source.variant, result.source.nu.tolist())

    print(f"Filtered {stats_.series_filtered} series ({result.eta.shape[1]} periods) -> {out}")
    print(stats_.summary())
    return stats_


# --- estimate --------------------------------------------------------------------------

def _group_labels(cfg: Config, columns: List[str]) -> Tuple[int, ...]:
    raw = cfg.copula.groups
    if not raw:
        return (0,) * len(columns)
    missing = [c for c in columns if c not in raw]
    if missing:
        raise ConfigError(f"copula.groups does not cover column(s) {missing}")
    order: Dict[object, int] = {}
    for c in columns:
        order.setdefault(raw[c], len(order))
    return tuple(order[raw[c]] for c in columns)


def build_specs(cfg: Config, columns: List[str], p_beta: int) -> Tuple[FactorCopulaSpec, depmeas.MomentSpec]:
    groups = _group_labels(cfg, columns)
    c = cfg.copula
    spec = FactorCopulaSpec(groups, c.p_alpha, p_beta, c.factor_dist, c.eps_dist, c.z_dist,
                            dict(c.ties), {k: float(v) for k, v in c.fixed.items()},
                            {k: (float(v[0]), float(v[1])) for k, v in c.bounds.items()})
    m = cfg.moments
    moment_spec = depmeas.MomentSpec(groups, m.spearman, tuple(m.taus), m.kendall, m.per_group)
    if moment_spec.n_moments < len(spec.free_names):
        raise ConfigError(f"model not identified: {moment_spec.n_moments} moments for "
                          f"{len(spec.free_names)} free parameters {spec.free_names}")
    return spec, moment_spec


def _load_residuals(cfg: Config) -> Tuple[List[str], np.ndarray, Optional[np.ndarray], Optional[pd.Series]]:
    frame = read_csv(Path(cfg.data.residuals_path))
    dates = None
    if cfg.data.date_column and cfg.data.date_column in frame.columns:
        dates = frame.pop(cfg.data.date_column).astype(str)
    columns = list(cfg.data.columns) or list(frame.columns)
    for col in columns:
        if col not in frame.columns:
            raise ConfigError(f"column {col!r} not found in {cfg.data.residuals_path}")
    _check_missing(frame[columns], cfg.data.residuals_path)
    z_hat = None
    if cfg.data.factor_path:
        factor = read_csv(Path(cfg.data.factor_path))
        if "z_hat" not in factor.columns:
            raise DataError(f"{cfg.data.factor_path} has no 'z_hat' column")
        z_hat = factor["z_hat"].to_numpy(dtype=float).reshape(-1, 1)
        if z_hat.shape[0] != len(frame):
            raise DataError(f"factor series has {z_hat.shape[0]} rows, residuals have {len(frame)}")
    return columns, frame[columns].to_numpy(dtype=float).T.copy(), z_hat, dates


def _settings(cfg: Config, spec: FactorCopulaSpec, moment_spec: depmeas.MomentSpec, T: int) -> Dict[str, object]:
    est = cfg.estimation
    lo_hi = spec.bounds()
    return {
        "command": "estimate", "version": __version__, "T": T, "S": est.S, "B": est.B, "pi_T": est.pi_T,
        "seed": est.seed, "n_draws": est.n_draws, "two_step": est.two_step,
        "bootstrap_mode": est.bootstrap_mode, "measures": moment_spec.describe(),
        "bounds": ";".join(f"{n}:[{a:g},{b:g}]" for n, (a, b) in zip(spec.free_names, lo_hi)),
        "ties": ";".join(f"{k}={v}" for k, v in sorted(spec.ties.items())),
        "fixed": ";".join(f"{k}={v:g}" for k, v in sorted(spec.fixed.items())),
    }


def estimate(cfg: Config, stats_: Optional[RunStats] = None, progress: bool = False):
    """Estimate and run inference; returns (problem, result, report)."""
    est = cfg.estimation
    factor = cfg.data.factor_path if cfg.data.residuals_path else cfg.data.factor_column
    p_beta = 1 if (factor or cfg.copula.z_dist) else 0
    if cfg.data.columns:
        # fail on an unidentified model before any fitting
        build_specs(cfg, list(cfg.data.columns), p_beta)
    if cfg.data.residuals_path:
        columns, eta, z_hat, _ = _load_residuals(cfg)
    else:
        filtered = filter_panel(cfg, stats_)
        columns, eta, z_hat = filtered.columns, filtered.eta, filtered.z_hat
    spec, moment_spec = build_specs(cfg, columns, p_beta)
    if spec.z_dist is not None:
        z_hat = None

    T = eta.shape[1]
    bank = make_draw_bank((spec.n, T, est.S, spec.p_alpha), est.seed,
                          p_z=spec.p_beta if spec.z_dist is not None else 0)
    problem = SMMProblem.from_panels(spec, moment_spec, eta, z_hat, bank)
    start = None
    if cfg.copula.start:
        unknown = set(cfg.copula.start) - set(spec.free_names)
        if unknown:
            raise ConfigError(f"copula.start names non-free slot(s) {sorted(unknown)}")
        mid = spec.bounds().mean(axis=1)
        start = tuple(float(cfg.copula.start.get(s, m)) for s, m in zip(spec.free_names, mid))
    options = SMMOptions(two_step=est.two_step, B=est.B, seed=est.seed, n_starts=est.n_starts,
                         restarts=est.restarts, xatol=est.xatol, fatol=est.fatol, max_evals=est.max_evals,
                         start=start, bootstrap_mode=est.bootstrap_mode, progress=progress)
    result = smm_estimate(problem, options)
    report = run_inference(problem, result, InferenceOptions(
        B=est.B, pi_T=est.pi_T, n_draws=est.n_draws, seed=est.seed, resample=est.resample,
        bootstrap_mode=est.bootstrap_mode, j_mode=est.j_mode, progress=progress))
    if stats_ is not None:
        stats_.objective_evals += result.n_evals
        stats_.penalized_evals += result.n_penalized
        stats_.bootstrap_replicates += est.B
    return problem, result, report


def _matrix_frame(mat: np.ndarray, rows: List[str], cols: List[str], index_name: str) -> pd.DataFrame:
    return pd.DataFrame(mat, index=pd.Index(rows, name=index_name), columns=cols)


def run_estimate(cfg: Config, verbose: bool = False, print_logs_to_screen: bool = False,
                 progress: bool = False) -> RunStats:
    stats_ = _start(cfg, verbose, print_logs_to_screen)
    out = Path(cfg.output_dir)
    with _capture_warnings(print_logs_to_screen):
        problem, result, report = estimate(cfg, stats_, progress)
    spec, moment_spec = problem.spec, problem.moment_spec
    settings = _settings(cfg, spec, moment_spec, problem.T)
    names = list(result.free_names)
    labels = moment_spec.labels

    table = pd.DataFrame({"estimate": result.theta_hat, "std_error": report.std_errors,
                          "t_stat": report.t_stats}, index=pd.Index(names, name="parameter"))
    write_csv(table, out / "estimates.csv", settings)
    write_csv(pd.DataFrame({"value": result.theta_hat}, index=pd.Index(names, name="parameter")),
              out / "theta.csv", settings)
    write_csv(_matrix_frame(report.sigma, labels, labels, "moment"), out / "sigma.csv", settings)
    write_csv(_matrix_frame(report.jacobian, labels, names, "moment"), out / "jacobian.csv", settings)
    write_csv(_matrix_frame(result.weight, labels, labels, "moment"), out / "weight.csv", settings)
    write_csv(pd.DataFrame({"empirical": problem.psi_T, "simulated": result.psi_sim_at_hat,
                            "gap": result.psi_gap}, index=pd.Index(labels, name="moment")),
              out / "psi_gap.csv", settings)

    empirical = depmeas.qdep_curve(problem.eta_panel, spec.groups, CURVE_TAUS)
    fitted = depmeas.qdep_curve(problem.simulate(result.theta_hat), spec.groups, CURVE_TAUS)
    curve = pd.DataFrame({"tau": CURVE_TAUS})
    for q in range(spec.Q):
        curve[f"empirical[{q + 1}]"] = empirical[q]
        curve[f"fitted[{q + 1}]"] = fitted[q]
    write_csv(curve, out / "qdep_curve.csv", settings, index=False)

    artifacts = {
        "version": __version__, "T": problem.T, "two_step": result.two_step,
        "n_draws": cfg.estimation.n_draws, "seed": cfg.estimation.seed, "j_mode": cfg.estimation.j_mode,
        "free_names": names, "moment_labels": labels, "objective": result.objective,
        "j_stat": report.j_stat, "j_pvalue": report.j_pvalue, "j_df": report.j_df,
        "flags": list(result.flags) + list(report.flags),
    }
    with open(out / "artifacts.json", "w", encoding="utf-8") as f:
        json.dump(artifacts, f, indent=2, sort_keys=True)

    with open(out / "estimate.txt", "w", encoding="utf-8") as f:
        f.write(estimate_text(table, report.j_stat, report.j_pvalue, report.j_mode, report.j_df))
    print(estimate_text(table, report.j_stat, report.j_pvalue, report.j_mode, report.j_df), end="")
    print(stats_.summary())
    return stats_


def estimate_text(table: pd.DataFrame, j_stat: float, j_pvalue: float, j_mode: str, j_df: int) -> str:
    body = table[["estimate", "t_stat"]].to_string(float_format=lambda v: f"{v:.4f}")
    return f"{body}\nJ = {j_stat:.4f}  p-value = {j_pvalue:.4f}  ({j_mode}, df={j_df})\n"


# --- jtest -----------------------------------------------------------------------------

def _artifact(out: Path, name: str) -> Path:
    path = out / name
    if not path.exists():
        raise DataError(f"missing estimation artifact: expected {path} (run 'estimate' first)")
    return path


def jtest(cfg: Config, n_draws: Optional[int] = None):
    """Recompute the J-test from stored estimation artifacts."""
    out = Path(cfg.output_dir)
    for name in ARTIFACTS:
        _artifact(out, name)
    with open(out / "artifacts.json", "r", encoding="utf-8") as f:
        meta = json.load(f)
    sigma = read_csv(out / "sigma.csv", index_col=0).to_numpy(dtype=float)
    jac = read_csv(out / "jacobian.csv", index_col=0).to_numpy(dtype=float)
    gap = read_csv(out / "psi_gap.csv", index_col=0)["gap"].to_numpy(dtype=float)
    if meta["two_step"]:
        weight = efficient_weight(sigma)[0]
    else:
        weight = read_csv(out / "weight.csv", index_col=0).to_numpy(dtype=float)
    draws = n_draws or meta["n_draws"]
    return j_test(gap, weight, sigma, jac, int(meta["T"]), draws, int(meta["seed"]) + 1,
                  meta.get("j_mode", "auto"), efficient=bool(meta["two_step"]))


def run_jtest(cfg: Config, verbose: bool = False, print_logs_to_screen: bool = False,
              n_draws: Optional[int] = None) -> RunStats:
    stats_ = _start(cfg, verbose, print_logs_to_screen)
    result = jtest(cfg, n_draws)
    frame = pd.DataFrame({"J": [result.statistic], "pvalue": [result.pvalue], "df": [result.df],
                          "mode": [result.mode], "n_draws": [result.n_draws]})
    write_csv(frame, Path(cfg.output_dir) / "jtest.csv", {"command": "jtest", "version": __version__},
              index=False)
    print(f"J = {result.statistic:.6f}  p-value = {result.pvalue:.4f}  ({result.mode}, df={result.df})")
    return stats_


# --- montecarlo ------------------------------------------------------------------------

def design_from_config(cfg: Config) -> McDesign:
    mc = cfg.montecarlo
    return McDesign(design_id=mc.design, z_mode=mc.z_mode, n=mc.n, T=mc.T, S=mc.S, reps=mc.reps,
                    seed=mc.seed, B=mc.B, n_draws=mc.n_draws, n_starts=mc.n_starts, pi_T=mc.pi_T,
                    two_step=mc.two_step, burn=mc.burn, reference_draws=mc.reference_draws,
                    bootstrap_mode=mc.bootstrap_mode)


def run_montecarlo(cfg: Config, verbose: bool = False, print_logs_to_screen: bool = False,
                   progress: bool = False) -> RunStats:
    stats_ = _start(cfg, verbose, print_logs_to_screen)
    out = Path(cfg.output_dir)
    design = design_from_config(cfg)
    with _capture_warnings(print_logs_to_screen):
        summary = run_design(design, workers=cfg.workers, progress=progress, stats_=stats_)
    settings = dict(design.settings(), command="montecarlo", version=__version__)
    write_csv(summary.to_frame(), out / "mc_summary.csv", settings)
    with open(out / "mc_summary.txt", "w", encoding="utf-8") as f:
        f.write(summary.to_text())
    print(summary.to_text(), end="")
    if summary.failures:
        print("Failed replications:")
        for line in summary.failures:
            print(f"  {line}")
    print(stats_.summary())
    return stats_


def with_overrides(cfg: Config, output_dir: Optional[str] = None, workers: Optional[int] = None,
                   seed: Optional[int] = None) -> Config:
    """Apply command-line overrides on top of file and environment settings."""
    if output_dir:
        cfg.output_dir = output_dir
    if workers is not None:
        if workers < 1:
            raise ConfigError(f"--workers must be >= 1, got {workers}")
        cfg.workers = workers
    if seed is not None:
        cfg.estimation = replace(cfg.estimation, seed=seed)
        cfg.montecarlo = replace(cfg.montecarlo, seed=seed)
    return cfg
