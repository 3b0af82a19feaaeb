"""Monte Carlo designs for the factor copula estimator.

Each replication simulates factor-model data, maps it through Gaussian margins
into AR(1)-GARCH(1,1) series, fits the margins, rebuilds the estimable factor
when the design has one, and runs estimation plus inference on a fresh draw
bank. Replications are seeded independently from the master seed so that the
summary does not depend on the number of workers.
"""
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Dict, List, Optional, Tuple
import logging
import time

import numpy as np
import pandas as pd
from scipy import special, stats
from tqdm import tqdm

from . import dists
from .depmeas import MomentSpec
from .errors import ConfigError, CopulaSMMError, McRunError
from .infer import InferenceOptions, run_inference
from .logger import RunStats
from .margins import FactorSourceModel, MarginModel, estimable_factor, filter_residuals, fit_margin, simulate_margin
from .simcore import FactorCopulaSpec, make_draw_bank, simulate_panel, uniforms
from .smm import SMMOptions, SMMProblem, smm_estimate

logger = logging.getLogger("copulasmm.mc")

DESIGNS = ("design1", "design2", "design1A", "design1B")
Z_MODES = ("observable", "simulable")
SUMMARY_COLUMNS = ["mean", "median", "var", "rmse", "t", "J"]
MAX_FAILURE_SHARE = 0.02

# AR(1)-GARCH(1,1) margins: c, phi, omega, beta, alpha
MARGIN_DGP = MarginModel("ar1", "garch", "gaussian", np.array([0.01, 0.05, 0.05, 0.85, 0.1]))
MARGIN_FIT = MarginModel("ar1", "garch", "gaussian")
# observable factor source W_t = nu W_{t-1} + Z_t
AR1_NU = 0.65
# log-abs factor source: omega, beta (GARCH), alpha (ARCH)
LOGABS_GARCH_DGP = MarginModel("zero", "garch", "gaussian", np.array([0.1, 0.1, 0.5]))

WIDE_TAUS = (0.15, 0.25, 0.35, 0.65, 0.75, 0.85)
NARROW_TAUS = (0.15, 0.85)


@dataclass(frozen=True)
class McDesign:
    design_id: str = "design1"
    z_mode: str = "observable"
    n: Optional[int] = None
    T: int = 500
    S: int = 25
    reps: int = 100
    seed: int = 0
    B: int = 500
    n_draws: int = 1000
    n_starts: int = 64
    pi_T: float = 0.05
    two_step: bool = False
    level: float = 0.05
    burn: int = 500
    reference_draws: int = 200_000
    bootstrap_mode: str = "joint"

    def __post_init__(self):
        if self.design_id not in DESIGNS:
            raise ConfigError(f"unknown design {self.design_id!r}; choose from {DESIGNS}")
        if self.z_mode not in Z_MODES:
            raise ConfigError(f"unknown z_mode {self.z_mode!r}; choose from {Z_MODES}")
        if self.design_id in ("design1A", "design1B") and self.z_mode != "observable":
            raise ConfigError(f"{self.design_id} has no simulable-Z variant")
        if self.n is None:
            object.__setattr__(self, "n", 11 if self.design_id in ("design1A", "design1B") else 15)
        if self.design_id == "design2" and self.n % 3:
            raise ConfigError(f"design2 splits the series into three equal groups; n={self.n} is not divisible by 3")
        if self.n < 2 or self.T < 2 or self.S < 1 or self.reps < 1:
            raise ConfigError(f"design dimensions too small: n={self.n}, T={self.T}, S={self.S}, reps={self.reps}")

    def settings(self) -> Dict[str, object]:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass(frozen=True, eq=False)
class DesignTruth:
    spec: FactorCopulaSpec
    theta_full: np.ndarray
    moment_spec: MomentSpec
    factor_source: Optional[str]

    @property
    def theta_free(self) -> np.ndarray:
        return self.spec.free_from_full(self.theta_full)


def design_truth(design: McDesign) -> DesignTruth:
    n = design.n
    if design.design_id == "design1":
        groups = (0,) * n
        spec = FactorCopulaSpec(groups, 1, 1, "skewt", "skewt",
                                z_dist="normal" if design.z_mode == "simulable" else None,
                                ties={"zeta_eps": "zeta_f1"}, fixed={"xi_eps": 0.0})
        theta = [1.0, 0.5, 0.25, -0.5, 0.25, 0.0]
        taus = WIDE_TAUS
    elif design.design_id == "design2":
        groups = tuple(i * 3 // n for i in range(n))
        spec = FactorCopulaSpec(groups, 1, 1, "skewt", "skewt",
                                z_dist="normal" if design.z_mode == "simulable" else None,
                                ties={"beta[2,1]": "beta[1,1]", "beta[3,1]": "beta[1,1]",
                                      "zeta_eps": "zeta_f1"},
                                fixed={"xi_eps": 0.0})
        theta = [2.0, 0.5, 1.5, 0.5, 1.0, 0.5, 0.25, -0.5, 0.25, 0.0]
        taus = NARROW_TAUS
    elif design.design_id == "design1A":
        groups = (0,) * n
        spec = FactorCopulaSpec(groups, 1, 0, "skewt", "skewt", fixed={"xi_eps": 0.0})
        theta = [1.5, 0.2, -0.2, 1.0 / 3.0, 0.0]
        taus = WIDE_TAUS
    else:
        groups = (0,) * n
        spec = FactorCopulaSpec(groups, 1, 1, "skewt", "skewt", fixed={"xi_f1": 0.0, "xi_eps": 0.0})
        theta = [1.25, 0.8, 0.2, 0.0, 1.0 / 3.0, 0.0]
        taus = WIDE_TAUS
    source = None
    if spec.p_beta and design.z_mode == "observable":
        source = "logabs_garch" if design.design_id == "design1B" else "ar1"
    return DesignTruth(spec, np.array(theta), MomentSpec(groups, spearman=True, taus=taus), source)


def _z_law(design: McDesign) -> str:
    return "logabsnormal" if design.design_id == "design1B" else "normal"


@lru_cache(maxsize=8)
def _reference_samples(design: McDesign) -> Tuple[np.ndarray, ...]:
    """Sorted draws of each group's factor variable, for the marginal CDF used by the DGP."""
    truth = design_truth(design)
    spec = truth.spec
    alpha, beta, gamma, delta = spec.unpack(truth.theta_full)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([design.seed, 7919])))
    M = design.reference_draws
    factor = dists.quantile_for(spec.factor_dist, uniforms(rng, M), gamma[0])
    z = dists.quantile_for(_z_law(design), uniforms(rng, M)) if spec.p_beta else np.zeros(M)
    out = []
    for q in range(truth.spec.Q):
        eps = dists.quantile_for(spec.eps_dist, uniforms(rng, M), delta)
        loading_z = beta[q, 0] if spec.p_beta else 0.0
        out.append(np.sort(alpha[q, 0] * factor + loading_z * z + eps))
    return tuple(out)


def _gaussian_margins(x: np.ndarray, groups: Tuple[int, ...], reference: Tuple[np.ndarray, ...]) -> np.ndarray:
    eta = np.empty_like(x)
    for i, q in enumerate(groups):
        ref = reference[q]
        cdf = (np.searchsorted(ref, x[i], side="right") + 0.5) / (ref.size + 1)
        eta[i] = special.ndtri(cdf)
    return eta


def _int_seed(ss: np.random.SeedSequence) -> int:
    return int(ss.generate_state(1, np.uint64)[0])


@dataclass(frozen=True, eq=False)
class RepOutcome:
    index: int
    theta_hat: Optional[np.ndarray] = None
    t_reject: Optional[np.ndarray] = None
    j_reject: bool = False
    j_pvalue: float = float("nan")
    failure: Optional[str] = None


def simulate_dgp(design: McDesign, rep_seed: np.random.SeedSequence):
    """One replication's data: margin series Y (n, T), factor source W (T,) or None, true Z."""
    truth = design_truth(design)
    T, burn, n = design.T, design.burn, design.n
    dgp_ss, innov_ss = rep_seed.spawn(2)
    rng = np.random.Generator(np.random.Philox(innov_ss))

    w = z_true = None
    if truth.spec.p_beta:
        if design.design_id == "design1B":
            eta_w = rng.standard_normal(T + burn)
            w = simulate_margin(LOGABS_GARCH_DGP, eta_w, burn=burn)
            z_true = np.log(np.abs(eta_w[burn:]))
        else:
            shocks = rng.standard_normal(T + burn)
            z_true = shocks[burn:]
            if design.z_mode == "observable":
                path = np.zeros(T + burn)
                for t in range(1, T + burn):
                    path[t] = AR1_NU * path[t - 1] + shocks[t]
                w = path[burn:]

    spec_dgp = replace(truth.spec, z_dist=None)
    bank = make_draw_bank((n, T, 1, spec_dgp.p_alpha), _int_seed(dgp_ss))
    z_in = z_true.reshape(T, 1) if z_true is not None else None
    x = simulate_panel(spec_dgp, truth.theta_full, z_in, bank)[:, :, 0]
    eta = _gaussian_margins(x, truth.spec.groups, _reference_samples(design))
    burn_shocks = rng.standard_normal((n, burn))
    y = np.vstack([simulate_margin(MARGIN_DGP, np.concatenate([burn_shocks[i], eta[i]]), burn=burn)
                   for i in range(n)])
    return y, w, z_true


def run_replication(design: McDesign, index: int) -> RepOutcome:
    """Simulate, filter, estimate and test one replication; failures are recorded, not raised."""
    truth = design_truth(design)
    rep_ss = np.random.SeedSequence(design.seed).spawn(design.reps)[index]
    data_ss, bank_ss = rep_ss.spawn(2)
    try:
        y, w, _ = simulate_dgp(design, data_ss)
        eta_hat = np.vstack([filter_residuals(series, None, fit_margin(series, None, MARGIN_FIT).model)
                             for series in y])
        z_hat = None
        if truth.factor_source is not None:
            _, z_hat = estimable_factor(w, None, FactorSourceModel(truth.factor_source))
        p_z = truth.spec.p_beta if truth.spec.z_dist is not None else 0
        bank_seed = _int_seed(bank_ss)
        bank = make_draw_bank((design.n, design.T, design.S, truth.spec.p_alpha), bank_seed, p_z=p_z)
        problem = SMMProblem.from_panels(truth.spec, truth.moment_spec, eta_hat, z_hat, bank)
        result = smm_estimate(problem, SMMOptions(two_step=design.two_step, B=design.B, seed=bank_seed,
                                                  n_starts=design.n_starts,
                                                  bootstrap_mode=design.bootstrap_mode))
        report = run_inference(problem, result,
                               InferenceOptions(B=design.B, pi_T=design.pi_T, n_draws=design.n_draws,
                                                seed=bank_seed, bootstrap_mode=design.bootstrap_mode),
                               theta_null=truth.theta_free)
    except (CopulaSMMError, np.linalg.LinAlgError) as exc:
        logger.warning("replication %d failed: %s", index, exc)
        return RepOutcome(index, failure=f"{type(exc).__name__}: {exc}")
    crit = stats.norm.ppf(1.0 - design.level / 2.0)
    return RepOutcome(index, result.theta_hat, np.abs(report.t_stats) > crit,
                      report.j_pvalue < design.level, report.j_pvalue)


@dataclass(frozen=True, eq=False)
class McSummary:
    names: Tuple[str, ...]
    truth: np.ndarray
    mean: np.ndarray
    median: np.ndarray
    var: np.ndarray
    rmse: np.ndarray
    t_reject: np.ndarray
    j_reject: float
    n_ok: int
    n_failed: int
    wall_time: float
    settings: Dict[str, object] = field(default_factory=dict)
    failures: Tuple[str, ...] = ()

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame({"mean": self.mean, "median": self.median, "var": self.var,
                              "rmse": self.rmse, "t": self.t_reject, "J": self.j_reject},
                             index=pd.Index(self.names, name="parameter"))
        return frame[SUMMARY_COLUMNS]

    def to_text(self) -> str:
        """Rows mean / median / var / rmse / t / J, one column per parameter."""
        table = self.to_frame().T
        table.loc["J"] = [self.j_reject] + [np.nan] * (len(self.names) - 1)
        header = (f"{self.settings.get('design_id')} ({self.settings.get('z_mode')}), "
                  f"n={self.settings.get('n')}, T={self.settings.get('T')}, S={self.settings.get('S')}, "
                  f"reps={self.n_ok} ok / {self.n_failed} failed")
        body = table.to_string(float_format=lambda v: f"{v:.3f}", na_rep="")
        return f"{header}\n{body}\n"


def summarize(design: McDesign, outcomes: List[RepOutcome], wall_time: float) -> McSummary:
    truth = design_truth(design)
    ok = [o for o in outcomes if o.failure is None]
    failed = [o for o in outcomes if o.failure is not None]
    names = tuple(truth.spec.free_names)
    theta0 = truth.theta_free
    if not ok:
        raise McRunError(f"all {len(outcomes)} replications failed; first failure: {failed[0].failure}")
    est = np.vstack([o.theta_hat for o in ok])
    t_rej = np.vstack([o.t_reject for o in ok])
    return McSummary(
        names=names,
        truth=theta0,
        mean=est.mean(axis=0),
        median=np.median(est, axis=0),
        var=est.var(axis=0),
        rmse=np.sqrt(np.mean((est - theta0) ** 2, axis=0)),
        t_reject=100.0 * t_rej.mean(axis=0),
        j_reject=100.0 * float(np.mean([o.j_reject for o in ok])),
        n_ok=len(ok),
        n_failed=len(failed),
        wall_time=wall_time,
        settings=design.settings(),
        failures=tuple(f"rep {o.index}: {o.failure}" for o in failed),
    )


def run_design(design: McDesign, workers: int = 1, progress: bool = False,
               stats_: Optional[RunStats] = None) -> McSummary:
    """Run all replications of a design and summarize them in replication order."""
    start = time.time()
    logger.info("Monte Carlo %s (%s): n=%d T=%d S=%d reps=%d workers=%d", design.design_id, design.z_mode,
                design.n, design.T, design.S, design.reps, workers)
    outcomes: List[Optional[RepOutcome]] = [None] * design.reps
    if workers <= 1:
        for r in tqdm(range(design.reps), desc=design.design_id, disable=not progress):
            outcomes[r] = run_replication(design, r)
    else:
        with ProcessPoolExecutor(max_workers=workers) as executor:
            futures = {executor.submit(run_replication, design, r): r for r in range(design.reps)}
            for fut in tqdm(as_completed(futures), total=design.reps, desc=design.design_id,
                            disable=not progress):
                outcomes[futures[fut]] = fut.result()

    n_failed = sum(o.failure is not None for o in outcomes)
    if stats_ is not None:
        stats_.replications_done += design.reps - n_failed
        stats_.replications_failed += n_failed
    if n_failed > MAX_FAILURE_SHARE * design.reps:
        first = next(o for o in outcomes if o.failure is not None)
        raise McRunError(f"{n_failed} of {design.reps} replications failed "
                         f"(limit {MAX_FAILURE_SHARE:.0%}); first: rep {first.index}: {first.failure}")
    summary = summarize(design, outcomes, time.time() - start)
    logger.info("Monte Carlo done in %.1fs: %d ok, %d failed", summary.wall_time, summary.n_ok, summary.n_failed)
    return summary
