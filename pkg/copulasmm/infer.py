"""Post-estimation inference for the SMM estimator.

The Jacobian is a finite difference of the simulated moment vector on the same
draw bank. The moment covariance comes from an iid bootstrap over time periods
that resamples residuals and simulated time slices together. The sandwich,
t-statistics and the overidentification test are built from these pieces.
"""
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Callable, List, Optional, Sequence, Tuple
import logging

import numpy as np
from scipy import linalg, stats
from tqdm import tqdm

from . import depmeas
from .errors import InferenceError, NumericalError

if TYPE_CHECKING:
    from .smm import SMMProblem, SMMResult

logger = logging.getLogger("copulasmm.infer")

DEFAULT_B = 500
DEFAULT_PI_T = 0.05
DEFAULT_N_DRAWS = 1000
EIG_RTOL = 1e-12
MIN_STEP = 1e-10
BOOTSTRAP_MODES = ("joint", "per_pair")
J_MODES = ("auto", "chi2", "simulated")


def numeric_jacobian(moment_fn: Callable[[np.ndarray], np.ndarray], theta_hat: Sequence[float],
                     pi_T: float = DEFAULT_PI_T,
                     bounds: Optional[np.ndarray] = None) -> Tuple[np.ndarray, List[int]]:
    """Finite-difference Jacobian of `moment_fn` at `theta_hat`.

    Central differences with step pi_T; a column whose two-sided stencil leaves
    the box uses a one-sided difference, shrunk to the room left inside the
    box. Returns the (l, p) matrix and the indices of degenerate columns.
    """
    theta = np.asarray(theta_hat, dtype=float)
    p = theta.size
    if bounds is None:
        bounds = np.column_stack([np.full(p, -np.inf), np.full(p, np.inf)])
    lo, hi = np.asarray(bounds, dtype=float).T
    base = None
    columns, degenerate = [], []
    for k in range(p):
        e = np.zeros(p)
        e[k] = 1.0
        up, down = hi[k] - theta[k], theta[k] - lo[k]
        if up >= pi_T and down >= pi_T:
            col = (moment_fn(theta + pi_T * e) - moment_fn(theta - pi_T * e)) / (2.0 * pi_T)
        else:
            if base is None:
                base = np.asarray(moment_fn(theta), dtype=float)
            h = min(pi_T, max(up, down))
            if h < MIN_STEP:
                logger.warning("Jacobian column %d: no room for a difference step inside the box", k)
                degenerate.append(k)
                columns.append(np.zeros_like(base))
                continue
            if up >= down:
                col = (moment_fn(theta + h * e) - base) / h
            else:
                col = (base - moment_fn(theta - h * e)) / h
            logger.debug("Jacobian column %d: one-sided step %.3g at the boundary", k, h)
        col = np.asarray(col, dtype=float)
        if not np.any(col):
            logger.warning("Jacobian column %d is identically zero", k)
            degenerate.append(k)
        columns.append(col)
    return np.column_stack(columns), degenerate


def _replicate_rngs(seed: int, B: int) -> List[np.random.Generator]:
    return [np.random.Generator(np.random.Philox(child))
            for child in np.random.SeedSequence(seed).spawn(B)]


def bootstrap_sigma(eta_panel: np.ndarray, x_panel: np.ndarray, moment_spec: depmeas.MomentSpec,
                    B: int = DEFAULT_B, seed: int = 0, resample: bool = True, mode: str = "joint",
                    progress: bool = False) -> np.ndarray:
    """Bootstrap covariance of the moment gap, scaled by T.

    eta_panel is (n, T); x_panel is (n, T, S) evaluated at the estimate. A
    replicate draws T time indices with replacement. In "joint" mode the same
    indices are applied to every series and carry whole simulated slices; in
    "per_pair" mode each pair draws its own indices.
    """
    if B < 2:
        raise InferenceError(f"bootstrap needs B >= 2, got {B}")
    if mode not in BOOTSTRAP_MODES:
        raise InferenceError(f"unknown bootstrap mode {mode!r}; choose from {BOOTSTRAP_MODES}")
    eta_panel = np.asarray(eta_panel, dtype=float)
    x_panel = np.asarray(x_panel, dtype=float)
    n, T = eta_panel.shape
    if x_panel.shape[:2] != (n, T):
        raise InferenceError(f"residual panel {eta_panel.shape} and simulated panel {x_panel.shape} disagree")
    gap = depmeas.empirical_moments(eta_panel, moment_spec) - depmeas.simulated_moments(x_panel, moment_spec)

    deviations = np.empty((B, gap.size))
    identity = np.arange(T)
    for b, rng in enumerate(tqdm(_replicate_rngs(seed, B), desc="bootstrap", disable=not progress)):
        if mode == "joint":
            idx = rng.integers(0, T, size=T) if resample else identity
            gap_b = (depmeas.empirical_moments(eta_panel[:, idx], moment_spec)
                     - depmeas.simulated_moments(x_panel[:, idx, :], moment_spec))
        else:
            gap_b = _per_pair_gap(eta_panel, x_panel, moment_spec, rng, resample)
        deviations[b] = gap_b - gap
    sigma = T / B * deviations.T @ deviations
    return 0.5 * (sigma + sigma.T)


def _per_pair_gap(eta_panel, x_panel, moment_spec, rng, resample) -> np.ndarray:
    n, T, S = x_panel.shape
    out = []
    for pairs in moment_spec.blocks:
        values = np.zeros(len(moment_spec.measures))
        for i, j in pairs:
            idx = rng.integers(0, T, size=T) if resample else np.arange(T)
            emp = depmeas.pseudo_obs_panel(eta_panel[[i, j]][:, idx])
            sim = depmeas.pseudo_obs_panel(x_panel[[i, j]][:, idx, :].reshape(2, -1))
            values += depmeas.measure_pair(*emp, moment_spec) - depmeas.measure_pair(*sim, moment_spec)
        out.extend(values / len(pairs))
    return np.array(out)


def omega(jacobian: np.ndarray, weight: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    """Sandwich (G'WG)^-1 G'W Sigma W G (G'WG)^-1, symmetrized."""
    bread = jacobian.T @ weight @ jacobian
    try:
        if np.linalg.cond(bread) > 1e14:
            raise np.linalg.LinAlgError("ill-conditioned")
        bread_inv = np.linalg.inv(bread)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("G'WG is singular: the moments do not identify the free parameters "
                             "locally; add moments or tie parameters") from exc
    meat = jacobian.T @ weight @ sigma @ weight @ jacobian
    out = bread_inv @ meat @ bread_inv
    return 0.5 * (out + out.T)


def t_stats(theta_hat: Sequence[float], theta_null: Sequence[float], omega_hat: np.ndarray,
            T: int) -> np.ndarray:
    """(theta_hat - theta_null) / sqrt(Omega_kk / T); NaN where the variance is not positive."""
    diff = np.asarray(theta_hat, dtype=float) - np.asarray(theta_null, dtype=float)
    var = np.diag(omega_hat) / T
    out = np.full(diff.shape, np.nan)
    ok = var > 0
    out[ok] = diff[ok] / np.sqrt(var[ok])
    if not np.all(ok):
        logger.warning("zero or negative variance for parameter(s) %s", np.flatnonzero(~ok).tolist())
    return out


def _sqrt_psd(mat: np.ndarray, name: str, inverse: bool = False) -> Tuple[np.ndarray, bool]:
    vals, vecs = linalg.eigh(0.5 * (mat + mat.T))
    scale = max(np.max(np.abs(vals)), np.finfo(float).tiny)
    clipped = bool(np.min(vals) < -EIG_RTOL * scale)
    if clipped:
        logger.warning("%s is not positive semidefinite (min eigenvalue %.3g); clipping at 0",
                       name, np.min(vals))
    vals = np.clip(vals, 0.0, None)
    if inverse:
        keep = vals > EIG_RTOL * scale
        root = np.zeros_like(vals)
        root[keep] = 1.0 / np.sqrt(vals[keep])
    else:
        root = np.sqrt(vals)
    return (vecs * root) @ vecs.T, clipped


@dataclass(frozen=True)
class JTestResult:
    statistic: float
    pvalue: float
    mode: str
    df: int
    n_draws: int = 0
    flags: Tuple[str, ...] = ()


def j_test(psi_gap: np.ndarray, weight: np.ndarray, sigma: np.ndarray, jacobian: np.ndarray, T: int,
           n_draws: int = DEFAULT_N_DRAWS, seed: int = 0, mode: str = "auto",
           efficient: bool = False) -> JTestResult:
    """Overidentification test J = T g'Wg.

    Under efficient weighting (W the inverse of Sigma) the p-value is the
    chi-squared(l - p) tail; otherwise it is the share of simulated quadratic
    forms u'A'Au at or above J.
    """
    if mode not in J_MODES:
        raise InferenceError(f"unknown J mode {mode!r}; choose from {J_MODES}")
    g = np.asarray(psi_gap, dtype=float)
    J = float(T * g @ weight @ g)
    ell, p = jacobian.shape
    df = ell - p
    if mode == "auto":
        mode = "chi2" if efficient else "simulated"
    if df <= 0:
        logger.info("just-identified model: J carries no information, p-value set to 1")
        return JTestResult(J, 1.0, mode, df)
    if mode == "chi2":
        return JTestResult(J, float(stats.chi2.sf(J, df)), mode, df)

    flags = []
    sigma_half, clipped = _sqrt_psd(sigma, "Sigma")
    if clipped:
        flags.append("sigma_clipped")
    sigma_inv_half, _ = _sqrt_psd(sigma, "Sigma", inverse=True)
    weight_half, _ = _sqrt_psd(weight, "W")
    bread = jacobian.T @ weight @ jacobian
    try:
        bread_inv = np.linalg.inv(bread)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("G'WG is singular; cannot form the J-test projection") from exc
    R = np.eye(ell) - sigma_inv_half @ jacobian @ bread_inv @ jacobian.T @ weight @ sigma_half
    A = weight_half @ sigma_half @ R
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    u = rng.standard_normal((n_draws, ell))
    draws = np.sum((u @ A.T) ** 2, axis=1)
    pvalue = float(np.mean(draws >= J))
    return JTestResult(J, pvalue, mode, df, n_draws, tuple(flags))


@dataclass(frozen=True)
class InferenceOptions:
    B: int = DEFAULT_B
    pi_T: float = DEFAULT_PI_T
    n_draws: int = DEFAULT_N_DRAWS
    seed: int = 0
    resample: bool = True
    bootstrap_mode: str = "joint"
    j_mode: str = "auto"
    progress: bool = False


@dataclass(frozen=True, eq=False)
class InferenceReport:
    jacobian: np.ndarray
    sigma: np.ndarray
    omega: np.ndarray
    std_errors: np.ndarray
    t_stats: np.ndarray
    j_stat: float
    j_pvalue: float
    j_mode: str
    j_df: int
    B: int
    pi_T: float
    n_draws: int
    degenerate_columns: Tuple[int, ...] = ()
    flags: Tuple[str, ...] = field(default_factory=tuple)


def run_inference(problem: "SMMProblem", result: "SMMResult", options: InferenceOptions = InferenceOptions(),
                  theta_null: Optional[Sequence[float]] = None) -> InferenceReport:
    """Jacobian, bootstrap covariance, sandwich, t-statistics and J-test at the estimate.

    Two-step results reuse the covariance that was inverted for their weight,
    so the efficient-weight identities hold exactly.
    """
    theta = np.asarray(result.theta_hat, dtype=float)
    T = problem.T
    jac, degenerate = numeric_jacobian(problem.simulated_psi, theta, options.pi_T, problem.bounds)
    flags = [f"degenerate_jacobian_column:{problem.spec.free_names[k]}" for k in degenerate]

    if result.sigma is not None:
        sigma = result.sigma
    else:
        if problem.eta_panel is None:
            raise InferenceError("bootstrap needs the residual panel; build the problem with from_panels")
        sigma = bootstrap_sigma(problem.eta_panel, problem.simulate(theta), problem.moment_spec,
                                options.B, options.seed, options.resample, options.bootstrap_mode,
                                options.progress)
    omega_hat = omega(jac, result.weight, sigma)
    se = np.sqrt(np.clip(np.diag(omega_hat), 0.0, None) / T)
    null = np.zeros_like(theta) if theta_null is None else np.asarray(theta_null, dtype=float)
    tstat = t_stats(theta, null, omega_hat, T)
    jt = j_test(result.psi_gap, result.weight, sigma, jac, T, options.n_draws, options.seed + 1,
                options.j_mode, efficient=result.two_step)
    flags.extend(jt.flags)
    logger.info("inference: J=%.4f p=%.4f (%s, df=%d)", jt.statistic, jt.pvalue, jt.mode, jt.df)
    return InferenceReport(jac, sigma, omega_hat, se, tstat, jt.statistic, jt.pvalue, jt.mode, jt.df,
                           options.B, options.pi_T, options.n_draws, tuple(degenerate), tuple(flags))
