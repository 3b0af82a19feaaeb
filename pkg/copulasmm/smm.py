"""Simulated method of moments estimation of the factor copula."""
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional, Sequence, Tuple
import logging

import numpy as np
from scipy import optimize
from scipy.stats import qmc

from . import depmeas, infer
from .depmeas import MomentSpec
from .errors import ConfigError, ParameterDomainError
from .simcore import DrawBank, FactorCopulaSpec, simulate_panel

logger = logging.getLogger("copulasmm.smm")

PENALTY = 1e10
DEFAULT_N_STARTS = 64
XATOL = 1e-6
FATOL = 1e-10
EVALS_PER_PARAM = 2000
# initial simplex edge in the sin-transformed coordinates (radians)
SIMPLEX_STEP = 0.25
RIDGE = 1e-8


@dataclass(frozen=True, eq=False)
class SMMProblem:
    spec: FactorCopulaSpec
    moment_spec: MomentSpec
    psi_T: np.ndarray
    z_hat: Optional[np.ndarray]
    bank: DrawBank
    weight: Optional[np.ndarray] = None
    eta_panel: Optional[np.ndarray] = None

    def __post_init__(self):
        psi = np.asarray(self.psi_T, dtype=float)
        ell = self.moment_spec.n_moments
        if psi.shape != (ell,):
            raise ConfigError(f"psi_T has shape {psi.shape}, the moment menu gives {ell} moments")
        object.__setattr__(self, "psi_T", psi)
        if tuple(self.moment_spec.groups) != tuple(self.spec.groups):
            raise ConfigError("moment spec and copula spec use different group maps")
        p_free = len(self.spec.free_names)
        if ell < p_free:
            raise ConfigError(f"model not identified: {ell} moments for {p_free} free parameters "
                              f"{self.spec.free_names}")
        weight = np.eye(ell) if self.weight is None else np.asarray(self.weight, dtype=float)
        if weight.shape != (ell, ell):
            raise ConfigError(f"weight matrix has shape {weight.shape}, expected {(ell, ell)}")
        if not np.allclose(weight, weight.T, rtol=1e-10, atol=1e-12 * np.max(np.abs(weight))):
            raise ConfigError("weight matrix is not symmetric")
        if np.min(np.linalg.eigvalsh(weight)) <= 0:
            raise ConfigError("weight matrix is not positive definite")
        object.__setattr__(self, "weight", weight)
        if self.z_hat is not None:
            z_hat = np.asarray(self.z_hat, dtype=float)
            if z_hat.shape[0] != self.T:
                raise ConfigError(f"z_hat has {z_hat.shape[0]} periods, the draw bank has {self.T}")
            object.__setattr__(self, "z_hat", z_hat.reshape(self.T, -1))

    @classmethod
    def from_panels(cls, spec: FactorCopulaSpec, moment_spec: MomentSpec, eta_panel: np.ndarray,
                    z_hat: Optional[np.ndarray], bank: DrawBank,
                    weight: Optional[np.ndarray] = None) -> "SMMProblem":
        eta_panel = np.asarray(eta_panel, dtype=float)
        if eta_panel.shape != (spec.n, bank.T):
            raise ConfigError(f"residual panel has shape {eta_panel.shape}, expected {(spec.n, bank.T)}")
        psi = depmeas.empirical_moments(eta_panel, moment_spec)
        return cls(spec, moment_spec, psi, z_hat, bank, weight, eta_panel)

    @property
    def T(self) -> int:
        return self.bank.T

    @property
    def bounds(self) -> np.ndarray:
        return self.spec.bounds()

    def with_weight(self, weight: np.ndarray) -> "SMMProblem":
        return replace(self, weight=weight)

    def simulate(self, theta_free: Sequence[float]) -> np.ndarray:
        return simulate_panel(self.spec, self.spec.expand(theta_free), self.z_hat, self.bank)

    def simulated_psi(self, theta_free: Sequence[float]) -> np.ndarray:
        return depmeas.simulated_moments(self.simulate(theta_free), self.moment_spec)


def evaluate_objective(problem: SMMProblem, theta: Sequence[float]) -> Tuple[float, bool]:
    """Return (value, penalized). Points outside the box or the distribution domain get a penalty."""
    theta = np.asarray(theta, dtype=float)
    lo, hi = problem.bounds.T
    distance = float(np.sum(np.clip(lo - theta, 0.0, None) + np.clip(theta - hi, 0.0, None)))
    if distance > 0:
        return PENALTY + distance, True
    try:
        g = problem.psi_T - problem.simulated_psi(theta)
    except ParameterDomainError as exc:
        logger.debug("penalized evaluation: %s", exc)
        return PENALTY, True
    return float(g @ problem.weight @ g), False


def objective(problem: SMMProblem, theta: Sequence[float]) -> float:
    return evaluate_objective(problem, theta)[0]


class _CountingObjective:
    def __init__(self, problem: SMMProblem):
        self.problem = problem
        self.n_evals = 0
        self.n_penalized = 0

    def __call__(self, theta) -> float:
        value, penalized = evaluate_objective(self.problem, theta)
        self.n_evals += 1
        self.n_penalized += penalized
        return value


# --- bounded simplex search ----------------------------------------------------------

class _BoxTransform:
    """fminsearchbnd-style map from unconstrained z to the box.

    Two-sided: x = lo + (hi - lo) (sin z + 1) / 2; one-sided: x = lo + z**2
    or hi - z**2; free coordinates pass through.
    """

    def __init__(self, bounds: np.ndarray):
        bounds = np.asarray(bounds, dtype=float).reshape(-1, 2)
        self.lo, self.hi = bounds[:, 0], bounds[:, 1]
        self.both = np.isfinite(self.lo) & np.isfinite(self.hi)
        self.lower = np.isfinite(self.lo) & ~np.isfinite(self.hi)
        self.upper = ~np.isfinite(self.lo) & np.isfinite(self.hi)

    def to_box(self, z: np.ndarray) -> np.ndarray:
        x = np.array(z, dtype=float)
        b, lw, up = self.both, self.lower, self.upper
        x[b] = self.lo[b] + (self.hi[b] - self.lo[b]) * (np.sin(z[b]) + 1.0) / 2.0
        x[b] = np.clip(x[b], self.lo[b], self.hi[b])
        x[lw] = self.lo[lw] + z[lw] ** 2
        x[up] = self.hi[up] - z[up] ** 2
        return x

    def from_box(self, x: np.ndarray) -> np.ndarray:
        z = np.array(x, dtype=float)
        b, lw, up = self.both, self.lower, self.upper
        scaled = 2.0 * (x[b] - self.lo[b]) / (self.hi[b] - self.lo[b]) - 1.0
        z[b] = np.arcsin(np.clip(scaled, -1.0, 1.0))
        z[lw] = np.sqrt(np.clip(x[lw] - self.lo[lw], 0.0, None))
        z[up] = np.sqrt(np.clip(self.hi[up] - x[up], 0.0, None))
        return z


@dataclass(frozen=True)
class SimplexDiagnostics:
    n_evals: int
    n_iter: int
    converged: bool
    message: str


def nelder_mead_bounded(f: Callable[[np.ndarray], float], x0: Sequence[float], bounds: np.ndarray,
                        xatol: float = XATOL, fatol: float = FATOL,
                        max_evals: Optional[int] = None) -> Tuple[np.ndarray, float, SimplexDiagnostics]:
    """Nelder-Mead inside a box through a sin-squash reparameterization.

    scipy stops only when both the simplex diameter (in transformed
    coordinates) is below xatol and the spread of function values is below
    fatol, or when max_evals is exhausted.
    """
    x0 = np.asarray(x0, dtype=float)
    bounds = np.asarray(bounds, dtype=float).reshape(-1, 2)
    if np.any(x0 < bounds[:, 0]) or np.any(x0 > bounds[:, 1]):
        raise ConfigError(f"starting point {x0} lies outside the box")
    box = _BoxTransform(bounds)
    z0 = box.from_box(x0)
    max_evals = max_evals or EVALS_PER_PARAM * x0.size
    simplex = np.vstack([z0, z0 + SIMPLEX_STEP * np.eye(x0.size)])

    res = optimize.minimize(lambda z: f(box.to_box(z)), z0, method="Nelder-Mead",
                            options={"xatol": xatol, "fatol": fatol, "maxfev": max_evals,
                                     "maxiter": max_evals, "initial_simplex": simplex})
    x_best = box.to_box(res.x)
    diag = SimplexDiagnostics(int(res.nfev), int(res.nit), bool(res.success), str(res.message))
    return x_best, float(res.fun), diag


@dataclass(frozen=True)
class StartPoint:
    x: np.ndarray
    value: float
    n_evaluated: int


def multi_start(f: Callable[[np.ndarray], float], bounds: np.ndarray, n_starts: int = DEFAULT_N_STARTS,
                seed: int = 0) -> StartPoint:
    """Best of the box midpoint and n_starts - 1 scrambled Halton points; lowest index wins ties."""
    if n_starts < 1:
        raise ConfigError(f"n_starts must be at least 1, got {n_starts}")
    bounds = np.asarray(bounds, dtype=float).reshape(-1, 2)
    lo, hi = bounds[:, 0], bounds[:, 1]
    if not np.all(np.isfinite(bounds)):
        raise ConfigError("multi-start needs a finite box")
    points = [(lo + hi) / 2.0]
    if n_starts > 1:
        sampler = qmc.Halton(d=lo.size, scramble=True, seed=seed)
        points.extend(qmc.scale(sampler.random(n_starts - 1), lo, hi))
    values = np.array([f(x) for x in points])
    best = int(np.argmin(values))
    logger.debug("multi-start: best of %d points at index %d, f=%.6g", len(points), best, values[best])
    return StartPoint(np.asarray(points[best], dtype=float), float(values[best]), len(points))


# --- estimator -------------------------------------------------------------------------

@dataclass(frozen=True)
class SMMOptions:
    two_step: bool = False
    B: int = infer.DEFAULT_B
    seed: int = 0
    n_starts: int = DEFAULT_N_STARTS
    restarts: int = 1
    xatol: float = XATOL
    fatol: float = FATOL
    max_evals: Optional[int] = None
    start: Optional[Tuple[float, ...]] = None
    bootstrap_mode: str = "joint"
    progress: bool = False


@dataclass(frozen=True, eq=False)
class SMMResult:
    theta_hat: np.ndarray
    theta_full: np.ndarray
    free_names: Tuple[str, ...]
    objective: float
    n_evals: int
    n_penalized: int
    converged: bool
    restarts_used: int
    psi_sim_at_hat: np.ndarray
    psi_gap: np.ndarray
    weight: np.ndarray
    two_step: bool = False
    sigma: Optional[np.ndarray] = None
    theta_first_step: Optional[np.ndarray] = None
    flags: Tuple[str, ...] = field(default_factory=tuple)


def _minimize(problem: SMMProblem, start: np.ndarray, options: SMMOptions):
    counter = _CountingObjective(problem)
    x, fx, diag = nelder_mead_bounded(counter, start, problem.bounds, options.xatol, options.fatol,
                                      options.max_evals)
    converged, restarts = diag.converged, 0
    # restart from the incumbent until a pass no longer improves it
    while restarts < options.restarts:
        x_new, f_new, diag = nelder_mead_bounded(counter, x, problem.bounds, options.xatol,
                                                 options.fatol, options.max_evals)
        restarts += 1
        converged = diag.converged
        improved = f_new < fx - options.fatol
        if f_new <= fx:
            x, fx = x_new, f_new
        if not improved:
            break
    return x, fx, converged, restarts, counter


def efficient_weight(sigma: np.ndarray) -> Tuple[np.ndarray, np.ndarray, bool]:
    """Inverse of sigma, ridge-regularized when sigma is singular.

    Returns (weight, sigma actually inverted, ridge applied).
    """
    sigma = 0.5 * (sigma + sigma.T)
    ell = sigma.shape[0]
    eig = np.linalg.eigvalsh(sigma)
    ridge = eig[0] <= 1e-12 * max(eig[-1], np.finfo(float).tiny)
    if ridge:
        bump = RIDGE * np.trace(sigma) / ell
        if bump <= 0:
            bump = RIDGE
        logger.warning("bootstrap covariance is singular; adding ridge %.3g to its diagonal", bump)
        sigma = sigma + bump * np.eye(ell)
    weight = np.linalg.inv(sigma)
    return 0.5 * (weight + weight.T), sigma, bool(ridge)


def smm_estimate(problem: SMMProblem, options: SMMOptions = SMMOptions()) -> SMMResult:
    bounds = problem.bounds
    evals = penalized = 0
    if options.start is not None:
        start = np.clip(np.asarray(options.start, dtype=float), bounds[:, 0], bounds[:, 1])
    else:
        counter = _CountingObjective(problem)
        start = multi_start(counter, bounds, options.n_starts, options.seed).x
        evals, penalized = counter.n_evals, counter.n_penalized

    x, fx, converged, restarts, counter = _minimize(problem, start, options)
    evals += counter.n_evals
    penalized += counter.n_penalized
    flags: List[str] = []
    if not converged:
        flags.append("simplex_not_converged")
        logger.warning("simplex search stopped before converging (f=%.6g)", fx)

    sigma = first = None
    if options.two_step:
        if problem.eta_panel is None:
            raise ConfigError("two-step estimation needs the residual panel; build the problem with from_panels")
        first = x.copy()
        raw_sigma = infer.bootstrap_sigma(problem.eta_panel, problem.simulate(first), problem.moment_spec,
                                          options.B, options.seed, mode=options.bootstrap_mode,
                                          progress=options.progress)
        weight, sigma, ridged = efficient_weight(raw_sigma)
        if ridged:
            flags.append("sigma_ridge")
        problem = problem.with_weight(weight)
        x, fx, converged, more, counter = _minimize(problem, first, options)
        restarts += more
        evals += counter.n_evals
        penalized += counter.n_penalized
        logger.info("two-step estimate: objective %.6g", fx)

    psi_sim = problem.simulated_psi(x)
    logger.info("SMM estimate %s objective=%.6g evals=%d", dict(zip(problem.spec.free_names, np.round(x, 6))),
                fx, evals)
    return SMMResult(x, problem.spec.expand(x), tuple(problem.spec.free_names), fx, evals, penalized,
                     converged, restarts, psi_sim, problem.psi_T - psi_sim, problem.weight,
                     options.two_step, sigma, first, tuple(flags))
