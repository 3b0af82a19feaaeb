"""Location-scale filtering of the margins and construction of the estimable factor."""
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple
import logging

import numpy as np
from scipy import optimize, signal
from scipy.special import expit, logit

from . import dists
from .errors import ConfigError, DataError, FitError, NumericalError

logger = logging.getLogger("copulasmm.margins")

MEAN_SPECS = ("zero", "constant", "ar1", "ar1x")
VAR_SPECS = ("constant", "garch", "gjr", "gjrx")
INNOVATIONS = ("gaussian", "skewt")

MEAN_PARAMS = {
    "zero": [],
    "constant": ["c"],
    "ar1": ["c", "phi"],
    "ar1x": ["c", "phi", "lambda_x"],
}
VAR_PARAMS = {
    "constant": ["sigma"],
    "garch": ["omega", "beta", "alpha"],
    "gjr": ["omega", "beta", "alpha", "gamma"],
    "gjrx": ["omega", "beta", "alpha", "kappa", "kappa_neg", "gamma"],
}
SHAPE_PARAMS = {
    "gaussian": [],
    "skewt": ["zeta", "xi"],
}

MIN_OBS = 50
MAX_ITER = 500
GTOL = 1e-8
ZERO_FLOOR = 1e-12
# box for the unconstrained coordinates handed to L-BFGS-B
UNCONSTRAINED_BOUND = 30.0
ZETA_RANGE = (0.01, 0.49)
XI_SCALE = 0.99


@dataclass(frozen=True, eq=False)
class MarginModel:
    mean_spec: str = "ar1"
    var_spec: str = "garch"
    innovation_dist: str = "gaussian"
    lam: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.mean_spec not in MEAN_SPECS:
            raise ConfigError(f"unknown mean spec {self.mean_spec!r}; choose from {MEAN_SPECS}")
        if self.var_spec not in VAR_SPECS:
            raise ConfigError(f"unknown variance spec {self.var_spec!r}; choose from {VAR_SPECS}")
        if self.innovation_dist not in INNOVATIONS:
            raise ConfigError(f"unknown innovation distribution {self.innovation_dist!r}")
        if self.lam is not None:
            lam = np.array(self.lam, dtype=float)
            if lam.shape != (len(self.param_names),):
                raise ConfigError(f"expected {len(self.param_names)} parameters "
                                  f"{self.param_names}, got {lam.shape}")
            lam.flags.writeable = False
            object.__setattr__(self, "lam", lam)
            self.check_params()

    @property
    def param_names(self) -> List[str]:
        return (MEAN_PARAMS[self.mean_spec] + VAR_PARAMS[self.var_spec]
                + SHAPE_PARAMS[self.innovation_dist])

    @property
    def uses_exog(self) -> bool:
        return self.mean_spec == "ar1x" or self.var_spec == "gjrx"

    def params(self) -> Dict[str, float]:
        if self.lam is None:
            return {}
        return dict(zip(self.param_names, map(float, self.lam)))

    def with_params(self, lam: np.ndarray) -> "MarginModel":
        return replace(self, lam=np.asarray(lam, dtype=float))

    def persistence(self) -> float:
        p = self.params()
        return p.get("beta", 0.0) + p.get("alpha", 0.0) + 0.5 * p.get("gamma", 0.0)

    def check_params(self):
        p = self.params()
        for name in ("sigma", "omega"):
            if name in p and not p[name] > 0:
                raise NumericalError(f"margin parameter {name}={p[name]} must be positive")
        for name in ("beta", "alpha", "gamma", "kappa"):
            if name in p and p[name] < 0:
                raise NumericalError(f"margin parameter {name}={p[name]} must be nonnegative")
        # the exogenous leverage may be negative as long as the down-move loading stays nonnegative
        if "kappa_neg" in p and p["kappa"] + p["kappa_neg"] < 0:
            raise NumericalError(f"margin parameters kappa={p['kappa']} and kappa_neg={p['kappa_neg']} "
                                 "must satisfy kappa + kappa_neg >= 0")
        if self.var_spec != "constant" and not self.persistence() < 1.0:
            raise NumericalError(f"variance recursion not stationary (persistence {self.persistence():.4f})")
        if "phi" in p and not abs(p["phi"]) < 1.0:
            raise NumericalError(f"AR coefficient phi={p['phi']} must lie in (-1, 1)")
        if "zeta" in p:
            dists.SkewT(p["zeta"], p["xi"])


@dataclass(frozen=True, eq=False)
class MarginFit:
    model: MarginModel
    loglik: float
    std_errors: np.ndarray
    converged: bool
    at_boundary: bool
    n_iter: int
    message: str = ""

    def report(self) -> Dict[str, float]:
        out = {}
        for name, value, se in zip(self.model.param_names, self.model.lam, self.std_errors):
            out[name] = float(value)
            out[f"se_{name}"] = float(se)
        out["loglik"] = self.loglik
        return out


def _prepare(y, exog, model: MarginModel) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    y = np.asarray(y, dtype=float)
    if y.ndim != 1:
        raise DataError("margin series must be one-dimensional")
    if not np.all(np.isfinite(y)):
        raise DataError("margin series contains missing or non-finite values")
    if model.uses_exog:
        if exog is None:
            raise ConfigError(f"model {model.mean_spec}/{model.var_spec} needs an exogenous series")
        exog = np.asarray(exog, dtype=float)
        if exog.shape != y.shape:
            raise DataError(f"exogenous series length {exog.shape} does not match {y.shape}")
        if not np.all(np.isfinite(exog)):
            raise DataError("exogenous series contains missing or non-finite values")
    elif exog is not None:
        raise ConfigError(f"model {model.mean_spec}/{model.var_spec} does not use an exogenous series")
    return y, exog


def _conditional_mean(y: np.ndarray, exog: Optional[np.ndarray], p: Dict[str, float],
                      mean_spec: str) -> np.ndarray:
    if mean_spec == "zero":
        return np.zeros_like(y)
    if mean_spec == "constant":
        return np.full_like(y, p["c"])
    phi = p["phi"]
    mu = np.empty_like(y)
    mu[1:] = p["c"] + phi * y[:-1]
    unconditional = p["c"]
    if mean_spec == "ar1x":
        mu[1:] += p["lambda_x"] * exog[:-1]
        unconditional += p["lambda_x"] * exog.mean()
    mu[0] = unconditional / (1.0 - phi)
    return mu


def _conditional_variance(y: np.ndarray, eps: np.ndarray, exog: Optional[np.ndarray],
                          p: Dict[str, float], var_spec: str) -> np.ndarray:
    if var_spec == "constant":
        return np.full_like(eps, p["sigma"] ** 2)
    e2 = eps[:-1] ** 2
    drive = p["omega"] + p["alpha"] * e2
    if var_spec in ("gjr", "gjrx"):
        drive = drive + p["gamma"] * e2 * (eps[:-1] < 0)
    if var_spec == "gjrx":
        x2 = exog[:-1] ** 2
        drive = drive + p["kappa"] * x2 + p["kappa_neg"] * x2 * (exog[:-1] < 0)
    v = np.empty_like(eps)
    v[0] = np.var(y)
    beta = p["beta"]
    v[1:] = signal.lfilter([1.0], [1.0, -beta], drive, zi=[beta * v[0]])[0]
    return v


def conditional_moments(y, exog, model: MarginModel) -> Tuple[np.ndarray, np.ndarray]:
    """Return (mean path, variance path) of the location-scale recursion."""
    y, exog = _prepare(y, exog, model)
    p = model.params()
    mu = _conditional_mean(y, exog, p, model.mean_spec)
    v = _conditional_variance(y, y - mu, exog, p, model.var_spec)
    return mu, v


def filter_residuals(y, exog, model: MarginModel) -> np.ndarray:
    """Standardized residuals (y_t - mu_t) / sigma_t."""
    if model.lam is None:
        raise ConfigError("cannot filter with an unfitted margin model")
    y, exog = _prepare(y, exog, model)
    mu, v = conditional_moments(y, exog, model)
    if not np.all(v > 0):
        raise NumericalError(f"nonpositive conditional variance at t={int(np.argmin(v > 0))}")
    return (y - mu) / np.sqrt(v)


def _loglik_terms(y, exog, model: MarginModel) -> np.ndarray:
    mu, v = conditional_moments(y, exog, model)
    if not np.all(v > 0):
        return np.full_like(y, -np.inf)
    z = (y - mu) / np.sqrt(v)
    if model.innovation_dist == "gaussian":
        return -0.5 * (np.log(2.0 * np.pi) + np.log(v) + z ** 2)
    p = model.params()
    return np.asarray(dists.skewt_logpdf(z, dists.SkewT(p["zeta"], p["xi"]))) - 0.5 * np.log(v)


def loglikelihood(y, exog, model: MarginModel) -> float:
    y, exog = _prepare(y, exog, model)
    return float(np.sum(_loglik_terms(y, exog, model)))


# --- unconstrained parameterization -------------------------------------------------

def _garch_block(model: MarginModel) -> List[str]:
    names = ["beta", "alpha"]
    if model.var_spec in ("gjr", "gjrx"):
        names.append("gamma")
    return names


def _to_unconstrained(model: MarginModel, p: Dict[str, float]) -> np.ndarray:
    out = []
    for name in MEAN_PARAMS[model.mean_spec]:
        out.append(np.arctanh(p[name]) if name == "phi" else p[name])
    if model.var_spec == "constant":
        out.append(np.log(p["sigma"]))
    else:
        out.append(np.log(p["omega"]))
        block = _garch_block(model)
        shares = np.array([p[k] * (0.5 if k == "gamma" else 1.0) for k in block])
        total = shares.sum()
        out.append(logit(total))
        out.extend(np.log(shares[:-1] / shares[-1]))
        if model.var_spec == "gjrx":
            down = max(p["kappa"] + p["kappa_neg"], ZERO_FLOOR)
            out.extend([np.log(max(p["kappa"], ZERO_FLOOR)), np.log(down)])
    if model.innovation_dist == "skewt":
        lo, hi = ZETA_RANGE
        out.append(logit((p["zeta"] - lo) / (hi - lo)))
        out.append(np.arctanh(p["xi"] / XI_SCALE))
    return np.clip(np.array(out, dtype=float), -UNCONSTRAINED_BOUND, UNCONSTRAINED_BOUND)


def _from_unconstrained(model: MarginModel, x: np.ndarray) -> np.ndarray:
    p: Dict[str, float] = {}
    it = iter(x)
    for name in MEAN_PARAMS[model.mean_spec]:
        v = next(it)
        p[name] = np.tanh(v) if name == "phi" else v
    if model.var_spec == "constant":
        p["sigma"] = np.exp(next(it))
    else:
        p["omega"] = np.exp(next(it))
        block = _garch_block(model)
        total = expit(next(it))
        logits = np.append([next(it) for _ in block[:-1]], 0.0)
        w = np.exp(logits - logits.max())
        w = total * w / w.sum()
        for k, share in zip(block, w):
            p[k] = share * (2.0 if k == "gamma" else 1.0)
        if model.var_spec == "gjrx":
            p["kappa"] = np.exp(next(it))
            p["kappa_neg"] = np.exp(next(it)) - p["kappa"]
    if model.innovation_dist == "skewt":
        lo, hi = ZETA_RANGE
        p["zeta"] = lo + (hi - lo) * expit(next(it))
        p["xi"] = XI_SCALE * np.tanh(next(it))
    return np.array([p[name] for name in model.param_names], dtype=float)


def _starting_values(y: np.ndarray, exog: Optional[np.ndarray], model: MarginModel) -> Dict[str, float]:
    var = float(np.var(y))
    p = {"c": float(np.mean(y)), "phi": 0.0, "lambda_x": 0.0,
         "sigma": float(np.sqrt(var)), "omega": 0.1 * var,
         "beta": 0.85, "alpha": 0.1, "zeta": 0.1, "xi": 0.0}
    if model.var_spec in ("gjr", "gjrx"):
        p.update(alpha=0.05, gamma=0.08)
    if model.var_spec == "gjrx":
        scale = 1e-3 * var / max(float(np.mean(exog ** 2)), ZERO_FLOOR)
        p.update(kappa=scale, kappa_neg=0.0)
    return p


def _numeric_hessian_se(nll, x: np.ndarray) -> np.ndarray:
    def grad(z):
        return optimize.approx_fprime(z, nll, 1e-6 * np.maximum(1.0, np.abs(z)))

    try:
        hess = optimize.approx_fprime(x, grad, 1e-4 * np.maximum(1.0, np.abs(x)))
        hess = 0.5 * (hess + hess.T)
        cov = np.linalg.inv(hess)
        return np.sqrt(np.where(np.diag(cov) > 0, np.diag(cov), np.nan))
    except (np.linalg.LinAlgError, ValueError):
        return np.full(x.shape, np.nan)


def fit_margin(y, exog, model: MarginModel, max_iter: int = MAX_ITER, gtol: float = GTOL) -> MarginFit:
    """(Quasi-)maximum-likelihood fit of a location-scale margin."""
    y, exog = _prepare(y, exog, model)
    T = y.size
    if T < MIN_OBS:
        raise DataError(f"margin fit needs at least {MIN_OBS} observations, got {T}")

    if model.var_spec == "constant" and model.innovation_dist == "gaussian" \
            and model.mean_spec in ("zero", "constant"):
        lam = [float(np.mean(y))] if model.mean_spec == "constant" else []
        centre = lam[0] if lam else 0.0
        lam.append(float(np.sqrt(np.mean((y - centre) ** 2))))
        fitted = model.with_params(np.array(lam))
        sd = fitted.lam[-1]
        se = np.array([sd / np.sqrt(T)] * (len(lam) - 1) + [sd / np.sqrt(2.0 * T)])
        return MarginFit(fitted, loglikelihood(y, exog, fitted), se, True, False, 0, "closed form")

    def nll_unconstrained(x):
        try:
            candidate = replace(model, lam=_from_unconstrained(model, x))
        except (NumericalError, ValueError):
            # tanh / expit saturate to the open-interval edge at the box limits
            return 1e10
        terms = _loglik_terms(y, exog, candidate)
        value = -float(np.mean(terms))
        return value if np.isfinite(value) else 1e10

    x0 = _to_unconstrained(model, _starting_values(y, exog, model))
    bounds = [(-UNCONSTRAINED_BOUND, UNCONSTRAINED_BOUND)] * x0.size
    res = optimize.minimize(nll_unconstrained, x0, method="L-BFGS-B", bounds=bounds,
                            options={"maxiter": max_iter, "gtol": gtol})
    fitted = model.with_params(_from_unconstrained(model, res.x))
    loglik = loglikelihood(y, exog, fitted)
    at_boundary = bool(np.any(np.abs(res.x) > UNCONSTRAINED_BOUND - 1e-3)) \
        or (model.var_spec != "constant" and fitted.persistence() > 0.999)

    def nll_natural(lam):
        try:
            candidate = replace(model, lam=np.asarray(lam, dtype=float))
            candidate.check_params()
        except (NumericalError, ValueError):
            return np.nan
        return -float(np.sum(_loglik_terms(y, exog, candidate)))

    se = _numeric_hessian_se(nll_natural, fitted.lam.copy())
    # status 1: iteration limit reached; status 2: abnormal line-search exit
    converged = bool(res.success or res.status != 1)
    message = str(res.message)
    if not res.success and res.status != 1:
        message = f"abnormal termination (status {res.status}): {message}"
        logger.warning("margin fit %s/%s stopped early: %s", model.mean_spec, model.var_spec, message)
    result = MarginFit(fitted, loglik, se, converged, at_boundary, int(res.nit), message)
    if not converged:
        raise FitError(f"margin fit did not converge after {res.nit} iterations: {res.message}", best=result)
    if at_boundary:
        logger.warning("margin fit %s/%s at parameter boundary: %s",
                       model.mean_spec, model.var_spec, fitted.params())
    logger.debug("margin fit %s/%s/%s loglik=%.4f params=%s", model.mean_spec, model.var_spec,
                 model.innovation_dist, loglik, fitted.params())
    return result


def simulate_margin(model: MarginModel, innovations, exog=None, burn: int = 0) -> np.ndarray:
    """Generate y from the location-scale recursion driven by `innovations`.

    The first `burn` periods are discarded. The recursion starts at the
    unconditional mean and (exogenous-free) unconditional variance.
    """
    if model.lam is None:
        raise ConfigError("cannot simulate an unparameterized margin model")
    eta = np.asarray(innovations, dtype=float)
    if model.uses_exog:
        if exog is None or np.shape(exog) != eta.shape:
            raise ConfigError("simulation needs an exogenous path of the innovation length")
        exog = np.asarray(exog, dtype=float)
    p = model.params()
    c, phi, lx = p.get("c", 0.0), p.get("phi", 0.0), p.get("lambda_x", 0.0)
    y = np.empty_like(eta)
    if model.var_spec == "constant":
        v_prev = p["sigma"] ** 2
    else:
        v_prev = p["omega"] / (1.0 - model.persistence())
    autoregressive = model.mean_spec in ("ar1", "ar1x")
    y_prev, eps_prev = 0.0, 0.0
    for t in range(eta.size):
        if not autoregressive:
            mu = c
        elif t == 0:
            mu = (c + (lx * exog.mean() if model.mean_spec == "ar1x" else 0.0)) / (1.0 - phi)
        else:
            mu = c + phi * y_prev + (lx * exog[t - 1] if model.mean_spec == "ar1x" else 0.0)
        if model.var_spec == "constant" or t == 0:
            v = v_prev
        else:
            v = p["omega"] + p["beta"] * v_prev + p["alpha"] * eps_prev ** 2
            if model.var_spec in ("gjr", "gjrx"):
                v += p["gamma"] * eps_prev ** 2 * (eps_prev < 0)
            if model.var_spec == "gjrx":
                x = exog[t - 1]
                v += p["kappa"] * x ** 2 + p["kappa_neg"] * x ** 2 * (x < 0)
        eps = np.sqrt(v) * eta[t]
        y[t] = mu + eps
        y_prev, v_prev, eps_prev = y[t], v, eps
    return y[burn:]


# --- estimable factor -----------------------------------------------------------------

FACTOR_VARIANTS = ("none", "ar1", "logabs_garch", "logabs_gjr")


@dataclass(frozen=True, eq=False)
class FactorSourceModel:
    """Location model of the observed factor source.

    `innovations` sets the likelihood used by the log-abs GARCH/GJR fits; the
    AR(1) variant is fitted by least squares and ignores it.
    """
    variant: str = "ar1"
    innovations: str = "gaussian"
    nu: Optional[np.ndarray] = None
    margin: Optional[MarginModel] = None
    n_zeros_replaced: int = 0
    notes: List[str] = field(default_factory=list)

    def __post_init__(self):
        if self.variant not in FACTOR_VARIANTS:
            raise ConfigError(f"unknown factor source {self.variant!r}; choose from {FACTOR_VARIANTS}")
        if self.innovations not in INNOVATIONS:
            raise ConfigError(f"unknown factor source innovations {self.innovations!r}; choose from {INNOVATIONS}")


def estimable_factor(w, exog, source: FactorSourceModel) -> Tuple[FactorSourceModel, np.ndarray]:
    """Fit the location model of the factor source and return its generalized residual."""
    w = np.asarray(w, dtype=float)
    if w.ndim != 1 or not np.all(np.isfinite(w)):
        raise DataError("factor source series must be one-dimensional without missing values")
    if exog is not None:
        raise ConfigError(f"factor source {source.variant!r} does not use an exogenous series")

    if source.variant == "none":
        return replace(source, nu=np.array([])), w.copy()

    if source.variant == "ar1":
        if w.size < MIN_OBS:
            raise DataError(f"factor fit needs at least {MIN_OBS} observations, got {w.size}")
        nu = float(np.dot(w[1:], w[:-1]) / np.dot(w[:-1], w[:-1]))
        z = np.empty_like(w)
        z[0] = w[0]
        z[1:] = w[1:] - nu * w[:-1]
        logger.debug("AR(1) factor source nu=%.6f", nu)
        return replace(source, nu=np.array([nu])), z

    var_spec = "garch" if source.variant == "logabs_garch" else "gjr"
    shape = MarginModel("zero", var_spec, source.innovations)
    fit = fit_margin(w, None, shape)
    eta = filter_residuals(w, None, fit.model)
    tiny = np.abs(eta) < ZERO_FLOOR
    n_tiny = int(tiny.sum())
    notes = []
    if n_tiny:
        notes.append(f"{n_tiny} zero observation(s) floored at {ZERO_FLOOR}")
        logger.warning("factor source: %d zero observation(s) replaced by %g", n_tiny, ZERO_FLOOR)
    z = np.log(np.where(tiny, ZERO_FLOOR, np.abs(eta)))
    fitted = replace(source, nu=fit.model.lam.copy(), margin=fit.model,
                     n_zeros_replaced=n_tiny, notes=notes)
    return fitted, z
