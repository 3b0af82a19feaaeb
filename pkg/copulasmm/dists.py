"""Distributions used by the factor model.

Hansen's standardized skewed Student-t is parameterized by the inverse degrees of
freedom ``zeta`` (tail thickness, 0 < zeta < 1/2) and the skewness ``xi``
(-1 < xi < 1). With eta = 1/zeta the constants are

    c = Gamma((eta + 1) / 2) / (sqrt(pi * (eta - 2)) * Gamma(eta / 2))
    a = 4 * xi * c * (eta - 2) / (eta - 1)
    b = sqrt(1 + 3 * xi**2 - a**2)

and the density is

    b c (1 + ((b x + a) / (1 - xi))**2 / (eta - 2)) ** (-(eta + 1) / 2)   for x < -a/b
    b c (1 + ((b x + a) / (1 + xi))**2 / (eta - 2)) ** (-(eta + 1) / 2)   for x >= -a/b

which has mean zero and unit variance.
"""
from dataclasses import dataclass
from typing import Sequence, Tuple, Union

import numpy as np
from scipy import optimize, special

from .errors import ParameterDomainError

ArrayLike = Union[float, Sequence[float], np.ndarray]

# closed-form quantile is polished by bisection above this tail thickness
BISECTION_ZETA = 0.45
BISECTION_XTOL = 1e-12


@dataclass(frozen=True)
class SkewT:
    zeta: float
    xi: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.zeta < 0.5:
            raise ParameterDomainError("zeta", self.zeta, "(0, 0.5)")
        if not -1.0 < self.xi < 1.0:
            raise ParameterDomainError("xi", self.xi, "(-1, 1)")

    @property
    def dof(self) -> float:
        return 1.0 / self.zeta

    def constants(self) -> Tuple[float, float, float]:
        """Return Hansen's (a, b, c)."""
        eta, lam = self.dof, self.xi
        c = float(np.exp(special.gammaln((eta + 1) / 2) - special.gammaln(eta / 2)
                         - 0.5 * np.log(np.pi * (eta - 2))))
        a = 4.0 * lam * c * (eta - 2) / (eta - 1)
        b = float(np.sqrt(1.0 + 3.0 * lam ** 2 - a ** 2))
        return a, b, c


def _out(values: np.ndarray, scalar: bool):
    return float(values[()]) if scalar else values


def skewt_logpdf(x: ArrayLike, d: SkewT):
    scalar = np.ndim(x) == 0
    x = np.asarray(x, dtype=float)
    a, b, c = d.constants()
    eta, lam = d.dof, d.xi
    skew = np.where(x < -a / b, 1.0 - lam, 1.0 + lam)
    z = (b * x + a) / skew
    lp = np.log(b) + np.log(c) - (eta + 1) / 2 * np.log1p(z ** 2 / (eta - 2))
    return _out(lp, scalar)


def skewt_pdf(x: ArrayLike, d: SkewT):
    scalar = np.ndim(x) == 0
    return _out(np.exp(np.asarray(skewt_logpdf(x, d))), scalar)


def skewt_cdf(x: ArrayLike, d: SkewT):
    scalar = np.ndim(x) == 0
    x = np.asarray(x, dtype=float)
    a, b, _ = d.constants()
    eta, lam = d.dof, d.xi
    scale = np.sqrt(eta / (eta - 2))
    with np.errstate(invalid="ignore"):
        lower = (1 - lam) * special.stdtr(eta, (b * x + a) / (1 - lam) * scale)
        upper = (1 - lam) / 2 + (1 + lam) * (special.stdtr(eta, (b * x + a) / (1 + lam) * scale) - 0.5)
    p = np.where(x < -a / b, lower, upper)
    return _out(np.clip(p, 0.0, 1.0), scalar)


def _check_probability(u: np.ndarray, slot: str = "u"):
    if np.any(~((u > 0.0) & (u < 1.0))):
        bad = u[~((u > 0.0) & (u < 1.0))].ravel()[0]
        raise ParameterDomainError(slot, float(bad), "(0, 1)")


def skewt_quantile(u: ArrayLike, d: SkewT):
    """Inverse CDF by Hansen's piecewise closed form."""
    scalar = np.ndim(u) == 0
    u = np.asarray(u, dtype=float)
    _check_probability(u)
    a, b, _ = d.constants()
    eta, lam = d.dof, d.xi
    split = (1 - lam) / 2
    lower = u < split
    p = np.where(lower, u / (1 - lam), 0.5 + (u - split) / (1 + lam))
    t = special.stdtrit(eta, np.clip(p, 0.0, 1.0))
    skew = np.where(lower, 1 - lam, 1 + lam)
    q = (t * skew * np.sqrt(1 - 2 / eta) - a) / b
    if d.zeta > BISECTION_ZETA:
        q = _polish_quantile(np.atleast_1d(q), np.atleast_1d(u), d).reshape(np.shape(u))
    return _out(q, scalar)


def _polish_quantile(q: np.ndarray, u: np.ndarray, d: SkewT) -> np.ndarray:
    # very heavy tails: stdtrit loses accuracy, so bracket and bisect offending entries
    q = q.astype(float).copy()
    resid = np.abs(np.asarray(skewt_cdf(q, d)) - u)
    for k in np.flatnonzero(~np.isfinite(q) | (resid > 1e-10)):
        target = u.flat[k]
        x0 = q.flat[k] if np.isfinite(q.flat[k]) else 0.0
        step = 1.0
        lo, hi = x0 - step, x0 + step
        while skewt_cdf(lo, d) > target:
            step *= 2.0
            lo = x0 - step
        while skewt_cdf(hi, d) < target:
            step *= 2.0
            hi = x0 + step
        q.flat[k] = optimize.bisect(lambda x: skewt_cdf(x, d) - target, lo, hi,
                                    xtol=BISECTION_XTOL, maxiter=500)
    return q


def logabsnormal_pdf(z: ArrayLike):
    """Density of log|Z| for standard normal Z."""
    scalar = np.ndim(z) == 0
    z = np.asarray(z, dtype=float)
    with np.errstate(over="ignore"):
        logf = 0.5 * (np.log(2.0 / np.pi) + 2.0 * z - np.exp(2.0 * z))
    return _out(np.exp(logf), scalar)


def logabsnormal_cdf(z: ArrayLike):
    scalar = np.ndim(z) == 0
    z = np.asarray(z, dtype=float)
    with np.errstate(over="ignore"):
        p = 2.0 * special.ndtr(np.exp(z)) - 1.0
    return _out(p, scalar)


def logabsnormal_quantile(u: ArrayLike):
    scalar = np.ndim(u) == 0
    u = np.asarray(u, dtype=float)
    _check_probability(u)
    return _out(np.log(special.ndtri((1.0 + u) / 2.0)), scalar)


# E[log|Z|] and Var[log|Z|] for standard normal Z
LOGABSNORMAL_MEAN = (-np.euler_gamma - np.log(2.0)) / 2.0
LOGABSNORMAL_VAR = np.pi ** 2 / 8.0


def normal_cdf_quantile(value: ArrayLike, direction: str = "cdf"):
    scalar = np.ndim(value) == 0
    value = np.asarray(value, dtype=float)
    if direction == "cdf":
        out = special.ndtr(value)
    elif direction == "quantile":
        _check_probability(value)
        out = special.ndtri(value)
    else:
        raise ValueError(f"direction must be 'cdf' or 'quantile', got {direction!r}")
    return _out(out, scalar)


# families understood by the simulator and their parameter slots
FAMILY_PARAMS = {
    "skewt": ("zeta", "xi"),
    "normal": (),
    "logabsnormal": (),
}


def quantile_for(family: str, u: np.ndarray, params: Sequence[float] = ()) -> np.ndarray:
    """Apply the quantile transform of `family` to stored uniforms."""
    if family == "skewt":
        return np.asarray(skewt_quantile(u, SkewT(*params)))
    if family == "normal":
        return np.asarray(normal_cdf_quantile(u, "quantile"))
    if family == "logabsnormal":
        return np.asarray(logabsnormal_quantile(u))
    raise ValueError(f"unknown distribution family {family!r}")
