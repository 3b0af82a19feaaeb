"""Factor copula specification, fixed draw bank and panel simulation.

A parameter vector is addressed through named slots:

    alpha[q,j]   loading of group q on simulable factor j
    beta[q,k]    loading of group q on estimable factor k
    zeta_f{j}, xi_f{j}   shape of simulable factor j (skewed-t only)
    zeta_eps, xi_eps     shape of the idiosyncratic term (skewed-t only)

Group and factor indices in slot names are 1-based. The full vector is packed
group by group (alpha then beta), followed by the factor shapes and the
idiosyncratic shape. Ties and fixed values remove slots from the free vector
seen by the optimizer.
"""
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple
import logging

import numpy as np

from . import dists
from .errors import ConfigError, ParameterDomainError

logger = logging.getLogger("copulasmm.simcore")

# strictly-interior uniforms from 53-bit integers
_UNIFORM_BITS = 2 ** 53

DEFAULT_BOUNDS = {
    "alpha": (-10.0, 10.0),
    "beta": (-10.0, 10.0),
    "zeta": (0.01, 0.49),
    "xi": (-0.95, 0.95),
}

DOMAINS = {
    "zeta": (0.0, 0.5),
    "xi": (-1.0, 1.0),
}


def slot_kind(name: str) -> str:
    for kind in ("alpha", "beta", "zeta", "xi"):
        if name.startswith(kind):
            return kind
    raise ConfigError(f"unknown parameter slot {name!r}")


@dataclass(frozen=True)
class FactorCopulaSpec:
    groups: Tuple[int, ...]
    p_alpha: int = 1
    p_beta: int = 0
    factor_dist: str = "skewt"
    eps_dist: str = "skewt"
    z_dist: Optional[str] = None
    ties: Mapping[str, str] = field(default_factory=dict)
    fixed: Mapping[str, float] = field(default_factory=dict)
    bounds_override: Mapping[str, Tuple[float, float]] = field(default_factory=dict)

    def __post_init__(self):
        groups = tuple(int(g) for g in self.groups)
        object.__setattr__(self, "groups", groups)
        if len(groups) < 2:
            raise ConfigError("a factor copula needs at least two series")
        labels = sorted(set(groups))
        if labels != list(range(len(labels))):
            raise ConfigError(f"group labels must be 0..Q-1 with every group nonempty, got {labels}")
        if self.p_alpha < 1 or self.p_beta < 0:
            raise ConfigError(f"need p_alpha >= 1 and p_beta >= 0, got {self.p_alpha}, {self.p_beta}")
        for family in (self.factor_dist, self.eps_dist):
            if family not in dists.FAMILY_PARAMS:
                raise ConfigError(f"unknown distribution family {family!r}")
        if self.z_dist is not None:
            if self.z_dist not in ("normal", "logabsnormal"):
                raise ConfigError(f"simulable Z must be 'normal' or 'logabsnormal', got {self.z_dist!r}")
            if self.p_beta == 0:
                raise ConfigError("z_dist given but the model has no estimable factor")
        names = set(self.slot_names)
        for slot, target in self.ties.items():
            if slot not in names or target not in names:
                raise ConfigError(f"tie {slot} -> {target} references an unknown slot")
            if target in self.ties or target in self.fixed:
                raise ConfigError(f"tie target {target} must itself be free")
            if slot in self.fixed:
                raise ConfigError(f"slot {slot} is both tied and fixed")
        for slot in self.fixed:
            if slot not in names:
                raise ConfigError(f"fixed value for unknown slot {slot!r}")
        for slot in self.bounds_override:
            if slot not in names:
                raise ConfigError(f"bounds for unknown slot {slot!r}")

    @property
    def n(self) -> int:
        return len(self.groups)

    @property
    def Q(self) -> int:
        return max(self.groups) + 1

    @property
    def group_array(self) -> np.ndarray:
        return np.asarray(self.groups, dtype=int)

    def members(self, q: int) -> List[int]:
        return [i for i, g in enumerate(self.groups) if g == q]

    @property
    def slot_names(self) -> List[str]:
        names = []
        for q in range(1, self.Q + 1):
            names += [f"alpha[{q},{j}]" for j in range(1, self.p_alpha + 1)]
            names += [f"beta[{q},{k}]" for k in range(1, self.p_beta + 1)]
        for j in range(1, self.p_alpha + 1):
            names += [f"{p}_f{j}" for p in dists.FAMILY_PARAMS[self.factor_dist]]
        names += [f"{p}_eps" for p in dists.FAMILY_PARAMS[self.eps_dist]]
        return names

    @property
    def p(self) -> int:
        return len(self.slot_names)

    @property
    def free_names(self) -> List[str]:
        return [s for s in self.slot_names if s not in self.ties and s not in self.fixed]

    def bounds(self) -> np.ndarray:
        """(p_free, 2) box for the free parameters."""
        rows = [self.bounds_override.get(s, DEFAULT_BOUNDS[slot_kind(s)]) for s in self.free_names]
        return np.array(rows, dtype=float).reshape(-1, 2)

    def expand(self, free: Sequence[float]) -> np.ndarray:
        free = np.asarray(free, dtype=float)
        names = self.free_names
        if free.shape != (len(names),):
            raise ConfigError(f"expected {len(names)} free parameters {names}, got shape {free.shape}")
        values: Dict[str, float] = dict(zip(names, free))
        values.update({s: float(v) for s, v in self.fixed.items()})
        for slot, target in self.ties.items():
            values[slot] = values[target]
        return np.array([values[s] for s in self.slot_names])

    def free_from_full(self, full: Sequence[float]) -> np.ndarray:
        lookup = dict(zip(self.slot_names, np.asarray(full, dtype=float)))
        return np.array([lookup[s] for s in self.free_names])

    def named(self, full: Sequence[float]) -> Dict[str, float]:
        return dict(zip(self.slot_names, map(float, full)))

    def unpack(self, full: Sequence[float]):
        """Split a full vector into (alpha (Q, p_alpha), beta (Q, p_beta), factor params, eps params)."""
        full = np.asarray(full, dtype=float)
        if full.shape != (self.p,):
            raise ConfigError(f"expected {self.p} parameters, got shape {full.shape}")
        width = self.p_alpha + self.p_beta
        loadings = full[: self.Q * width].reshape(self.Q, width)
        alpha, beta = loadings[:, : self.p_alpha], loadings[:, self.p_alpha:]
        k_f = len(dists.FAMILY_PARAMS[self.factor_dist])
        start = self.Q * width
        gamma = full[start: start + k_f * self.p_alpha].reshape(self.p_alpha, k_f)
        delta = full[start + k_f * self.p_alpha:]
        return alpha, beta, gamma, delta

    def check_domain(self, full: Sequence[float]):
        for name, value in zip(self.slot_names, np.asarray(full, dtype=float)):
            kind = slot_kind(name)
            if kind in DOMAINS:
                lo, hi = DOMAINS[kind]
                if not lo < value < hi:
                    raise ParameterDomainError(name, float(value), f"({lo}, {hi})")


@dataclass(frozen=True, eq=False)
class DrawBank:
    eps_u: np.ndarray
    factor_u: np.ndarray
    z_u: Optional[np.ndarray]
    seed: int
    dims: Tuple[int, int, int, int]

    def __post_init__(self):
        for arr in (self.eps_u, self.factor_u, self.z_u):
            if arr is not None:
                arr.flags.writeable = False

    @property
    def T(self) -> int:
        return self.dims[1]

    @property
    def S(self) -> int:
        return self.dims[2]


def uniforms(rng: np.random.Generator, shape) -> np.ndarray:
    return (rng.integers(0, _UNIFORM_BITS, size=shape, dtype=np.int64) + 0.5) / _UNIFORM_BITS


def make_draw_bank(dims: Sequence[int], seed: int, p_z: int = 0) -> DrawBank:
    """Draw the uniforms held fixed during estimation.

    dims is (n, T, S, p_alpha). With p_z > 0 the bank also stores per-(t, s)
    uniforms for a simulable estimable factor.
    """
    dims = tuple(int(d) for d in dims)
    if len(dims) != 4:
        raise ParameterDomainError("dims", float(len(dims)), "(n, T, S, p_alpha)")
    for name, d in zip(("n", "T", "S", "p_alpha"), dims):
        if d < 1:
            raise ParameterDomainError(name, float(d), "[1, inf)")
    n, T, S, p_alpha = dims
    eps_ss, factor_ss, z_ss = np.random.SeedSequence(seed).spawn(3)
    eps_u = uniforms(np.random.Generator(np.random.Philox(eps_ss)), (n, T, S))
    factor_u = uniforms(np.random.Generator(np.random.Philox(factor_ss)), (T, S, p_alpha))
    z_u = None
    if p_z > 0:
        z_u = uniforms(np.random.Generator(np.random.Philox(z_ss)), (T, S, p_z))
    return DrawBank(eps_u, factor_u, z_u, int(seed), dims)


def simulate_panel(spec: FactorCopulaSpec, theta: Sequence[float], z_hat: Optional[np.ndarray],
                   bank: DrawBank) -> np.ndarray:
    """Simulated factor panel indexed (i, t, s)."""
    full = np.asarray(theta, dtype=float)
    spec.check_domain(full)
    n, T, S, p_alpha = bank.dims
    if n != spec.n or p_alpha != spec.p_alpha:
        raise ConfigError(f"draw bank dims {bank.dims} do not match n={spec.n}, p_alpha={spec.p_alpha}")
    alpha, beta, gamma, delta = spec.unpack(full)

    factors = np.stack([dists.quantile_for(spec.factor_dist, bank.factor_u[..., j], gamma[j])
                        for j in range(p_alpha)], axis=-1)
    eps = dists.quantile_for(spec.eps_dist, bank.eps_u, delta)
    a_i = alpha[spec.group_array]
    x = eps + np.einsum("ij,tsj->its", a_i, factors)

    if spec.p_beta:
        if spec.z_dist is not None:
            if bank.z_u is None or bank.z_u.shape[-1] != spec.p_beta:
                raise ConfigError("simulable Z needs z uniforms in the draw bank")
            z = dists.quantile_for(spec.z_dist, bank.z_u)
        else:
            if z_hat is None:
                raise ConfigError("the model has an estimable factor but no z_hat was given")
            z_hat = np.asarray(z_hat, dtype=float)
            if z_hat.ndim == 1:
                z_hat = z_hat[:, None]
            if z_hat.shape != (T, spec.p_beta):
                raise ConfigError(f"z_hat has shape {z_hat.shape}, expected {(T, spec.p_beta)}")
            z = z_hat[:, None, :]
        x = x + np.einsum("ik,tsk->its", beta[spec.group_array], np.broadcast_to(z, (T, S, spec.p_beta)))
    elif z_hat is not None and np.size(z_hat):
        raise ConfigError("z_hat given for a model without estimable factors")
    return x

