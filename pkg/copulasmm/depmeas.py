"""Rank-based dependence measures and their group aggregation."""
from dataclasses import dataclass
from itertools import combinations
from typing import Iterable, List, Optional, Sequence, Tuple
import logging

import numpy as np
from scipy import stats

from .errors import DataError, MomentSpecError

logger = logging.getLogger("copulasmm.depmeas")

Measure = Tuple[str, Optional[float]]


def pseudo_obs(values: Sequence[float]) -> np.ndarray:
    """rank / (N + 1) with average ranks for ties."""
    values = np.asarray(values, dtype=float)
    if values.ndim != 1 or values.size < 2:
        raise DataError(f"pseudo-observations need at least two values, got shape {values.shape}")
    return stats.rankdata(values) / (values.size + 1)


def pseudo_obs_panel(panel: np.ndarray) -> np.ndarray:
    """Row-wise pseudo-observations of an (n, N) panel."""
    panel = np.asarray(panel, dtype=float)
    if panel.ndim != 2 or panel.shape[1] < 2:
        raise DataError(f"panel must be (n, N) with N >= 2, got shape {panel.shape}")
    return stats.rankdata(panel, axis=1) / (panel.shape[1] + 1)


def _check_pair(u, v) -> Tuple[np.ndarray, np.ndarray]:
    u, v = np.asarray(u, dtype=float), np.asarray(v, dtype=float)
    if u.shape != v.shape or u.ndim != 1:
        raise DataError(f"pair lengths differ: {u.shape} vs {v.shape}")
    return u, v


def _check_tau(tau: float):
    if not 0.0 < tau < 1.0:
        raise MomentSpecError(f"quantile-dependence level must lie in (0, 1), got {tau}")


def spearman_stat(u, v) -> float:
    u, v = _check_pair(u, v)
    return 12.0 / u.size * float(np.dot(u, v)) - 3.0


def qdep_stat(u, v, tau: float) -> float:
    u, v = _check_pair(u, v)
    _check_tau(tau)
    if tau <= 0.5:
        return float(np.count_nonzero((u <= tau) & (v <= tau))) / (u.size * tau)
    return float(np.count_nonzero((u > tau) & (v > tau))) / (u.size * (1.0 - tau))


def kendall_stat(u, v) -> float:
    u, v = _check_pair(u, v)
    if u.size < 2:
        raise DataError("Kendall's tau needs at least two observations")
    return float(stats.kendalltau(u, v)[0])


@dataclass(frozen=True)
class MomentSpec:
    groups: Tuple[int, ...]
    spearman: bool = True
    taus: Tuple[float, ...] = ()
    kendall: bool = False
    per_group: bool = True

    def __post_init__(self):
        groups = tuple(int(g) for g in self.groups)
        object.__setattr__(self, "groups", groups)
        taus = tuple(sorted({float(t) for t in self.taus}))
        for tau in taus:
            _check_tau(tau)
        object.__setattr__(self, "taus", taus)
        if not self.measures:
            raise MomentSpecError("moment menu is empty")
        if len(groups) < 2:
            raise MomentSpecError("dependence moments need at least two series")
        for q in range(self.Q if self.per_group else 0):
            size = groups.count(q)
            if size < 2:
                raise MomentSpecError(f"group {q + 1} has {size} member(s); every group needs at least two")

    @property
    def Q(self) -> int:
        return max(self.groups) + 1

    @property
    def measures(self) -> List[Measure]:
        out: List[Measure] = [("spearman", None)] if self.spearman else []
        out += [("qdep", t) for t in self.taus]
        if self.kendall:
            out.append(("kendall", None))
        return out

    @property
    def blocks(self) -> List[List[Tuple[int, int]]]:
        """Pairs (i, j), i < j, aggregated into each block of the moment vector."""
        if not self.per_group:
            return [list(combinations(range(len(self.groups)), 2))]
        return [list(combinations([i for i, g in enumerate(self.groups) if g == q], 2))
                for q in range(self.Q)]

    @property
    def n_moments(self) -> int:
        return len(self.blocks) * len(self.measures)

    @property
    def labels(self) -> List[str]:
        names = [m if tau is None else f"{m}{tau:g}" for m, tau in self.measures]
        if not self.per_group:
            return names
        return [f"{name}[{q + 1}]" for q in range(self.Q) for name in names]

    def describe(self) -> str:
        return ",".join(m if tau is None else f"{m}:{tau:g}" for m, tau in self.measures)


def measure_matrices(u: np.ndarray, spec: MomentSpec) -> List[np.ndarray]:
    """One (n, n) matrix per measure, computed from row pseudo-observations."""
    n, N = u.shape
    out = []
    for name, tau in spec.measures:
        if name == "spearman":
            out.append(12.0 / N * (u @ u.T) - 3.0)
        elif name == "qdep":
            if tau <= 0.5:
                hit = (u <= tau).astype(float)
                out.append(hit @ hit.T / (N * tau))
            else:
                hit = (u > tau).astype(float)
                out.append(hit @ hit.T / (N * (1.0 - tau)))
        else:
            # only pairs that enter a block; the rest stay NaN
            mat = np.full((n, n), np.nan)
            np.fill_diagonal(mat, 1.0)
            for i, j in sorted({pair for pairs in spec.blocks for pair in pairs}):
                mat[i, j] = mat[j, i] = kendall_stat(u[i], u[j])
            out.append(mat)
    return out


def measure_pair(u: np.ndarray, v: np.ndarray, spec: MomentSpec) -> np.ndarray:
    values = []
    for name, tau in spec.measures:
        if name == "spearman":
            values.append(spearman_stat(u, v))
        elif name == "qdep":
            values.append(qdep_stat(u, v, tau))
        else:
            values.append(kendall_stat(u, v))
    return np.array(values)


def aggregate(u: np.ndarray, spec: MomentSpec) -> np.ndarray:
    """Block-averaged measures from an (n, N) pseudo-observation panel, block-major."""
    if u.shape[0] != len(spec.groups):
        raise DataError(f"panel has {u.shape[0]} series, moment spec expects {len(spec.groups)}")
    mats = measure_matrices(u, spec)
    out = []
    for pairs in spec.blocks:
        rows, cols = np.array(pairs).T
        out.extend(float(np.mean(m[rows, cols])) for m in mats)
    return np.array(out)


def empirical_moments(eta_panel: np.ndarray, spec: MomentSpec) -> np.ndarray:
    return aggregate(pseudo_obs_panel(eta_panel), spec)


def simulated_moments(x_panel: np.ndarray, spec: MomentSpec) -> np.ndarray:
    """Moments of an (n, T, S) panel, ranks pooled over all T*S cells of a series."""
    x_panel = np.asarray(x_panel, dtype=float)
    if x_panel.ndim != 3:
        raise DataError(f"simulated panel must be (n, T, S), got shape {x_panel.shape}")
    n = x_panel.shape[0]
    return aggregate(pseudo_obs_panel(x_panel.reshape(n, -1)), spec)


def qdep_curve(panel: np.ndarray, groups: Sequence[int], taus: Iterable[float]) -> np.ndarray:
    """Group-averaged quantile dependence on a grid of levels, shape (Q, len(taus))."""
    panel = np.asarray(panel, dtype=float)
    panel = panel.reshape(panel.shape[0], -1)
    spec = MomentSpec(tuple(groups), spearman=False, taus=tuple(taus))
    return aggregate(pseudo_obs_panel(panel), spec).reshape(spec.Q, len(spec.taus))
