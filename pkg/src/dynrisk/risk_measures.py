"""Exact expectile / VaR / CVaR on finite discrete distributions.

The ``*_sorted`` kernels take atom values sorted ascending together with
their probabilities and are shared by the exact dynamic-programming oracle.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from ._accel import njit
from .exceptions import DomainError

MERGE_TOL = 1e-12
PROB_TOL = 1e-12
# slack on cumulative-mass comparisons so that e.g. 0.1 + 0.2 reaches level 0.3
LEVEL_SLACK = 1e-12


@njit
def expectile_sorted(values, probs, alpha):
    """Root of alpha*E[(x-y)+] = (1-alpha)*E[(y-x)+] for ascending ``values``.

    The first-order condition is piecewise linear in y, so the root is found
    exactly on the bracketing segment rather than by iteration.
    """
    n = values.shape[0]
    if n == 1:
        return values[0]
    total_mass = 0.0
    total_sum = 0.0
    for i in range(n):
        total_mass += probs[i]
        total_sum += probs[i] * values[i]
    below_mass = 0.0
    below_sum = 0.0
    for k in range(n - 1):
        below_mass += probs[k]
        below_sum += probs[k] * values[k]
        above_mass = total_mass - below_mass
        above_sum = total_sum - below_sum
        y_next = values[k + 1]
        # g evaluated at the right end of segment [v_k, v_{k+1}]
        g_next = alpha * (above_sum - y_next * above_mass) - (1.0 - alpha) * (
            y_next * below_mass - below_sum
        )
        if g_next <= 0.0:
            denom = alpha * above_mass + (1.0 - alpha) * below_mass
            y = (alpha * above_sum + (1.0 - alpha) * below_sum) / denom
            if y < values[k]:
                y = values[k]
            elif y > y_next:
                y = y_next
            return y
    return values[n - 1]


@njit
def var_sorted(values, probs, alpha):
    """Lower alpha-quantile: smallest atom v with P[x <= v] >= alpha."""
    n = values.shape[0]
    cum = 0.0
    for i in range(n):
        cum += probs[i]
        if cum >= alpha - LEVEL_SLACK:
            return values[i]
    return values[n - 1]


@njit
def cvar_sorted(values, probs, alpha):
    """Mean of the bottom ``alpha`` probability mass (lower tail)."""
    n = values.shape[0]
    cum = 0.0
    acc = 0.0
    for i in range(n):
        p = probs[i]
        if cum + p >= alpha - LEVEL_SLACK:
            w = alpha - cum
            if w > 0.0:
                acc += w * values[i]
            return acc / alpha
        acc += p * values[i]
        cum += p
    return acc / alpha


@njit
def risk_sorted(values, probs, kind, alpha):
    if kind == 1:
        return cvar_sorted(values, probs, alpha)
    return expectile_sorted(values, probs, alpha)


@njit
def risk_unsorted(values, probs, kind, alpha):
    order = np.argsort(values, kind="mergesort")
    return risk_sorted(values[order], probs[order], kind, alpha)


@njit
def expectile_grad_term(sample_target, y, alpha):
    delta = sample_target - y
    if delta > 0.0:
        return alpha * delta
    return (1.0 - alpha) * delta


@njit
def quantile_grad_term(sample_target, y, alpha):
    if sample_target < y:
        return 1.0 - alpha
    return -alpha


class RiskKind(enum.IntEnum):
    EXPECTILE = 0
    CVAR = 1


@dataclass(frozen=True)
class RiskSpec:
    kind: RiskKind
    alpha: float

    def __post_init__(self):
        object.__setattr__(self, "kind", RiskKind(self.kind))
        _check_alpha(self.alpha)

    @classmethod
    def mean(cls) -> RiskSpec:
        return cls(RiskKind.EXPECTILE, 0.5)

    @classmethod
    def expectile(cls, alpha: float) -> RiskSpec:
        return cls(RiskKind.EXPECTILE, alpha)

    @classmethod
    def cvar(cls, alpha: float) -> RiskSpec:
        return cls(RiskKind.CVAR, alpha)

    @classmethod
    def parse(cls, name: str, alpha: float | None = None) -> RiskSpec:
        name = name.strip().lower()
        if name == "mean":
            return cls.mean()
        if alpha is None:
            raise DomainError(f"risk measure {name!r} needs an alpha")
        if name == "expectile":
            return cls.expectile(float(alpha))
        if name == "cvar":
            return cls.cvar(float(alpha))
        raise DomainError(f"unknown risk measure {name!r}")

    @property
    def is_mean(self) -> bool:
        return self.kind == RiskKind.EXPECTILE and self.alpha == 0.5

    def __str__(self):
        if self.is_mean:
            return "mean"
        return f"{self.kind.name.lower()}({self.alpha:g})"


def _check_alpha(alpha):
    if not (isinstance(alpha, (int, float, np.floating)) and 0.0 < alpha < 1.0):
        raise DomainError(f"alpha must lie in the open interval (0, 1), got {alpha!r}")


@dataclass(frozen=True, eq=False)
class DiscreteDistribution:
    """Finite-support distribution; atoms sorted ascending with merged duplicates.

    Build instances with :meth:`from_atoms` (or :meth:`point`), which sorts,
    merges values closer than ``MERGE_TOL`` and drops zero-probability atoms.
    """

    values: np.ndarray
    probs: np.ndarray

    @classmethod
    def from_atoms(cls, values, probs) -> DiscreteDistribution:
        values = np.asarray(values, dtype=float).ravel()
        probs = np.asarray(probs, dtype=float).ravel()
        if values.shape != probs.shape:
            raise DomainError("values and probs must have the same length")
        if values.size == 0:
            raise DomainError("empty distribution")
        if not np.all(np.isfinite(values)) or not np.all(np.isfinite(probs)):
            raise DomainError("atoms must be finite")
        if np.any(probs < 0):
            raise DomainError("negative probability")
        if abs(probs.sum() - 1.0) > PROB_TOL:
            raise DomainError(f"probabilities sum to {probs.sum()!r}, not 1")
        keep = probs > 0
        values, probs = values[keep], probs[keep]
        order = np.argsort(values, kind="mergesort")
        values, probs = values[order], probs[order]
        # group runs whose spread from the run start is within MERGE_TOL
        starts = [0]
        for i in range(1, values.size):
            if values[i] - values[starts[-1]] > MERGE_TOL:
                starts.append(i)
        if len(starts) < values.size:
            idx = np.asarray(starts)
            mass = np.add.reduceat(probs, idx)
            wsum = np.add.reduceat(probs * values, idx)
            values, probs = wsum / mass, mass
        values.setflags(write=False)
        probs.setflags(write=False)
        return cls(values, probs)

    @classmethod
    def point(cls, value: float) -> DiscreteDistribution:
        return cls.from_atoms([value], [1.0])

    @classmethod
    def uniform(cls, values) -> DiscreteDistribution:
        values = np.asarray(values, dtype=float)
        return cls.from_atoms(values, np.full(values.size, 1.0 / values.size))

    def __len__(self):
        return self.values.size

    def __iter__(self):
        return iter(zip(self.values.tolist(), self.probs.tolist()))

    def __repr__(self):
        atoms = ", ".join(f"{v:g}:{p:g}" for v, p in self)
        return f"DiscreteDistribution({atoms})"

    def mean(self) -> float:
        return float(np.dot(self.values, self.probs))

    def min(self) -> float:
        return float(self.values[0])

    def max(self) -> float:
        return float(self.values[-1])

    def cdf(self, x: float) -> float:
        return float(self.probs[self.values <= x].sum())

    def map(self, fn) -> DiscreteDistribution:
        """Distribution of fn(X) for a vectorised ``fn``."""
        return DiscreteDistribution.from_atoms(fn(self.values), self.probs)

    def shift(self, c: float) -> DiscreteDistribution:
        return self.map(lambda v: v + c)

    def scale(self, lam: float) -> DiscreteDistribution:
        return self.map(lambda v: lam * v)

    def expect(self, fn) -> float:
        return float(np.dot(fn(self.values), self.probs))


def _check_dist(dist):
    if not isinstance(dist, DiscreteDistribution) or len(dist) == 0:
        raise DomainError("expected a non-empty DiscreteDistribution")


def expectile_exact(dist: DiscreteDistribution, alpha: float) -> float:
    _check_alpha(alpha)
    _check_dist(dist)
    return float(expectile_sorted(dist.values, dist.probs, float(alpha)))


def var_exact(dist: DiscreteDistribution, alpha: float) -> float:
    _check_alpha(alpha)
    _check_dist(dist)
    return float(var_sorted(dist.values, dist.probs, float(alpha)))


def cvar_exact(dist: DiscreteDistribution, alpha: float) -> float:
    _check_alpha(alpha)
    _check_dist(dist)
    return float(cvar_sorted(dist.values, dist.probs, float(alpha)))


def risk_exact(dist: DiscreteDistribution, spec: RiskSpec) -> float:
    if spec.kind == RiskKind.CVAR:
        return cvar_exact(dist, spec.alpha)
    return expectile_exact(dist, spec.alpha)


# --- vectorised NumPy path: one distribution per row, atoms sorted per row ---

def expectile_sorted_batch(values: np.ndarray, probs: np.ndarray, alpha: float) -> np.ndarray:
    """Row-wise :func:`expectile_sorted` for (B, L) arrays."""
    if values.shape[1] == 1:
        return values[:, 0].copy()
    cm = np.cumsum(probs, axis=1)
    cs = np.cumsum(probs * values, axis=1)
    tm, ts = cm[:, -1:], cs[:, -1:]
    below_m, below_s = cm - probs, cs - probs * values  # strictly left of atom j
    g = alpha * ((ts - cs) - values * (tm - cm)) - (1 - alpha) * (values * below_m - below_s)
    # first segment [v_k, v_k+1] whose right end has g <= 0
    hit = g[:, 1:] <= 0.0
    k = np.where(hit.any(axis=1), hit.argmax(axis=1), values.shape[1] - 1)
    rows = np.arange(values.shape[0])
    bm, bs = cm[rows, k], cs[rows, k]
    am, as_ = tm[:, 0] - bm, ts[:, 0] - bs
    with np.errstate(invalid="ignore", divide="ignore"):
        y = (alpha * as_ + (1 - alpha) * bs) / (alpha * am + (1 - alpha) * bm)
    hi = values[rows, np.minimum(k + 1, values.shape[1] - 1)]
    y = np.clip(np.nan_to_num(y, nan=values[rows, k]), values[rows, k], hi)
    return y


def cvar_sorted_batch(values: np.ndarray, probs: np.ndarray, alpha: float) -> np.ndarray:
    prev = np.cumsum(probs, axis=1) - probs
    w = np.minimum(probs, np.maximum(alpha - prev, 0.0))
    return (w * values).sum(axis=1) / alpha


def var_sorted_batch(values: np.ndarray, probs: np.ndarray, alpha: float) -> np.ndarray:
    cm = np.cumsum(probs, axis=1)
    idx = np.argmax(cm >= alpha - LEVEL_SLACK, axis=1)
    return values[np.arange(values.shape[0]), idx]


def risk_sorted_batch(values, probs, kind, alpha):
    if kind == RiskKind.CVAR:
        return cvar_sorted_batch(values, probs, alpha)
    return expectile_sorted_batch(values, probs, alpha)
