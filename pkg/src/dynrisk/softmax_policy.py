"""Tabular softmax policies and the surrogate (expected) policy-gradient step."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from ._accel import njit
from .exceptions import DomainError
from .risk_measures import DiscreteDistribution
from .tabular_mdp import sample_categorical

LOGIT_CLIP = 30.0


@njit
def softmax_row(logits):
    m = logits.max()
    e = np.exp(logits - m)
    return e / e.sum()


@njit
def softmax_table(theta):
    out = np.empty_like(theta)
    for s in range(theta.shape[0]):
        out[s] = softmax_row(theta[s])
    return out


@njit
def surrogate_step_inplace(theta, weights, q, eta, clip):
    """theta(s, a) += eta * w(s) * pi(a|s) * (q(s, a) - v(s)) for every s with w(s) > 0.

    All rows read the pre-update policy, so the step is simultaneous.
    """
    S, A = theta.shape
    for s in range(S):
        w = weights[s]
        if w == 0.0:
            continue
        pi = softmax_row(theta[s])
        v = 0.0
        for a in range(A):
            v += pi[a] * q[s, a]
        for a in range(A):
            x = theta[s, a] + eta * w * pi[a] * (q[s, a] - v)
            if x > clip:
                x = clip
            elif x < -clip:
                x = -clip
            theta[s, a] = x


@dataclass(eq=False)
class SoftmaxPolicyTable:
    theta: np.ndarray

    def __post_init__(self):
        self.theta = np.array(self.theta, dtype=float)
        if self.theta.ndim != 2:
            raise DomainError("theta must be an (S, A) table")
        if not np.all(np.isfinite(self.theta)):
            raise DomainError("logits must be finite")

    @classmethod
    def uniform(cls, n_states: int, n_actions: int) -> SoftmaxPolicyTable:
        return cls(np.zeros((n_states, n_actions)))

    @classmethod
    def greedy_from(cls, q, margin: float = LOGIT_CLIP) -> SoftmaxPolicyTable:
        """Near-deterministic policy putting the clip-level logit on argmax q (lowest index on ties)."""
        q = np.asarray(q, dtype=float)
        theta = np.full(q.shape, -margin)
        theta[np.arange(q.shape[0]), np.argmax(q, axis=1)] = margin
        return cls(theta)

    @property
    def shape(self):
        return self.theta.shape

    def probs(self) -> np.ndarray:
        return softmax_table(self.theta)

    def copy(self) -> SoftmaxPolicyTable:
        return SoftmaxPolicyTable(self.theta.copy())

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["state", "action", "logit"])
            for (s, a), x in np.ndenumerate(self.theta):
                w.writerow([s, a, repr(float(x))])

    @classmethod
    def from_csv(cls, path) -> SoftmaxPolicyTable:
        rows = _read_table_csv(path, "logit")
        return cls(rows)


def _read_table_csv(path, column):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        entries = [(int(r["state"]), int(r["action"]), float(r[column])) for r in reader]
    if not entries:
        raise DomainError(f"{path}: empty table")
    S = max(e[0] for e in entries) + 1
    A = max(e[1] for e in entries) + 1
    table = np.full((S, A), np.nan)
    for s, a, x in entries:
        table[s, a] = x
    if np.isnan(table).any():
        raise DomainError(f"{path}: table has missing (state, action) entries")
    return table


def action_probs(policy: SoftmaxPolicyTable, state: int) -> DiscreteDistribution:
    if not 0 <= state < policy.shape[0]:
        raise DomainError(f"state {state} out of range")
    p = softmax_row(policy.theta[state])
    return DiscreteDistribution.from_atoms(np.arange(p.size), p)


def sample_action(policy: SoftmaxPolicyTable, state: int, rng: np.random.Generator) -> int:
    if not 0 <= state < policy.shape[0]:
        raise DomainError(f"state {state} out of range")
    return int(sample_categorical(softmax_row(policy.theta[state]), rng.random()))


def surrogate_update(policy: SoftmaxPolicyTable, d, q, eta: float) -> SoftmaxPolicyTable:
    """One ascent step on sum_s d(s) sum_a pi(a|s) q(s, a) with q held fixed."""
    if eta <= 0:
        raise DomainError("eta must be positive")
    d = np.asarray(d, dtype=float)
    q = np.asarray(q, dtype=float)
    if d.shape != (policy.shape[0],) or q.shape != policy.shape:
        raise DomainError("d must be (S,) and q must be (S, A)")
    if np.any(d < 0):
        raise DomainError("state weights must be non-negative")
    theta = policy.theta.copy()
    surrogate_step_inplace(theta, d, q, float(eta), LOGIT_CLIP)
    return SoftmaxPolicyTable(theta)


def entropy_bonus_update(policy: SoftmaxPolicyTable, d, q, eta: float, coeff: float) -> SoftmaxPolicyTable:
    """Surrogate step on q + coeff * (-log pi), i.e. with an entropy bonus."""
    if coeff < 0:
        raise DomainError("entropy coefficient must be non-negative")
    if coeff == 0:
        return surrogate_update(policy, d, q, eta)
    logp = np.log(policy.probs())
    return surrogate_update(policy, d, np.asarray(q, dtype=float) - coeff * logp, eta)


def surrogate_objective(theta, d, q) -> float:
    """sum_s d(s) sum_a softmax(theta)(a|s) q(s, a); the function the step ascends."""
    return float(np.sum(np.asarray(d)[:, None] * softmax_table(np.asarray(theta, float)) * q))
