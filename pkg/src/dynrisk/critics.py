"""Model-free critics: expectile TD, two-timescale VaR/CVaR TD, expected-SARSA
backups, target tables and step-size schedules.

Q and VaR tables are plain ``(S, A)`` float arrays whose terminal rows stay 0.
The public ``*_step`` functions return updated copies; the ``@njit`` scalar
helpers are what the training kernels call in their inner loops.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._accel import njit
from .exceptions import DomainError
from .risk_measures import RiskKind, RiskSpec, expectile_grad_term, quantile_grad_term
from .softmax_policy import SoftmaxPolicyTable, softmax_row
from .tabular_mdp import TabularMdp, Transition, env_step


@njit
def expected_value(q_row, logits_row):
    pi = softmax_row(logits_row)
    acc = 0.0
    for a in range(q_row.shape[0]):
        acc += pi[a] * q_row[a]
    return acc


@njit
def expectile_increment(q_sa, y, alpha, zeta):
    return 2.0 * zeta * expectile_grad_term(y, q_sa, alpha)


@njit
def cvar_increments(var_sa, cvar_sa, y, alpha, zeta_fast, zeta_slow):
    """Increments (d_var, d_cvar) of the two-timescale rule, both from pre-update values."""
    d_var = -zeta_fast * quantile_grad_term(y, var_sa, alpha)
    hinge = var_sa - y
    if hinge < 0.0:
        hinge = 0.0
    d_cvar = -zeta_slow * (cvar_sa - var_sa + hinge / alpha)
    return d_var, d_cvar


@njit
def step_size(base, power, count):
    if power == 0.0:
        return base
    return base / (1.0 + count) ** power


@dataclass
class StepSchedule:
    """Per-(s, a) step sizes: ``base`` (constant) or ``base / (1 + n)**power``.

    ``n`` is the visit count of the pair being updated.
    """

    base: float
    power: float = 0.0
    counts: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.base <= 0:
            raise DomainError("step-size base must be positive")
        if self.power != 0.0 and not 0.5 < self.power <= 1.0:
            raise DomainError("Robbins-Monro exponent must lie in (0.5, 1]")

    @classmethod
    def constant(cls, base: float) -> StepSchedule:
        return cls(base, 0.0)

    @classmethod
    def robbins_monro(cls, base: float, power: float) -> StepSchedule:
        return cls(base, power)

    @property
    def kind(self):
        return "constant" if self.power == 0.0 else "robbins_monro"

    def _ensure(self, shape):
        if self.counts is None:
            self.counts = np.zeros(shape, dtype=np.int64)

    def rate(self, s, a) -> float:
        n = 0 if self.counts is None else self.counts[s, a]
        return float(step_size(self.base, self.power, n))

    def advance(self, s, a, shape):
        self._ensure(shape)
        self.counts[s, a] += 1


@dataclass
class TargetPair:
    policy_target: SoftmaxPolicyTable
    q_target: np.ndarray
    tau: float = 0.01

    def __post_init__(self):
        if not 0.0 < self.tau <= 1.0:
            raise DomainError("tau must lie in (0, 1]")
        self.q_target = np.array(self.q_target, dtype=float)
        if self.q_target.shape != self.policy_target.shape:
            raise DomainError("target tables must share one (S, A) shape")

    @classmethod
    def of(cls, policy: SoftmaxPolicyTable, q, tau: float = 0.01) -> TargetPair:
        return cls(policy.copy(), np.array(q, dtype=float), tau)


def expected_backup(q, policy: SoftmaxPolicyTable, state: int) -> float:
    """sum_a pi(a|state) q(state, a); 0 on terminal rows since those are pinned at 0."""
    return float(expected_value(np.asarray(q, dtype=float)[state], policy.theta[state]))


def backup_target(t: Transition, targets: TargetPair, gamma: float) -> float:
    if t.done:
        return t.reward
    return t.reward + gamma * expected_backup(targets.q_target, targets.policy_target, t.next_state)


def expectile_td_step(q, targets: TargetPair, t: Transition, alpha: float,
                      schedule: StepSchedule, gamma: float) -> np.ndarray:
    """Q(s,a) += 2 zeta [(1-alpha)(y-Q)_- + alpha (y-Q)_+] with an expected-SARSA target y."""
    if not 0.0 < alpha < 1.0:
        raise DomainError("alpha must lie in (0, 1)")
    q = np.array(q, dtype=float)
    y = backup_target(t, targets, gamma)
    s, a = t.state, t.action
    q[s, a] += expectile_increment(q[s, a], y, alpha, schedule.rate(s, a))
    schedule.advance(s, a, q.shape)
    return q


def cvar_td_step(q_var, q_cvar, targets: TargetPair, t: Transition, alpha: float,
                 sched_fast: StepSchedule, sched_slow: StepSchedule, gamma: float,
                 bound: float | None = None):
    """Two-timescale VaR (fast) / CVaR (slow) update; returns new (q_var, q_cvar)."""
    if not 0.0 < alpha < 1.0:
        raise DomainError("alpha must lie in (0, 1)")
    q_var = np.array(q_var, dtype=float)
    q_cvar = np.array(q_cvar, dtype=float)
    y = backup_target(t, targets, gamma)
    s, a = t.state, t.action
    dv, dc = cvar_increments(q_var[s, a], q_cvar[s, a], y, alpha,
                             sched_fast.rate(s, a), sched_slow.rate(s, a))
    q_var[s, a] += dv
    q_cvar[s, a] += dc
    if bound is not None:
        q_var[s, a] = np.clip(q_var[s, a], -bound, bound)
        q_cvar[s, a] = np.clip(q_cvar[s, a], -bound, bound)
    sched_fast.advance(s, a, q_var.shape)
    sched_slow.advance(s, a, q_var.shape)
    return q_var, q_cvar


def soft_update(targets: TargetPair, live_policy: SoftmaxPolicyTable, live_q) -> TargetPair:
    tau = targets.tau
    theta = tau * live_policy.theta + (1.0 - tau) * targets.policy_target.theta
    q = tau * np.asarray(live_q, dtype=float) + (1.0 - tau) * targets.q_target
    return TargetPair(SoftmaxPolicyTable(theta), q, tau)


def jiang_v_step(v, t: Transition, alpha: float, zeta: float, gamma: float):
    """State-value expectile TD step; returns (new v, advantage).

    advantage = 2 zeta [(1-alpha) delta_- + alpha delta_+] with
    delta = r + gamma v(s') - v(s), and v(s) moves by exactly that amount.
    """
    if not 0.0 < alpha < 1.0:
        raise DomainError("alpha must lie in (0, 1)")
    v = np.array(v, dtype=float)
    boot = 0.0 if t.done else gamma * v[t.next_state]
    delta = t.reward + boot - v[t.state]
    adv = 2.0 * zeta * float(expectile_grad_term(delta, 0.0, alpha))
    v[t.state] += adv
    return v, adv


def cvar_clip_bound(mdp: TabularMdp) -> float:
    return 10.0 * mdp.r_max / (1.0 - mdp.gamma)


# --- critic-only convergence protocol ------------------------------------------

@njit
def critic_protocol_kernel(P, ridx, rvals, rprobs, terminal, gamma, logits, pairs,
                           kind, alpha, q, q_var, counts, base_fast, pow_fast,
                           base_slow, pow_slow, bound, uniforms):
    """Uniform (s, a) sampling with tau = 1 targets (the live tables).

    For expectile only ``q`` is updated with the fast schedule; for CVaR
    ``q_var`` uses the fast schedule and ``q`` the slow one.
    """
    n_pairs = pairs.shape[0]
    clipped = 0
    for i in range(uniforms.shape[0]):
        j = int(uniforms[i, 0] * n_pairs)
        if j >= n_pairs:
            j = n_pairs - 1
        s = pairs[j, 0]
        a = pairs[j, 1]
        s2, r, done = env_step(P, ridx, rvals, rprobs, terminal, s, a, uniforms[i, 1], uniforms[i, 2])
        y = r
        if not done:
            y += gamma * expected_value(q[s2], logits[s2])
        n = counts[s, a]
        zf = step_size(base_fast, pow_fast, n)
        if kind == 0:
            q[s, a] += expectile_increment(q[s, a], y, alpha, zf)
        else:
            zs = step_size(base_slow, pow_slow, n)
            dv, dc = cvar_increments(q_var[s, a], q[s, a], y, alpha, zf, zs)
            q_var[s, a] += dv
            q[s, a] += dc
            if abs(q[s, a]) > bound or abs(q_var[s, a]) > bound:
                clipped += 1
                q[s, a] = min(max(q[s, a], -bound), bound)
                q_var[s, a] = min(max(q_var[s, a], -bound), bound)
        counts[s, a] = n + 1
    return clipped


def run_critic_protocol(mdp: TabularMdp, policy: SoftmaxPolicyTable, spec: RiskSpec, n_updates: int,
                        seed: int, fast: StepSchedule, slow: StepSchedule | None = None,
                        chunk: int = 200_000):
    """Learn Q^pi (and the VaR table for CVaR) of a fixed policy from sampled transitions.

    Returns ``(q, q_var)``; ``q_var`` is ``None`` for expectile.
    """
    rng = np.random.default_rng(seed)
    S, A = mdp.n_states, mdp.n_actions
    pairs = np.array([(s, a) for s in range(S) if not mdp.terminal[s] for a in range(A)], dtype=np.int64)
    q = np.zeros((S, A))
    q_var = np.zeros((S, A))
    counts = np.zeros((S, A), dtype=np.int64)
    slow = slow or fast
    kind = int(spec.kind)
    done = 0
    while done < n_updates:
        n = min(chunk, n_updates - done)
        critic_protocol_kernel(
            mdp.transitions, mdp.reward_index, mdp.reward_values, mdp.reward_probs, mdp.terminal,
            mdp.gamma, policy.theta, pairs, kind, spec.alpha, q, q_var, counts,
            fast.base, fast.power, slow.base, slow.power, cvar_clip_bound(mdp), rng.random((n, 3)),
        )
        done += n
    return q, (q_var if spec.kind == RiskKind.CVAR else None)
