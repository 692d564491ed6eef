"""Model-based dynamic-risk dynamic programming: the ground-truth oracle.

Every backup computes rho(r + gamma * V(s')) exactly from the finite law of
(r, s'). Each (s, a) target law is flattened into ``L`` atoms
``(next_state, reward, prob)`` once per MDP; a sweep then only has to fill
in ``V`` and evaluate the risk functional row by row.
"""
from __future__ import annotations

import csv
import math
import weakref
from dataclasses import dataclass

import numpy as np

from ._accel import USE_NUMBA, njit
from .exceptions import ConvergenceError, DomainError
from .risk_measures import RiskKind, RiskSpec, risk_sorted, risk_sorted_batch
from .softmax_policy import LOGIT_CLIP, SoftmaxPolicyTable, _read_table_csv, softmax_table, surrogate_step_inplace, surrogate_update
from .tabular_mdp import TabularMdp

DEFAULT_TOL = 1e-9


@dataclass(eq=False)
class ValueTables:
    q: np.ndarray
    v: np.ndarray
    iterations: int = 0

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["state", "action", "value"])
            for (s, a), x in np.ndenumerate(self.q):
                w.writerow([s, a, repr(float(x))])

    @classmethod
    def from_csv(cls, path, policy: SoftmaxPolicyTable | None = None) -> ValueTables:
        q = _read_table_csv(path, "value")
        v = q.max(axis=1) if policy is None else (policy.probs() * q).sum(axis=1)
        return cls(q, v)


# --- compact target atoms ------------------------------------------------------

_atom_cache: weakref.WeakKeyDictionary = weakref.WeakKeyDictionary()


def target_atoms(mdp: TabularMdp):
    """(next_state, reward, prob) arrays of shape (S, A, L) for every target law.

    Short rows are padded with copies of their first atom at probability 0.
    """
    if mdp in _atom_cache:
        return _atom_cache[mdp]
    S, A = mdp.n_states, mdp.n_actions
    per_sa = []
    for s in range(S):
        for a in range(A):
            nxt, rew, prob = [], [], []
            for s2 in np.flatnonzero(mdp.transitions[s, a]):
                k = mdp.reward_index[s, a, s2]
                for r, p in zip(mdp.reward_values[k], mdp.reward_probs[k]):
                    if p > 0:
                        nxt.append(s2)
                        rew.append(r)
                        prob.append(mdp.transitions[s, a, s2] * p)
            per_sa.append((nxt, rew, prob))
    L = max(len(x[0]) for x in per_sa)
    nxt_arr = np.zeros((S, A, L), dtype=np.int64)
    rew_arr = np.zeros((S, A, L))
    prob_arr = np.zeros((S, A, L))
    for i, (nxt, rew, prob) in enumerate(per_sa):
        s, a = divmod(i, A)
        n = len(nxt)
        nxt_arr[s, a, :n], rew_arr[s, a, :n], prob_arr[s, a, :n] = nxt, rew, prob
        nxt_arr[s, a, n:], rew_arr[s, a, n:] = nxt[0], rew[0]
    out = (nxt_arr, rew_arr, prob_arr)
    _atom_cache[mdp] = out
    return out


# --- numba path --------------------------------------------------------------------

@njit
def _sort_pair(vals, ps, n):
    # insertion sort: target laws are short
    for i in range(1, n):
        v, p = vals[i], ps[i]
        j = i - 1
        while j >= 0 and vals[j] > v:
            vals[j + 1] = vals[j]
            ps[j + 1] = ps[j]
            j -= 1
        vals[j + 1] = v
        ps[j + 1] = p


@njit
def backup_sweep(nxt, rew, prob, terminal, gamma, v, kind, alpha, q_out):
    """q_out(s, a) = rho(r + gamma * v(s')) for every non-terminal (s, a)."""
    S, A, L = nxt.shape
    vals = np.empty(L)
    ps = np.empty(L)
    for s in range(S):
        if terminal[s]:
            for a in range(A):
                q_out[s, a] = 0.0
            continue
        for a in range(A):
            for k in range(L):
                vals[k] = rew[s, a, k] + gamma * v[nxt[s, a, k]]
                ps[k] = prob[s, a, k]
            _sort_pair(vals, ps, L)
            q_out[s, a] = risk_sorted(vals, ps, kind, alpha)


@njit
def _state_values(q, pi, greedy, terminal, v):
    S, A = q.shape
    for s in range(S):
        if terminal[s]:
            v[s] = 0.0
        elif greedy:
            v[s] = q[s].max()
        else:
            acc = 0.0
            for a in range(A):
                acc += pi[s, a] * q[s, a]
            v[s] = acc


@njit
def solve_kernel(nxt, rew, prob, terminal, gamma, pi, greedy, kind, alpha, q, stop, max_iter):
    """Iterate the (policy or optimality) operator from ``q`` in place.

    Returns (sweeps, last sup-norm change).
    """
    S, A = q.shape
    v = np.empty(S)
    q_new = np.empty_like(q)
    diff = np.inf
    for it in range(max_iter):
        _state_values(q, pi, greedy, terminal, v)
        backup_sweep(nxt, rew, prob, terminal, gamma, v, kind, alpha, q_new)
        diff = 0.0
        for s in range(S):
            for a in range(A):
                d = abs(q_new[s, a] - q[s, a])
                if d > diff:
                    diff = d
                q[s, a] = q_new[s, a]
        if diff <= stop:
            return it + 1, diff
    return max_iter, diff


@njit
def surrogate_pi_kernel(nxt, rew, prob, terminal, gamma, kind, alpha, theta, d, eta, clip,
                        q, stop, max_iter, q_trace, v_trace):
    """Exact evaluation alternated with surrogate steps, recording Q and V per round.

    Returns -1 on success, else the round whose evaluation did not converge.
    """
    S, A = q.shape
    rounds = q_trace.shape[0]
    for t in range(rounds):
        pi = softmax_table(theta)
        sweeps, diff = solve_kernel(nxt, rew, prob, terminal, gamma, pi, False, kind, alpha, q, stop, max_iter)
        if diff > stop:
            return t
        for s in range(S):
            acc = 0.0
            for a in range(A):
                q_trace[t, s, a] = q[s, a]
                acc += pi[s, a] * q[s, a]
            v_trace[t, s] = 0.0 if terminal[s] else acc
        if t + 1 < rounds:
            surrogate_step_inplace(theta, d, q, eta, clip)
    return -1


# --- NumPy path -----------------------------------------------------------------

def backup_sweep_numpy(nxt, rew, prob, terminal, gamma, v, kind, alpha):
    S, A, L = nxt.shape
    vals = rew + gamma * v[nxt]
    order = np.argsort(vals, axis=2, kind="stable")
    vals = np.take_along_axis(vals, order, axis=2).reshape(S * A, L)
    ps = np.take_along_axis(prob, order, axis=2).reshape(S * A, L)
    q = risk_sorted_batch(vals, ps, kind, alpha).reshape(S, A)
    q[terminal] = 0.0
    return q


def solve_numpy(nxt, rew, prob, terminal, gamma, pi, greedy, kind, alpha, q, stop, max_iter):
    diff = np.inf
    for it in range(max_iter):
        v = q.max(axis=1) if greedy else (pi * q).sum(axis=1)
        v[terminal] = 0.0
        q_new = backup_sweep_numpy(nxt, rew, prob, terminal, gamma, v, kind, alpha)
        diff = float(np.max(np.abs(q_new - q)))
        q[...] = q_new
        if diff <= stop:
            return it + 1, diff
    return max_iter, diff


_solve = solve_kernel if USE_NUMBA else solve_numpy


# --- public API -------------------------------------------------------------------

def _iteration_cap(mdp, tol):
    # sweeps for gamma^k * r_max / (1 - gamma) to drop below the stop threshold
    scale = max(mdp.r_max, 1.0) / (1.0 - mdp.gamma)
    k = math.log(tol * (1.0 - mdp.gamma) / scale) / math.log(mdp.gamma)
    return int(max(10_000, 4 * k))


def _run(mdp, spec, pi, greedy, tol, q0, max_iter, solver):
    if tol <= 0:
        raise DomainError("tol must be positive")
    nxt, rew, prob = target_atoms(mdp)
    q = np.zeros((mdp.n_states, mdp.n_actions)) if q0 is None else np.array(q0, dtype=float)
    q[mdp.terminal] = 0.0
    cap = max_iter or _iteration_cap(mdp, tol)
    stop = tol * (1.0 - mdp.gamma)
    sweeps, diff = (solver or _solve)(
        nxt, rew, prob, mdp.terminal, mdp.gamma, pi, greedy,
        int(spec.kind), float(spec.alpha), q, stop, cap,
    )
    if diff > stop:
        raise ConvergenceError(
            f"{'value iteration' if greedy else 'policy evaluation'} on {mdp.name}: "
            f"change {diff:.3e} > {stop:.3e} after {sweeps} sweeps"
        )
    return q, sweeps


def evaluate_policy_exact(mdp: TabularMdp, policy: SoftmaxPolicyTable | np.ndarray, spec: RiskSpec,
                          tol: float = DEFAULT_TOL, q0=None, max_iter=None, solver=None) -> ValueTables:
    """Fixed point of Q(s,a) = rho(r + gamma * sum_a' pi(a'|s') Q(s', a')).

    ``policy`` is a softmax table or an explicit (S, A) probability array.
    Iterates until the sup-norm change is at most ``tol * (1 - gamma)``.
    """
    pi = policy.probs() if isinstance(policy, SoftmaxPolicyTable) else np.asarray(policy, float)
    if pi.shape != (mdp.n_states, mdp.n_actions):
        raise DomainError("policy shape does not match the MDP")
    q, sweeps = _run(mdp, spec, pi, False, tol, q0, max_iter, solver)
    v = (pi * q).sum(axis=1)
    v[mdp.terminal] = 0.0
    return ValueTables(q, v, sweeps)


def value_iteration_exact(mdp: TabularMdp, spec: RiskSpec, tol: float = DEFAULT_TOL,
                          q0=None, max_iter=None, solver=None):
    """Fixed point of Q*(s,a) = rho(r + gamma * max_a' Q*(s', a')) and its greedy policy.

    Greedy ties go to the lowest action index.
    """
    pi = np.zeros((mdp.n_states, mdp.n_actions))
    q, sweeps = _run(mdp, spec, pi, True, tol, q0, max_iter, solver)
    v = q.max(axis=1)
    v[mdp.terminal] = 0.0
    return ValueTables(q, v, sweeps), np.argmax(q, axis=1)


def bellman_operator(mdp: TabularMdp, q, spec: RiskSpec, pi=None) -> np.ndarray:
    """One application of the policy operator (``pi`` given) or the optimality operator."""
    nxt, rew, prob = target_atoms(mdp)
    q = np.asarray(q, dtype=float)
    v = q.max(axis=1) if pi is None else (np.asarray(pi) * q).sum(axis=1)
    v[mdp.terminal] = 0.0
    out = np.empty_like(q)
    backup_sweep(nxt, rew, prob, mdp.terminal, mdp.gamma, v, int(spec.kind), float(spec.alpha), out)
    return out


def default_state_weights(mdp: TabularMdp) -> np.ndarray:
    d = (~mdp.terminal).astype(float)
    return d / d.sum()


def surrogate_policy_iteration(mdp: TabularMdp, spec: RiskSpec, d=None, eta: float | None = None,
                               iters: int = 100, theta0=None, tol: float = 1e-11) -> list[ValueTables]:
    """Alternate exact evaluation with one surrogate softmax step.

    Returns the evaluated tables for pi_0, ..., pi_iters. ``eta`` defaults to
    (1 - gamma) / 5 and ``d`` to the uniform law over non-terminal states.
    """
    d = default_state_weights(mdp) if d is None else np.asarray(d, dtype=float)
    if np.any(d[~mdp.terminal] <= 0):
        raise DomainError("d must put positive weight on every non-terminal state")
    eta = (1.0 - mdp.gamma) / 5.0 if eta is None else eta
    if eta <= 0:
        raise DomainError("eta must be positive")
    policy = SoftmaxPolicyTable(np.zeros((mdp.n_states, mdp.n_actions)) if theta0 is None else theta0)
    if USE_NUMBA:
        return _surrogate_pi_fused(mdp, spec, d, eta, iters, policy.theta, tol)
    tables = evaluate_policy_exact(mdp, policy, spec, tol)
    trace = [tables]
    for _ in range(iters):
        policy = surrogate_update(policy, d, tables.q, eta)
        tables = evaluate_policy_exact(mdp, policy, spec, tol, q0=tables.q)
        trace.append(tables)
    return trace


def _surrogate_pi_fused(mdp, spec, d, eta, iters, theta, tol):
    nxt, rew, prob = target_atoms(mdp)
    S, A = theta.shape
    q = np.zeros((S, A))
    q_trace = np.empty((iters + 1, S, A))
    v_trace = np.empty((iters + 1, S))
    stop = tol * (1.0 - mdp.gamma)
    bad = surrogate_pi_kernel(nxt, rew, prob, mdp.terminal, mdp.gamma, int(spec.kind), float(spec.alpha),
                              theta.copy(), d, float(eta), LOGIT_CLIP, q, stop, _iteration_cap(mdp, tol),
                              q_trace, v_trace)
    if bad >= 0:
        raise ConvergenceError(f"policy evaluation on {mdp.name} did not converge at round {bad}")
    return [ValueTables(q_trace[t], v_trace[t]) for t in range(iters + 1)]


def greedy_policy_table(mdp: TabularMdp, greedy_actions) -> np.ndarray:
    pi = np.zeros((mdp.n_states, mdp.n_actions))
    pi[np.arange(mdp.n_states), np.asarray(greedy_actions)] = 1.0
    return pi


def rescaled(mdp: TabularMdp, lo: float | None = None, hi: float | None = None) -> TabularMdp:
    """Affine copy with every reward atom mapped into [0, 1].

    Without terminal states, Q maps through the same affine transform
    (offset -lo / (1 - gamma), scale 1 / span), so policies rank identically.
    """
    lo = float(mdp.reward_values.min()) if lo is None else lo
    hi = float(mdp.reward_values.max()) if hi is None else hi
    span = hi - lo if hi > lo else 1.0
    vals = (mdp.reward_values - lo) / span
    return TabularMdp(mdp.transitions.copy(), mdp.reward_index.copy(), vals,
                      mdp.reward_probs.copy(), mdp.gamma, mdp.initial_state,
                      mdp.terminal.copy(), name=f"{mdp.name}-rescaled", layout=mdp.layout,
                      slip_cells=mdp.slip_cells)
