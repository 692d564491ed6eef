"""Shared fixtures: random finite distributions and small random MDPs."""
import numpy as np
from hypothesis import strategies as st

from dynrisk.risk_measures import DiscreteDistribution
from dynrisk.tabular_mdp import TabularMdp


@st.composite
def distributions(draw, max_atoms=6, lo=-10.0, hi=10.0):
    n = draw(st.integers(1, max_atoms))
    values = draw(st.lists(st.floats(lo, hi, allow_nan=False), min_size=n, max_size=n))
    weights = draw(st.lists(st.floats(0.05, 1.0), min_size=n, max_size=n))
    w = np.asarray(weights)
    return DiscreteDistribution.from_atoms(values, w / w.sum())


alphas = st.floats(0.02, 0.98)


def random_distribution(rng, max_atoms=6, scale=10.0):
    n = int(rng.integers(1, max_atoms + 1))
    return DiscreteDistribution.from_atoms(rng.uniform(-scale, scale, n), rng.dirichlet(np.ones(n)))


def random_mdp(rng, n_states=None, n_actions=None, n_reward_atoms=None, gamma=0.9,
               terminal=False) -> TabularMdp:
    """Random dense MDP; optionally the last state is terminal."""
    S = n_states or int(rng.integers(2, 5))
    A = n_actions or int(rng.integers(1, 4))
    P = rng.dirichlet(np.ones(S), size=(S, A))
    rewards = []
    for _ in range(S):
        row = []
        for _ in range(A):
            k = n_reward_atoms or int(rng.integers(1, 4))
            row.append(DiscreteDistribution.from_atoms(rng.uniform(-1, 1, k), rng.dirichlet(np.ones(k))))
        rewards.append(row)
    return TabularMdp.from_tables(P, rewards, gamma, terminal_states=[S - 1] if terminal else ())


def probe_mdp(seed=0):
    """3-state, 2-action MDP with Bernoulli rewards used by the critic convergence checks.

    Success probabilities in [0.5, 0.95] keep P[r = 0] from swamping the
    lower tail, so CVaR at level 0.25 is not pinned at zero.
    """
    rng = np.random.default_rng(seed)
    P = rng.dirichlet(np.ones(3), size=(3, 2))
    rewards = [[DiscreteDistribution.from_atoms([0.0, 1.0], [1 - p, p]) for p in rng.uniform(0.5, 0.95, 2)]
               for _ in range(3)]
    return TabularMdp.from_tables(P, rewards, 0.9)


def chain_mdp(n=3, reward=1.0, gamma=0.9):
    """Deterministic chain 0 -> 1 -> ... -> n-1 (terminal); action 1 stays put."""
    P = np.zeros((n, 2, n))
    for s in range(n):
        P[s, 0, min(s + 1, n - 1)] = 1.0
        P[s, 1, s] = 1.0
    rewards = [[reward, 0.0] for _ in range(n)]
    return TabularMdp.from_tables(P, rewards, gamma, terminal_states=[n - 1])


def bandit_mdp(arms, gamma=0.5):
    """One decision state whose arms lead to a terminal state with the given reward laws."""
    A = len(arms)
    P = np.zeros((2, A, 2))
    P[0, :, 1] = 1.0
    return TabularMdp.from_tables(P, [list(arms), [0.0] * A], gamma, terminal_states=[1])


# --- independent reference implementations -------------------------------------------------
# Row-wise over padded (B, L) atom arrays; padding atoms carry probability 0.

def ref_expectile(values, probs, alpha, iters=80):
    """Bisection on the first-order condition (deliberately not the segment solve)."""
    values, probs = np.atleast_2d(values), np.atleast_2d(probs)
    lo, hi = values.min(axis=1), values.max(axis=1)
    for _ in range(iters):
        y = 0.5 * (lo + hi)
        d = values - y[:, None]
        g = (probs * np.where(d > 0, alpha * d, (1 - alpha) * d)).sum(axis=1)
        lo, hi = np.where(g > 0, y, lo), np.where(g > 0, hi, y)
    return 0.5 * (lo + hi)


def ref_cvar(values, probs, alpha):
    """max over atoms y of y - E[(y - X)+] / alpha; a concave piecewise-linear max sits on an atom."""
    values, probs = np.atleast_2d(values), np.atleast_2d(probs)
    y = values[:, :, None]
    shortfall = (probs[:, None, :] * np.maximum(y - values[:, None, :], 0.0)).sum(axis=2)
    return (values - shortfall / alpha).max(axis=1)


def ref_risk(spec):
    from dynrisk.risk_measures import RiskKind

    if spec.kind == RiskKind.CVAR:
        return lambda v, p: ref_cvar(v, p, spec.alpha)
    return lambda v, p: ref_expectile(v, p, spec.alpha)


def _joint_atoms(mdp):
    """(succ, reward, prob) of shape (S*A, L) enumerating every (s', r) outcome of every pair."""
    S, A = mdp.n_states, mdp.n_actions
    rows = []
    for s in range(S):
        for a in range(A):
            row = []
            for s2 in range(S):
                p = mdp.transitions[s, a, s2]
                k = mdp.reward_index[s, a, s2]
                for r, pr in zip(mdp.reward_values[k], mdp.reward_probs[k]):
                    if p * pr > 0:
                        row.append((s2, r, p * pr))
            rows.append(row)
    L = max(len(r) for r in rows)
    succ = np.zeros((S * A, L), dtype=int)
    rew = np.zeros((S * A, L))
    prob = np.zeros((S * A, L))
    for i, row in enumerate(rows):
        for j, (s2, r, p) in enumerate(row):
            succ[i, j], rew[i, j], prob[i, j] = s2, r, p
        succ[i, len(row):], rew[i, len(row):] = row[0][0], row[0][1]
    return succ, rew, prob


def brute_force_q(mdp, pi, spec, horizon):
    """Truncated recursion Q_h(s,a) = rho(r + gamma * sum_a' pi(a'|s') Q_{h-1}(s',a')), Q_0 = 0,
    applying the risk functional to the full joint (reward, successor) law at every level."""
    risk = ref_risk(spec)
    S, A = mdp.n_states, mdp.n_actions
    succ, rew, prob = _joint_atoms(mdp)
    q = np.zeros((S, A))
    for _ in range(horizon):
        v = (pi * q).sum(axis=1)
        v[mdp.terminal] = 0.0
        q = risk(rew + mdp.gamma * v[succ], prob).reshape(S, A)
        q[mdp.terminal] = 0.0
    return q


def linear_q(mdp, pi):
    """Risk-neutral Q^pi from the linear system (I - gamma P_pi) V = r_pi."""
    S = mdp.n_states
    r_bar = np.zeros((S, mdp.n_actions))
    for s in range(S):
        for a in range(mdp.n_actions):
            if not mdp.terminal[s]:
                r_bar[s, a] = mdp.reward_distribution(s, a).mean()
    P = mdp.transitions.copy()
    P[mdp.terminal] = 0.0
    P_pi = np.einsum("sa,sat->st", pi, P)
    v = np.linalg.solve(np.eye(S) - mdp.gamma * P_pi, (pi * r_bar).sum(axis=1))
    return r_bar + mdp.gamma * np.einsum("sat,t->sa", P, v)
