"""Evaluation metrics: the risk-averse path classifier and the empirical CVaR of returns."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from .exceptions import DomainError, UsageError
from .tabular_mdp import EpisodeTrace, TabularMdp, build_environment


class PathClass(IntEnum):
    RISK_AVERSE = 0
    RISK_NEUTRAL = 1
    OTHER = 2


def risky_pair_mask(mdp: TabularMdp) -> np.ndarray:
    """(S, A) flags of the actions whose one-step outcome is random.

    In the grid environments randomness comes only from hazards: entering a
    noisy ``R`` cell, or a lateral move from a slip cell. A path that never
    takes such an action carries no risk, which is what the risk-averse
    class asks for (vertical moves through a slip cell are safe).
    """
    S, A = mdp.n_states, mdp.n_actions
    mask = np.zeros((S, A), dtype=bool)
    for s in range(S):
        if mdp.terminal[s]:
            continue
        for a in range(A):
            row = mdp.transitions[s, a]
            succ = np.flatnonzero(row)
            if succ.size > 1:
                mask[s, a] = True
                continue
            k = mdp.reward_index[s, a, succ[0]]
            mask[s, a] = np.count_nonzero(mdp.reward_probs[k]) > 1
    return mask


def goal_state_mask(mdp: TabularMdp) -> np.ndarray:
    mask = np.zeros(mdp.n_states, dtype=bool)
    mask[list(mdp.goal_states())] = True
    return mask


def classify_outcomes(finals, exposed, goal_mask) -> np.ndarray:
    """Vectorised classifier over rollout_batch output; returns PathClass codes."""
    reached = np.asarray(goal_mask)[np.asarray(finals, dtype=np.int64)]
    exposed = np.asarray(exposed, dtype=bool)
    codes = np.full(reached.shape, int(PathClass.OTHER))
    codes[reached & ~exposed] = PathClass.RISK_AVERSE
    codes[reached & exposed] = PathClass.RISK_NEUTRAL
    return codes


def _resolve_env(env) -> TabularMdp:
    if isinstance(env, TabularMdp):
        if env.layout is None:
            raise UsageError("path classification needs a grid environment")
        return env
    try:
        return build_environment(str(env))
    except DomainError as exc:
        raise UsageError(str(exc)) from None


def classify_trajectory(env, trace: EpisodeTrace) -> PathClass:
    """Classify one episode of ``env`` (an MDP or the name "maze"/"cliffwalk").

    RiskAverse: goal reached without any hazardous action. RiskNeutral: goal
    reached otherwise. Other: goal not reached.
    """
    mdp = _resolve_env(env)
    if not trace.transitions:
        return PathClass.OTHER
    risky = risky_pair_mask(mdp)
    exposed = any(risky[t.state, t.action] for t in trace.transitions)
    code = classify_outcomes([trace.final_state], [exposed], goal_state_mask(mdp))
    return PathClass(int(code[0]))


def empirical_cvar_of_returns(returns, alpha: float) -> float:
    """Mean of the ceil(alpha * n) smallest returns."""
    if not 0.0 < alpha < 1.0:
        raise DomainError("alpha must lie in (0, 1)")
    x = np.sort(np.asarray(returns, dtype=float).ravel())
    if x.size == 0:
        raise DomainError("need at least one return")
    # guard against 0.3 * 10 = 3.0000000000000004 style round-up
    k = max(1, math.ceil(alpha * x.size - 1e-9))
    return float(x[:k].mean())


@dataclass
class RunMetrics:
    step: int
    mean_return: float
    risk_averse_rate: float
    empirical_cvar: float
    returns: list = field(default_factory=list, repr=False)

    FIELDS = ("step", "mean_return", "risk_averse_rate", "empirical_cvar")

    @classmethod
    def from_rollouts(cls, step, returns, codes, cvar_alpha=0.2) -> RunMetrics:
        returns = np.asarray(returns, dtype=float)
        codes = np.asarray(codes)
        return cls(
            step=int(step),
            mean_return=float(returns.mean()),
            risk_averse_rate=float(np.mean(codes == PathClass.RISK_AVERSE)),
            empirical_cvar=empirical_cvar_of_returns(returns, cvar_alpha),
            returns=returns.tolist(),
        )

    def row(self):
        return [self.step, self.mean_return, self.risk_averse_rate, self.empirical_cvar]
