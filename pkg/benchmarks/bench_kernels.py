"""Compiled (numba) vs pure-Python timings of the hot kernels.

Usage: python benchmarks/bench_kernels.py [--repeat N]

Each row times the same kernel twice: the ``@njit`` dispatcher and its
``.py_func`` (or the NumPy solver for the oracle). Compilation happens in a
warm-up call and is not counted. Run with numba installed; the script exits
early if ``DYNRISK_DISABLE_NUMBA`` is set, since there is nothing to compare.
"""
import argparse
import sys
import time

import numpy as np

from dynrisk._accel import USE_NUMBA
from dynrisk.agents import AgentConfig, EvalSpec, actor_critic_chunk, q_learning_chunk, train_actor_critic, train_q_learning
from dynrisk.exact import evaluate_policy_exact, solve_kernel, solve_numpy, value_iteration_exact
from dynrisk.risk_measures import RiskSpec
from dynrisk.tabular_mdp import build_cliffwalk, build_maze


def best_of(fn, repeat):
    fn()  # warm-up (compiles on first call)
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def rows(repeat):
    maze, cliff = build_maze(), build_cliffwalk()
    yield "oracle: maze CVaR(0.1) value iteration", (
        lambda: value_iteration_exact(maze, RiskSpec.cvar(0.1), solver=solve_kernel),
        lambda: value_iteration_exact(maze, RiskSpec.cvar(0.1), solver=solve_numpy))
    yield "oracle: cliffwalk expectile(0.05) policy evaluation", (
        lambda: evaluate_policy_exact(cliff, np.full((cliff.n_states, 4), 0.25), RiskSpec.expectile(0.05),
                                      solver=solve_kernel),
        lambda: evaluate_policy_exact(cliff, np.full((cliff.n_states, 4), 0.25), RiskSpec.expectile(0.05),
                                      solver=solve_numpy))
    ev = EvalSpec(cadence=1000, episodes=2)
    ac = AgentConfig(algorithm="ExpAC", total_steps=2000, explore_steps=2000)
    yield "train: ExpAC, 2000 steps on maze (batch 32)", (
        lambda: train_actor_critic(maze, ac, eval_spec=ev, kernel=actor_critic_chunk),
        lambda: train_actor_critic(maze, ac, eval_spec=ev, kernel=actor_critic_chunk.py_func))
    ql = AgentConfig(algorithm="QLearning", total_steps=20_000, explore_eps=0.1)
    yield "train: QLearning, 20000 steps on cliffwalk", (
        lambda: train_q_learning(cliff, ql, eval_spec=ev, kernel=q_learning_chunk),
        lambda: train_q_learning(cliff, ql, eval_spec=ev, kernel=q_learning_chunk.py_func))


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=3)
    args = parser.parse_args(argv)
    if not USE_NUMBA:
        print("numba disabled (DYNRISK_DISABLE_NUMBA); nothing to compare")
        return 0
    print(f"{'kernel':55s} {'numba [s]':>10s} {'python [s]':>11s} {'speed-up':>9s}")
    for label, (fast, slow) in rows(args.repeat):
        tf = best_of(fast, args.repeat)
        ts = best_of(slow, 1)
        print(f"{label:55s} {tf:10.4f} {ts:11.4f} {ts / tf:8.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
