import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dynrisk.exceptions import DomainError, UsageError
from dynrisk.metrics import (
    PathClass,
    RunMetrics,
    classify_trajectory,
    empirical_cvar_of_returns,
    risky_pair_mask,
)
from dynrisk.tabular_mdp import DOWN, LEFT, RIGHT, UP, EpisodeTrace, build_cliffwalk, build_maze, run_episode

from helpers import chain_mdp

MAZE = build_maze()
CLIFF = build_cliffwalk()


def scripted(mdp, actions, seed=0):
    moves = iter(actions)
    return run_episode(mdp, lambda s, rng: next(moves), np.random.default_rng(seed), max_steps=len(actions))


MAZE_DIRECT = [RIGHT] * 9
MAZE_DETOUR = [UP, UP] + [RIGHT] * 9 + [DOWN, DOWN]
CLIFF_TOP = [UP] * 3 + [RIGHT] * 11 + [DOWN] * 3
CLIFF_MIDDLE = [UP] * 2 + [RIGHT] * 11 + [DOWN] * 2


def test_maze_paths():
    assert classify_trajectory(MAZE, scripted(MAZE, MAZE_DIRECT)) is PathClass.RISK_NEUTRAL
    assert classify_trajectory("maze", scripted(MAZE, MAZE_DETOUR)) is PathClass.RISK_AVERSE
    assert classify_trajectory(MAZE, scripted(MAZE, [LEFT] * 5)) is PathClass.OTHER


def test_cliffwalk_paths():
    assert classify_trajectory(CLIFF, scripted(CLIFF, CLIFF_TOP)) is PathClass.RISK_AVERSE
    # the middle lane either reaches the goal through the slip zone or slips into the cliff
    outcomes = {classify_trajectory(CLIFF, scripted(CLIFF, CLIFF_MIDDLE, seed)) for seed in range(40)}
    assert PathClass.RISK_NEUTRAL in outcomes
    assert outcomes <= {PathClass.RISK_NEUTRAL, PathClass.OTHER}
    assert classify_trajectory(CLIFF, scripted(CLIFF, [RIGHT])) is PathClass.OTHER


def test_empty_trace_and_non_grid():
    assert classify_trajectory(MAZE, EpisodeTrace()) is PathClass.OTHER
    with pytest.raises(UsageError):
        classify_trajectory(chain_mdp(), EpisodeTrace())
    with pytest.raises(UsageError):
        classify_trajectory("lunar", EpisodeTrace())


def test_risky_pairs():
    mask = risky_pair_mask(CLIFF)
    s = CLIFF.layout.state_of[(3, 5)]
    assert mask[s, RIGHT] and mask[s, LEFT] and not mask[s, UP] and not mask[s, DOWN]
    top = CLIFF.layout.state_of[(1, 5)]
    assert not mask[top].any()
    red = MAZE.layout.states("R")[0]
    r, c = MAZE.cell(red)
    assert mask[MAZE.layout.state_of[(r, c - 1)], RIGHT]
    assert risky_pair_mask(MAZE).sum() == 4  # the four ways into the noisy cell


def test_empirical_cvar_examples():
    assert empirical_cvar_of_returns(np.arange(1, 11), 0.3) == pytest.approx(2.0)
    rng = np.random.default_rng(0)
    x = rng.normal(size=15)
    assert empirical_cvar_of_returns(x, 0.2) == pytest.approx(np.sort(x)[:3].mean())
    assert empirical_cvar_of_returns([5.0], 0.01) == 5.0
    with pytest.raises(DomainError):
        empirical_cvar_of_returns([], 0.2)
    with pytest.raises(DomainError):
        empirical_cvar_of_returns([1.0], 1.0)


@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=50), st.floats(0.01, 0.99))
def test_empirical_cvar_bounds(x, alpha):
    c = empirical_cvar_of_returns(x, alpha)
    assert min(x) - 1e-9 <= c <= np.mean(x) + 1e-9 * (1 + abs(np.mean(x)))


def test_run_metrics_from_rollouts():
    m = RunMetrics.from_rollouts(7, [1.0, 2.0, 3.0, 4.0], [0, 0, 1, 2], cvar_alpha=0.5)
    assert m.row() == [7, 2.5, 0.5, 1.5]
