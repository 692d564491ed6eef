import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dynrisk.exceptions import DomainError, UsageError
from dynrisk.risk_measures import DiscreteDistribution
from dynrisk.tabular_mdp import (
    DOWN,
    LEFT,
    RIGHT,
    UP,
    GridLayout,
    TabularMdp,
    build_cliffwalk,
    build_environment,
    build_maze,
    clipped_normal_atoms,
    load_map,
    rollout_batch,
    run_episode,
    step,
    target_distribution,
)

from helpers import random_mdp

MAZE = build_maze()
CLIFF = build_cliffwalk()


def sid(mdp, row, col):
    return mdp.layout.state_of[(row, col)]


def test_deterministic_step():
    P = np.zeros((2, 1, 2))
    P[0, 0, 1] = 1.0
    P[1, 0, 1] = 1.0
    mdp = TabularMdp.from_tables(P, [[-1.0], [0.0]], 0.9)
    t = step(mdp, 0, 0, np.random.default_rng(0))
    assert (t.state, t.action, t.reward, t.next_state, t.done) == (0, 0, -1.0, 1, False)


def test_step_errors():
    rng = np.random.default_rng(0)
    with pytest.raises(DomainError):
        step(MAZE, MAZE.n_states, 0, rng)
    with pytest.raises(DomainError):
        step(MAZE, 0, 4, rng)
    goal = next(iter(MAZE.goal_states()))
    with pytest.raises(UsageError):
        step(MAZE, goal, 0, rng)


def test_cliffwalk_slip_frequency():
    rng = np.random.default_rng(7)
    s = sid(CLIFF, 3, 5)
    cliff = sid(CLIFF, 4, 5)
    n = 100_000
    hits = sum(step(CLIFF, s, RIGHT, rng).next_state == cliff for _ in range(n))
    assert abs(hits / n - 0.2) <= 0.01


def test_maze_red_reward_mean_sampled():
    rng = np.random.default_rng(3)
    red = MAZE.layout.states("R")[0]
    r, c = MAZE.cell(red)
    s = sid(MAZE, r, c - 1)
    rewards = np.array([step(MAZE, s, RIGHT, rng).reward for _ in range(100_000)])
    assert abs(rewards.mean() + 1.0) <= 0.1
    assert rewards.std() > 10


def test_maze_red_law_mean_exact():
    red = MAZE.layout.states("R")[0]
    r, c = MAZE.cell(red)
    law = MAZE.reward_distribution(sid(MAZE, r, c - 1), RIGHT)
    assert law.mean() == pytest.approx(-1.0, abs=1e-9)
    assert len(law) == 21
    assert law.min() == pytest.approx(-21.0) and law.max() == pytest.approx(19.0)


@pytest.mark.parametrize("n", [2, 3, 8, 21, 51])
def test_noise_atoms_symmetric(n):
    vals, probs = clipped_normal_atoms(n, 30.0, 20.0)
    assert vals.size == n
    assert probs.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.dot(vals, probs) == pytest.approx(0.0, abs=1e-12)
    assert np.all(np.abs(vals) <= 20.0)
    with pytest.raises(DomainError):
        clipped_normal_atoms(1, 30.0, 20.0)


def test_maze_walls_and_goal():
    start = MAZE.initial_state
    r, c = MAZE.cell(start)
    assert MAZE.layout.char(r, c) == "S"
    # the start cell has a wall to its left
    assert MAZE.successor_distribution(start, LEFT).values.tolist() == [start]
    assert MAZE.reward_distribution(start, LEFT).values.tolist() == [-1.0]
    goal = MAZE.layout.states("G")[0]
    gr, gc = MAZE.cell(goal)
    before = sid(MAZE, gr, gc - 1)
    t = step(MAZE, before, RIGHT, np.random.default_rng(0))
    assert t.next_state == goal and t.reward == 10.0 and t.done
    assert MAZE.gamma == 0.999


def test_cliffwalk_dynamics():
    rng = np.random.default_rng(0)
    for r, c in [(3, 4), (2, 4)]:
        s = sid(CLIFF, r, c)
        for a in (UP, DOWN):
            assert len(CLIFF.successor_distribution(s, a)) == 1
    assert CLIFF.transitions[sid(CLIFF, 2, 4), RIGHT, sid(CLIFF, 3, 4)] == pytest.approx(0.1)
    assert CLIFF.transitions[sid(CLIFF, 2, 9), RIGHT].max() == 1.0  # row 2 slips stop at column 7
    t = step(CLIFF, sid(CLIFF, 3, 3), DOWN, rng)
    assert t.reward == -100.0 and t.done and t.next_state in CLIFF.terminal_states
    t = step(CLIFF, sid(CLIFF, 1, 4), RIGHT, rng)
    assert (t.reward, t.next_state) == (-1.0, sid(CLIFF, 1, 5))
    assert CLIFF.gamma == 0.999


def test_terminal_rows_self_loop_with_zero_reward():
    for mdp in (MAZE, CLIFF):
        for s in mdp.terminal_states:
            for a in range(mdp.n_actions):
                assert mdp.transitions[s, a, s] == 1.0
                assert mdp.reward_distribution(s, a).values.tolist() == [0.0]


def test_rows_are_distributions():
    for mdp in (MAZE, CLIFF):
        np.testing.assert_allclose(mdp.transitions.sum(axis=2), 1.0, atol=1e-12)


def test_invalid_mdp():
    P = np.full((2, 1, 2), 0.5)
    with pytest.raises(DomainError):
        TabularMdp.from_tables(P, [[0.0], [0.0]], 1.0)
    with pytest.raises(DomainError):
        TabularMdp.from_tables(np.full((2, 1, 2), 0.6), [[0.0], [0.0]], 0.9)


def test_target_distribution_examples():
    P = np.zeros((3, 1, 3))
    P[0, 0, [1, 2]] = 0.5
    P[1, 0, 1] = P[2, 0, 2] = 1.0
    coin = DiscreteDistribution.from_atoms([0, 1], [0.5, 0.5])
    mdp = TabularMdp.from_tables(P, [[coin], [0.0], [0.0]], 0.5)
    d = target_distribution(mdp, 0, 0, [0.0, 10.0, 20.0])
    assert d.values.tolist() == [5.0, 6.0, 10.0, 11.0]
    assert d.probs.tolist() == [0.25] * 4
    det = target_distribution(mdp, 1, 0, [0.0, 10.0, 20.0])
    assert det.values.tolist() == [5.0]
    with pytest.raises(DomainError):
        target_distribution(mdp, 0, 0, [0.0, np.inf, 1.0])
    with pytest.raises(DomainError):
        target_distribution(mdp, 0, 3, [0.0, 0.0, 0.0])


@settings(max_examples=30)
@given(st.integers(0, 10_000))
def test_target_distribution_support_and_mass(seed):
    rng = np.random.default_rng(seed)
    mdp = random_mdp(rng)
    v = rng.normal(size=mdp.n_states)
    for s in range(mdp.n_states):
        for a in range(mdp.n_actions):
            d = target_distribution(mdp, s, a, v)
            assert abs(d.probs.sum() - 1) <= 1e-12
            n_succ = np.count_nonzero(mdp.transitions[s, a])
            assert len(d) <= n_succ * mdp.reward_values.shape[1]


def test_episode_reproducible_and_chained():
    def policy(s, rng):
        return int(rng.integers(4))

    a = run_episode(MAZE, policy, np.random.default_rng(11))
    b = run_episode(MAZE, policy, np.random.default_rng(11))
    assert a.transitions == b.transitions and a.total_return == b.total_return
    for t0, t1 in zip(a.transitions, a.transitions[1:]):
        assert t0.next_state == t1.state
    g = sum(MAZE.gamma ** k * t.reward for k, t in enumerate(a.transitions))
    assert a.total_return == pytest.approx(g, abs=1e-10)
    assert a.visited_states == {MAZE.initial_state} | {t.next_state for t in a.transitions}


def test_episode_cap_marks_truncation():
    trace = run_episode(MAZE, lambda s, rng: LEFT, np.random.default_rng(0), max_steps=25)
    assert len(trace) == 25 and trace.truncated and not trace.transitions[-1].done


def test_rollout_batch_direct_route():
    # straight along the bottom corridor: nine steps through the noisy cell
    probs = np.zeros((MAZE.n_states, 4))
    probs[:, UP] = 1.0
    for s in range(MAZE.n_states):
        r, c = MAZE.cell(s)
        if r == 3:
            probs[s] = 0.0
            probs[s, RIGHT] = 1.0
    u = np.random.default_rng(0).random((3, 500, 3))
    ret, lengths, dones, finals, exposed = rollout_batch(
        probs, MAZE.transitions, MAZE.reward_index, MAZE.reward_values, MAZE.reward_probs,
        MAZE.terminal, MAZE.gamma, MAZE.initial_state, 500, u, np.zeros((MAZE.n_states, 4), bool))
    assert np.all(dones) and np.all(lengths == 9)
    assert set(finals.tolist()) == MAZE.goal_states()
    assert not exposed.any()


def test_grid_text_round_trip():
    for name in ("maze", "cliffwalk"):
        text = load_map(name)
        layout = GridLayout.parse(text)
        assert GridLayout.parse(layout.to_text()) == layout
        assert layout.to_text().strip() == text.strip()


@pytest.mark.parametrize("text", ["", "#S#\n##", "#SX#", "#S.#", "#SG#\n#S.#"])
def test_bad_grids(text):
    with pytest.raises(DomainError):
        GridLayout.parse(text)


def test_build_environment_by_name():
    assert build_environment("Maze").name == "maze"
    assert build_environment("cliffwalk", gamma=0.99).gamma == 0.99
    with pytest.raises(DomainError):
        build_environment("lunar")
