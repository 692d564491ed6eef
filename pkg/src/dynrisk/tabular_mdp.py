"""Finite MDPs with finite-support stochastic rewards, a sampler, and the
Maze / Cliffwalk grid environments.

Rewards are stored per (s, a, s') so that a reward may depend on where the
transition lands (entering a cliff pays -100, entering the noisy cell pays
-1 + noise). Distinct reward laws are deduplicated into padded tables
``reward_values[k, :]`` / ``reward_probs[k, :]`` addressed by
``reward_index[s, a, s']``; padding atoms carry probability 0.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from statistics import NormalDist

import numpy as np

from ._accel import njit
from .exceptions import DomainError, UsageError
from .risk_measures import DiscreteDistribution

UP, DOWN, LEFT, RIGHT = 0, 1, 2, 3
ACTION_NAMES = ("Up", "Down", "Left", "Right")
_MOVES = ((-1, 0), (1, 0), (0, -1), (0, 1))

GRID_CHARS = "#SGRC."
EPISODE_CAP = 500


@dataclass(frozen=True)
class Transition:
    state: int
    action: int
    reward: float
    next_state: int
    done: bool


@dataclass
class EpisodeTrace:
    transitions: list = field(default_factory=list)
    total_return: float = 0.0
    visited_states: set = field(default_factory=set)
    truncated: bool = False

    @property
    def final_state(self):
        return self.transitions[-1].next_state if self.transitions else None

    def __len__(self):
        return len(self.transitions)


@dataclass(frozen=True)
class GridLayout:
    """Parsed character grid plus the cell <-> state bookkeeping."""

    rows: tuple
    state_of: dict  # (row, col) -> state index
    cell_of: tuple  # state index -> (row, col)

    @classmethod
    def parse(cls, text: str) -> GridLayout:
        rows = tuple(line.rstrip("\n") for line in text.strip("\n").splitlines())
        if not rows:
            raise DomainError("empty grid")
        width = len(rows[0])
        if any(len(r) != width for r in rows):
            raise DomainError("grid rows must all have the same width")
        bad = {ch for r in rows for ch in r} - set(GRID_CHARS)
        if bad:
            raise DomainError(f"unknown grid characters {sorted(bad)}")
        counts = {ch: sum(r.count(ch) for r in rows) for ch in "SG"}
        if counts["S"] != 1:
            raise DomainError("grid needs exactly one start cell 'S'")
        if counts["G"] < 1:
            raise DomainError("grid needs at least one goal cell 'G'")
        state_of, cell_of = {}, []
        for i, r in enumerate(rows):
            for j, ch in enumerate(r):
                if ch != "#":
                    state_of[(i, j)] = len(cell_of)
                    cell_of.append((i, j))
        return cls(rows, state_of, tuple(cell_of))

    def to_text(self) -> str:
        return "\n".join(self.rows) + "\n"

    def char(self, row, col):
        if 0 <= row < len(self.rows) and 0 <= col < len(self.rows[0]):
            return self.rows[row][col]
        return "#"

    def cells(self, ch):
        return [cell for cell in self.cell_of if self.char(*cell) == ch]

    def states(self, ch):
        return [self.state_of[c] for c in self.cells(ch)]

    @property
    def n_states(self):
        return len(self.cell_of)


@dataclass(frozen=True, eq=False)
class TabularMdp:
    transitions: np.ndarray  # (S, A, S)
    reward_index: np.ndarray  # (S, A, S) int
    reward_values: np.ndarray  # (K, M)
    reward_probs: np.ndarray  # (K, M)
    gamma: float
    initial_state: int
    terminal: np.ndarray  # (S,) bool
    name: str = "custom"
    layout: GridLayout | None = None
    slip_cells: frozenset = frozenset()

    def __post_init__(self):
        S, A, S2 = self.transitions.shape
        if S != S2:
            raise DomainError("transition table must be (S, A, S)")
        if not 0.0 < self.gamma < 1.0:
            raise DomainError("gamma must lie strictly inside (0, 1)")
        if np.any(self.transitions < 0) or np.any(
            np.abs(self.transitions.sum(axis=2) - 1.0) > 1e-12
        ):
            raise DomainError("every transition row must be a distribution")
        if self.reward_index.shape != self.transitions.shape:
            raise DomainError("reward_index must match the transition table")
        if not 0 <= self.initial_state < S:
            raise DomainError("initial state out of range")
        for arr in (self.transitions, self.reward_index, self.reward_values,
                    self.reward_probs, self.terminal):
            arr.setflags(write=False)

    @classmethod
    def from_tables(cls, transitions, rewards, gamma, initial_state=0,
                    terminal_states=(), successor_rewards=None, **meta) -> TabularMdp:
        """Build from a transition array and per-(s, a) reward laws.

        ``rewards[s][a]`` is a :class:`DiscreteDistribution` (or a number for a
        deterministic reward). ``successor_rewards`` optionally maps
        ``(s, a, s')`` to a law that overrides ``rewards[s][a]`` for that
        successor. Terminal rows are overwritten with a zero-reward self-loop.
        """
        P = np.array(transitions, dtype=float)
        S, A, _ = P.shape
        terminal = np.zeros(S, dtype=bool)
        for t in terminal_states:
            terminal[int(t)] = True
        table = _RewardTable()
        zero = table.add(DiscreteDistribution.point(0.0))
        ridx = np.empty((S, A, S), dtype=np.int64)
        for s in range(S):
            for a in range(A):
                if terminal[s]:
                    P[s, a] = 0.0
                    P[s, a, s] = 1.0
                    ridx[s, a] = zero
                    continue
                ridx[s, a] = table.add(_as_dist(rewards[s][a]))
        for (s, a, s2), dist in (successor_rewards or {}).items():
            if not terminal[s]:
                ridx[s, a, s2] = table.add(_as_dist(dist))
        vals, probs = table.arrays()
        return cls(P, ridx, vals, probs, float(gamma), int(initial_state), terminal, **meta)

    @property
    def n_states(self):
        return self.transitions.shape[0]

    @property
    def n_actions(self):
        return self.transitions.shape[1]

    @property
    def terminal_states(self):
        return set(np.flatnonzero(self.terminal).tolist())

    @property
    def r_max(self):
        return float(np.max(np.abs(self.reward_values)))

    def successor_distribution(self, s, a) -> DiscreteDistribution:
        self._check(s, a)
        row = self.transitions[s, a]
        nz = np.flatnonzero(row)
        return DiscreteDistribution.from_atoms(nz, row[nz])

    def reward_distribution(self, s, a, next_state=None) -> DiscreteDistribution:
        """Reward law of (s, a), optionally conditioned on the successor."""
        self._check(s, a)
        if next_state is not None:
            return self._reward_law(self.reward_index[s, a, next_state])
        row = self.transitions[s, a]
        vals, probs = [], []
        for s2 in np.flatnonzero(row):
            k = self.reward_index[s, a, s2]
            vals.append(self.reward_values[k])
            probs.append(row[s2] * self.reward_probs[k])
        return DiscreteDistribution.from_atoms(np.concatenate(vals), np.concatenate(probs))

    def _reward_law(self, k):
        return DiscreteDistribution.from_atoms(self.reward_values[k], self.reward_probs[k])

    def _check(self, s, a=0):
        if not (0 <= s < self.n_states and 0 <= a < self.n_actions):
            raise DomainError(f"state/action ({s}, {a}) out of range")

    def cell(self, s):
        return self.layout.cell_of[s] if self.layout else None

    def goal_states(self):
        return set(self.layout.states("G")) if self.layout else set()


class _RewardTable:
    def __init__(self):
        self._dists = []
        self._keys = {}

    def add(self, dist):
        key = (dist.values.tobytes(), dist.probs.tobytes())
        if key not in self._keys:
            self._keys[key] = len(self._dists)
            self._dists.append(dist)
        return self._keys[key]

    def arrays(self):
        width = max(len(d) for d in self._dists)
        vals = np.zeros((len(self._dists), width))
        probs = np.zeros((len(self._dists), width))
        for k, d in enumerate(self._dists):
            vals[k, : len(d)] = d.values
            vals[k, len(d):] = d.values[-1]
            probs[k, : len(d)] = d.probs
        return vals, probs


def _as_dist(x):
    if isinstance(x, DiscreteDistribution):
        return x
    return DiscreteDistribution.point(float(x))


# --- sampling kernels -------------------------------------------------------

@njit
def sample_categorical(probs, u):
    acc = 0.0
    last = 0
    for i in range(probs.shape[0]):
        p = probs[i]
        if p > 0.0:
            acc += p
            last = i
            if u < acc:
                return i
    return last


@njit
def env_step(P, ridx, rvals, rprobs, terminal, s, a, u_next, u_reward):
    s2 = sample_categorical(P[s, a], u_next)
    k = ridx[s, a, s2]
    r = rvals[k, sample_categorical(rprobs[k], u_reward)]
    return s2, r, terminal[s2]


@njit
def rollout_batch(action_probs, P, ridx, rvals, rprobs, terminal, gamma, s0,
                  max_steps, uniforms, risky_pairs):
    """Roll out ``uniforms.shape[0]`` episodes under a fixed (S, A) action table.

    ``uniforms`` has shape (episodes, max_steps, 3): action, successor and
    reward draws. Returns discounted returns, lengths, done flags, final
    states, and whether any (s, a) flagged in ``risky_pairs`` was taken.
    """
    n_ep = uniforms.shape[0]
    returns = np.zeros(n_ep)
    lengths = np.zeros(n_ep, dtype=np.int64)
    dones = np.zeros(n_ep, dtype=np.bool_)
    finals = np.zeros(n_ep, dtype=np.int64)
    exposed = np.zeros(n_ep, dtype=np.bool_)
    for e in range(n_ep):
        s = s0
        disc = 1.0
        g = 0.0
        t = 0
        done = False
        while t < max_steps:
            a = sample_categorical(action_probs[s], uniforms[e, t, 0])
            if risky_pairs[s, a]:
                exposed[e] = True
            s2, r, done = env_step(P, ridx, rvals, rprobs, terminal, s, a,
                                   uniforms[e, t, 1], uniforms[e, t, 2])
            g += disc * r
            disc *= gamma
            s = s2
            t += 1
            if done:
                break
        returns[e] = g
        lengths[e] = t
        dones[e] = done
        finals[e] = s
    return returns, lengths, dones, finals, exposed


# --- Python-level API ----------------------------------------------------------

def step(mdp: TabularMdp, state: int, action: int, rng: np.random.Generator) -> Transition:
    mdp._check(state, action)
    if mdp.terminal[state]:
        raise UsageError(f"cannot step from terminal state {state}")
    u = rng.random(2)
    s2, r, done = env_step(mdp.transitions, mdp.reward_index, mdp.reward_values,
                           mdp.reward_probs, mdp.terminal, state, action, u[0], u[1])
    return Transition(int(state), int(action), float(r), int(s2), bool(done))


def run_episode(mdp: TabularMdp, choose_action, rng: np.random.Generator,
                max_steps: int = EPISODE_CAP) -> EpisodeTrace:
    """Roll out one episode; ``choose_action(state, rng)`` picks actions."""
    trace = EpisodeTrace()
    s = mdp.initial_state
    trace.visited_states.add(s)
    disc = 1.0
    for _ in range(max_steps):
        tr = step(mdp, s, choose_action(s, rng), rng)
        trace.transitions.append(tr)
        trace.total_return += disc * tr.reward
        disc *= mdp.gamma
        s = tr.next_state
        trace.visited_states.add(s)
        if tr.done:
            break
    else:
        trace.truncated = True
    return trace


def target_distribution(mdp: TabularMdp, state: int, action: int, v) -> DiscreteDistribution:
    """Exact law of r + gamma * V(s') under (state, action)."""
    mdp._check(state, action)
    v = np.asarray(v, dtype=float)
    if v.shape != (mdp.n_states,) or not np.all(np.isfinite(v)):
        raise DomainError("v must hold one finite value per state")
    row = mdp.transitions[state, action]
    vals, probs = [], []
    for s2 in np.flatnonzero(row):
        k = mdp.reward_index[state, action, s2]
        vals.append(mdp.reward_values[k] + mdp.gamma * v[s2])
        probs.append(row[s2] * mdp.reward_probs[k])
    return DiscreteDistribution.from_atoms(np.concatenate(vals), np.concatenate(probs))


# --- grid environments ----------------------------------------------------------

def load_map(name: str) -> str:
    return resources.files("dynrisk").joinpath("maps", f"{name}.txt").read_text()


def clipped_normal_atoms(n_atoms: int, scale: float, bound: float):
    """Quantile-midpoint discretisation of clip(scale * Z, -bound, bound).

    The clip atoms keep their exact mass P[|scale * Z| >= bound]; the
    interior mass is split into ``n_atoms - 2`` equal-probability bins, each
    represented by the law's quantile at the bin's probability midpoint.
    Atoms are mirrored so the mean is exactly zero.
    """
    if n_atoms < 2:
        raise DomainError("need at least two noise atoms")
    z = NormalDist()
    if n_atoms == 2:
        q = min(bound, -scale * z.inv_cdf(0.25))
        return np.array([-q, q]), np.array([0.5, 0.5])
    tail = z.cdf(-bound / scale)
    inner = n_atoms - 2
    mass = (1.0 - 2.0 * tail) / inner
    half = [scale * z.inv_cdf(tail + (k + 0.5) * mass) for k in range(inner // 2)]
    mid = [0.0] if inner % 2 else []
    left = [-bound] + half
    values = np.array(left + mid + [-x for x in reversed(left)])
    probs = np.array([tail] + [mass] * inner + [tail])
    return values, probs


def grid_mdp(layout: GridLayout, *, step_reward=-1.0, goal_reward=10.0,
             cliff_reward=-100.0, noise: DiscreteDistribution | None = None,
             slips=None, gamma=0.999, name="grid") -> TabularMdp:
    """Gridworld with four actions; walls and the border leave the agent in place.

    ``slips`` maps a cell to the probability that a Left/Right move from it
    slides one row down instead. Entering a goal or cliff cell ends the
    episode; entering an ``R`` cell pays ``step_reward`` plus ``noise``.
    """
    slips = dict(slips or {})
    S = layout.n_states
    P = np.zeros((S, 4, S))
    goals = set(layout.states("G"))
    cliffs = set(layout.states("C"))
    red = set(layout.states("R"))
    step_law = DiscreteDistribution.point(step_reward)
    red_law = noise.shift(step_reward) if noise is not None else step_law

    def reward_for(s2):
        if s2 in goals:
            return DiscreteDistribution.point(goal_reward)
        if s2 in cliffs:
            return DiscreteDistribution.point(cliff_reward)
        if s2 in red:
            return red_law
        return step_law

    def dest(cell, move):
        r, c = cell[0] + move[0], cell[1] + move[1]
        return cell if layout.char(r, c) == "#" else (r, c)

    rewards = [[step_law] * 4 for _ in range(S)]
    succ_rewards = {}
    for s, cell in enumerate(layout.cell_of):
        for a, move in enumerate(_MOVES):
            s_move = layout.state_of[dest(cell, move)]
            p_slip = slips.get(cell, 0.0) if a in (LEFT, RIGHT) else 0.0
            P[s, a, s_move] += 1.0 - p_slip
            if p_slip > 0.0:
                P[s, a, layout.state_of[dest(cell, _MOVES[DOWN])]] += p_slip
            for s2 in np.flatnonzero(P[s, a]):
                succ_rewards[(s, a, int(s2))] = reward_for(int(s2))
    start = layout.states("S")[0]
    slip_states = frozenset(layout.state_of[c] for c, p in slips.items() if p > 0)
    return TabularMdp.from_tables(
        P, rewards, gamma, start, goals | cliffs, succ_rewards,
        name=name, layout=layout, slip_cells=slip_states,
    )


def build_maze(noise_atoms: int = 21, layout: str | None = None, gamma: float = 0.999) -> TabularMdp:
    """Maze: a short corridor through one noisy cell and a longer safe detour.

    The noisy cell pays -1 + clip(30 * N(0, 1), -20, 20), discretised to
    ``noise_atoms`` atoms; the goal pays +10, every other step -1.
    """
    vals, probs = clipped_normal_atoms(noise_atoms, 30.0, 20.0)
    grid = GridLayout.parse(layout or load_map("maze"))
    return grid_mdp(grid, goal_reward=10.0, noise=DiscreteDistribution.from_atoms(vals, probs),
                    gamma=gamma, name="maze")


def build_cliffwalk(layout: str | None = None, gamma: float = 0.999) -> TabularMdp:
    """4x12 cliffwalk inside a wall border (row 4 holds start, cliff and goal).

    Left/Right moves slide one row down with probability 0.2 from row 3,
    columns 2-11 (into the cliff), and 0.1 from row 2, columns 2-7.
    """
    grid = GridLayout.parse(layout or load_map("cliffwalk"))
    slips = {(3, c): 0.2 for c in range(2, 12)}
    slips.update({(2, c): 0.1 for c in range(2, 8)})
    slips = {cell: p for cell, p in slips.items() if cell in grid.state_of}
    return grid_mdp(grid, goal_reward=-1.0, cliff_reward=-100.0, slips=slips,
                    gamma=gamma, name="cliffwalk")


def build_environment(name: str, **kwargs) -> TabularMdp:
    name = name.lower()
    if name == "maze":
        return build_maze(**kwargs)
    if name == "cliffwalk":
        return build_cliffwalk(**kwargs)
    raise DomainError(f"unknown environment {name!r}")
