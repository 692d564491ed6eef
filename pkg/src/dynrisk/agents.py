"""Training loops: off-policy expectile / CVaR actor-critic and the baselines.

Each algorithm has an ``@njit`` chunk kernel that advances training by a
block of environment steps. Kernels never draw random numbers themselves;
they consume uniforms pre-drawn from a numpy Generator, so the compiled and
pure-Python paths produce identical streams for the same seed. Evaluation
draws from a separate child stream so that checkpoint frequency never
changes the training trajectory.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields
from enum import Enum

import numpy as np

from ._accel import njit
from .critics import cvar_clip_bound, cvar_increments, expectile_increment
from .exceptions import DomainError, UsageError
from .metrics import RunMetrics, classify_outcomes, goal_state_mask, risky_pair_mask
from .risk_measures import expectile_grad_term, quantile_grad_term
from .softmax_policy import LOGIT_CLIP, SoftmaxPolicyTable, softmax_row, softmax_table
from .tabular_mdp import EPISODE_CAP, TabularMdp, Transition, env_step, rollout_batch, sample_categorical

log = logging.getLogger(__name__)


class Algorithm(str, Enum):
    EXP_AC = "ExpAC"
    CVAR_AC = "CVaRAC"
    Q_LEARNING = "QLearning"
    EPG = "EPG"
    EXP_PG = "ExpPG"
    ENVELOPE_PG = "EnvelopePG"

    @classmethod
    def parse(cls, name) -> Algorithm:
        if isinstance(name, cls):
            return name
        for alg in cls:
            if alg.value.lower() == str(name).lower():
                return alg
        raise DomainError(f"unknown algorithm {name!r}; expected one of {[a.value for a in cls]}")


@dataclass
class AgentConfig:
    """Hyperparameters of one training run.

    ``explore_eps`` mixes uniform actions into the behaviour policy for the
    first ``explore_steps`` steps (actor-critic) or is the constant epsilon
    of epsilon-greedy (Q-learning).

    ``quantile_scale`` sets the unit of the VaR step: q moves by
    ``lr_quantile * quantile_scale`` per sample, which is the same as running
    the critic on rewards divided by that scale. ``None`` means the largest
    absolute reward of the MDP.
    """

    algorithm: Algorithm = Algorithm.EXP_AC
    alpha: float = 0.05
    lr_policy: float = 5e-3
    lr_q: float = 5e-3
    lr_quantile: float = 1e-2
    tau: float = 0.01
    batch_size: int = 32
    buffer_capacity: int = 50_000
    total_steps: int = 200_000
    entropy_coeff: float = 0.0
    explore_eps: float = 0.05
    explore_steps: int = 100_000
    max_episode_steps: int = EPISODE_CAP
    quantile_scale: float | None = None
    seed: int = 0

    def __post_init__(self):
        self.algorithm = Algorithm.parse(self.algorithm)
        self.validate()

    def validate(self):
        alg = self.algorithm
        if not 0.0 < self.alpha < 1.0:
            raise DomainError("alpha must lie in (0, 1)")
        if alg is Algorithm.EPG and self.alpha != 0.5:
            raise DomainError("EPG is the risk-neutral actor-critic and needs alpha = 0.5")
        rates = {"lr_q": self.lr_q}
        if alg is not Algorithm.Q_LEARNING:
            rates["lr_policy"] = self.lr_policy
        if alg in (Algorithm.CVAR_AC, Algorithm.ENVELOPE_PG):
            rates["lr_quantile"] = self.lr_quantile
        for name, rate in rates.items():
            if not rate > 0.0:
                raise DomainError(f"{name} must be positive")
        if alg in (Algorithm.CVAR_AC, Algorithm.ENVELOPE_PG) and not self.lr_quantile > self.lr_q:
            raise DomainError("two-timescale rule: lr_quantile must exceed lr_q")
        if not 0.0 < self.tau <= 1.0:
            raise DomainError("tau must lie in (0, 1]")
        if self.batch_size < 1 or self.buffer_capacity < self.batch_size:
            raise DomainError("need 1 <= batch_size <= buffer_capacity")
        if self.total_steps < 1 or self.max_episode_steps < 1:
            raise DomainError("total_steps and max_episode_steps must be positive")
        if self.entropy_coeff < 0.0:
            raise DomainError("entropy_coeff must be non-negative")
        if not 0.0 <= self.explore_eps <= 1.0 or self.explore_steps < 0:
            raise DomainError("explore_eps must lie in [0, 1] and explore_steps be >= 0")
        if self.quantile_scale is not None and not self.quantile_scale > 0.0:
            raise DomainError("quantile_scale must be positive")

    def quantile_step(self, mdp: TabularMdp) -> float:
        scale = self.quantile_scale if self.quantile_scale is not None else max(mdp.r_max, 1e-12)
        return self.lr_quantile * scale

    @property
    def risk_kind(self) -> int:
        return 1 if self.algorithm in (Algorithm.CVAR_AC, Algorithm.ENVELOPE_PG) else 0

    def to_dict(self):
        out = asdict(self)
        out["algorithm"] = self.algorithm.value
        return out

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


# --- replay buffer ------------------------------------------------------------------

@njit
def floyd_sample(n, k, uniforms, out):
    """k distinct indices from range(n) (Floyd's algorithm), one uniform per pick."""
    m = 0
    for j in range(n - k, n):
        t = int(uniforms[m] * (j + 1))
        if t > j:
            t = j
        for i in range(m):
            if out[i] == t:
                t = j
                break
        out[m] = t
        m += 1


class ReplayBuffer:
    """Ring buffer of transitions; minibatches are drawn without replacement."""

    def __init__(self, capacity: int, rng: np.random.Generator | None = None):
        if capacity < 1:
            raise DomainError("capacity must be positive")
        self.capacity = int(capacity)
        self.rng = rng if rng is not None else np.random.default_rng()
        self.states = np.zeros(capacity, dtype=np.int64)
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.rewards = np.zeros(capacity)
        self.next_states = np.zeros(capacity, dtype=np.int64)
        self.dones = np.zeros(capacity, dtype=np.bool_)
        self.pos = 0
        self.size = 0

    def __len__(self):
        return self.size

    def add(self, t: Transition):
        i = self.pos
        self.states[i], self.actions[i], self.rewards[i] = t.state, t.action, t.reward
        self.next_states[i], self.dones[i] = t.next_state, t.done
        self.pos = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def _at(self, i) -> Transition:
        return Transition(int(self.states[i]), int(self.actions[i]), float(self.rewards[i]),
                          int(self.next_states[i]), bool(self.dones[i]))

    def contents(self) -> list[Transition]:
        """Stored transitions, oldest first."""
        start = self.pos if self.size == self.capacity else 0
        return [self._at((start + k) % self.capacity) for k in range(self.size)]

    def sample(self, n: int) -> list[Transition]:
        if not 0 < n <= self.size:
            raise UsageError(f"cannot draw {n} distinct transitions from {self.size}")
        idx = np.empty(n, dtype=np.int64)
        floyd_sample(self.size, n, self.rng.random(n), idx)
        return [self._at(i) for i in idx]


# --- shared kernel helpers ------------------------------------------------------------

@njit
def _behaviour_action(logits_row, explore, u_mix, u_act):
    A = logits_row.shape[0]
    if u_mix < explore:
        a = int(u_act * A)
        return a if a < A else A - 1
    return sample_categorical(softmax_row(logits_row), u_act)


@njit
def _score_step(theta, s, a, weight, eta, clip):
    """theta(s, .) += eta * weight * grad log pi(a|s)."""
    pi = softmax_row(theta[s])
    for b in range(theta.shape[1]):
        g = -pi[b]
        if b == a:
            g += 1.0
        x = theta[s, b] + eta * weight * g
        theta[s, b] = min(max(x, -clip), clip)


@njit
def _clip_pair(x, bound):
    if x > bound:
        return bound, 1
    if x < -bound:
        return -bound, 1
    return x, 0


# --- off-policy actor-critic ------------------------------------------------------------

@njit
def actor_critic_chunk(P, ridx, rvals, rprobs, terminal, gamma, s0, max_ep_steps,
                       kind, alpha, lr_pi, lr_q, lr_var, tau, batch, entropy,
                       explore, explore_until, theta, theta_bar, q, q_bar, q_var,
                       buf_s, buf_a, buf_r, buf_s2, buf_d, ctr, bound, uniforms):
    """Advance the replay actor-critic by ``uniforms.shape[0]`` environment steps.

    ``ctr`` holds [state, episode step, buffer pos, buffer size, global step,
    clip hits]. Each row of ``uniforms`` is (explore, action, successor,
    reward, batch draws...). Critic increments of one minibatch are computed
    from the pre-update tables and applied together; the actor then takes a
    surrogate step on the minibatch states with the updated critic.
    """
    S, A = q.shape
    cap = buf_s.shape[0]
    idx = np.empty(batch, dtype=np.int64)
    dq = np.zeros((S, A))
    dv = np.zeros((S, A))
    weight = np.zeros(S)
    for i in range(uniforms.shape[0]):
        s = ctr[0]
        eps = explore if ctr[4] < explore_until else 0.0
        a = _behaviour_action(theta[s], eps, uniforms[i, 0], uniforms[i, 1])
        s2, r, done = env_step(P, ridx, rvals, rprobs, terminal, s, a, uniforms[i, 2], uniforms[i, 3])
        p = ctr[2]
        buf_s[p], buf_a[p], buf_r[p], buf_s2[p], buf_d[p] = s, a, r, s2, done
        ctr[2] = (p + 1) % cap
        if ctr[3] < cap:
            ctr[3] += 1
        ctr[4] += 1
        ctr[1] += 1
        if done or ctr[1] >= max_ep_steps:
            ctr[0] = s0
            ctr[1] = 0
        else:
            ctr[0] = s2
        if ctr[3] < batch:
            continue

        floyd_sample(ctr[3], batch, uniforms[i, 4:], idx)
        for j in range(batch):
            k = idx[j]
            bs, ba = buf_s[k], buf_a[k]
            y = buf_r[k]
            if not buf_d[k]:
                pi2 = softmax_row(theta_bar[buf_s2[k]])
                ev = 0.0
                for b in range(A):
                    ev += pi2[b] * q_bar[buf_s2[k], b]
                y += gamma * ev
            if kind == 0:
                dq[bs, ba] += expectile_increment(q[bs, ba], y, alpha, lr_q)
            else:
                d_var, d_cvar = cvar_increments(q_var[bs, ba], q[bs, ba], y, alpha, lr_var, lr_q)
                dv[bs, ba] += d_var
                dq[bs, ba] += d_cvar
            weight[bs] += 1.0 / batch
        for j in range(batch):
            k = idx[j]
            bs, ba = buf_s[k], buf_a[k]
            if dq[bs, ba] != 0.0 or dv[bs, ba] != 0.0:
                q[bs, ba] += dq[bs, ba]
                dq[bs, ba] = 0.0
                if kind == 1:
                    q_var[bs, ba] += dv[bs, ba]
                    dv[bs, ba] = 0.0
                    q[bs, ba], h1 = _clip_pair(q[bs, ba], bound)
                    q_var[bs, ba], h2 = _clip_pair(q_var[bs, ba], bound)
                    ctr[5] += h1 + h2

        for j in range(batch):
            bs = buf_s[idx[j]]
            w = weight[bs]
            if w == 0.0:
                continue
            weight[bs] = 0.0
            pi = softmax_row(theta[bs])
            adv = np.empty(A)
            for b in range(A):
                adv[b] = q[bs, b]
                if entropy > 0.0:
                    adv[b] -= entropy * np.log(pi[b])
            v = 0.0
            for b in range(A):
                v += pi[b] * adv[b]
            for b in range(A):
                x = theta[bs, b] + lr_pi * w * pi[b] * (adv[b] - v)
                theta[bs, b] = min(max(x, -LOGIT_CLIP), LOGIT_CLIP)

        for s_ in range(S):
            for b in range(A):
                theta_bar[s_, b] += tau * (theta[s_, b] - theta_bar[s_, b])
                q_bar[s_, b] += tau * (q[s_, b] - q_bar[s_, b])


# --- risk-neutral Q-learning ------------------------------------------------------------

@njit
def _argmax_row(row):
    best = 0
    for b in range(1, row.shape[0]):
        if row[b] > row[best]:
            best = b
    return best


@njit
def q_learning_chunk(P, ridx, rvals, rprobs, terminal, gamma, s0, max_ep_steps,
                     lr, eps, q, ctr, uniforms):
    """Epsilon-greedy tabular Q-learning. ``ctr`` = [state, episode step, global step]."""
    A = q.shape[1]
    for i in range(uniforms.shape[0]):
        s = ctr[0]
        if uniforms[i, 0] < eps:
            a = int(uniforms[i, 1] * A)
            if a >= A:
                a = A - 1
        else:
            a = _argmax_row(q[s])
        s2, r, done = env_step(P, ridx, rvals, rprobs, terminal, s, a, uniforms[i, 2], uniforms[i, 3])
        y = r
        if not done:
            y += gamma * q[s2].max()
        q[s, a] += lr * (y - q[s, a])
        ctr[2] += 1
        ctr[1] += 1
        if done or ctr[1] >= max_ep_steps:
            ctr[0] = s0
            ctr[1] = 0
        else:
            ctr[0] = s2


# --- on-policy baselines --------------------------------------------------------------------

@njit
def exp_pg_chunk(P, ridx, rvals, rprobs, terminal, gamma, s0, max_ep_steps,
                 alpha, lr_pi, lr_v, theta, v, ctr, uniforms):
    """On-policy expectile PG: state-value expectile TD plus a score-function actor.

    The actor weight is the expectile TD bracket (1-alpha) delta_- + alpha delta_+;
    the critic moves by 2 * lr_v times the same bracket.
    """
    for i in range(uniforms.shape[0]):
        s = ctr[0]
        a = sample_categorical(softmax_row(theta[s]), uniforms[i, 1])
        s2, r, done = env_step(P, ridx, rvals, rprobs, terminal, s, a, uniforms[i, 2], uniforms[i, 3])
        boot = 0.0 if done else gamma * v[s2]
        term = expectile_grad_term(r + boot - v[s], 0.0, alpha)
        v[s] += 2.0 * lr_v * term
        _score_step(theta, s, a, term, lr_pi, LOGIT_CLIP)
        ctr[2] += 1
        ctr[1] += 1
        if done or ctr[1] >= max_ep_steps:
            ctr[0] = s0
            ctr[1] = 0
        else:
            ctr[0] = s2


@njit
def envelope_pg_chunk(P, ridx, rvals, rprobs, terminal, gamma, s0, max_ep_steps,
                      alpha, lr_pi, lr_v, lr_var, theta, v, v_var, bound, ctr, uniforms):
    """On-policy CVaR PG with a learned state VaR.

    State-level two-timescale critic (VaR fast, CVaR slow); the actor weight is
    (1/alpha) * min(y - q(s), 0) with y = r + gamma * V(s'). ``ctr`` carries a
    fourth slot for clip hits.
    """
    for i in range(uniforms.shape[0]):
        s = ctr[0]
        a = sample_categorical(softmax_row(theta[s]), uniforms[i, 1])
        s2, r, done = env_step(P, ridx, rvals, rprobs, terminal, s, a, uniforms[i, 2], uniforms[i, 3])
        y = r if done else r + gamma * v[s2]
        var_s = v_var[s]
        weight = min(y - var_s, 0.0) / alpha
        d_var, d_cvar = cvar_increments(var_s, v[s], y, alpha, lr_var, lr_v)
        v_var[s], h1 = _clip_pair(var_s + d_var, bound)
        v[s], h2 = _clip_pair(v[s] + d_cvar, bound)
        ctr[3] += h1 + h2
        _score_step(theta, s, a, weight, lr_pi, LOGIT_CLIP)
        ctr[2] += 1
        ctr[1] += 1
        if done or ctr[1] >= max_ep_steps:
            ctr[0] = s0
            ctr[1] = 0
        else:
            ctr[0] = s2


# --- driver ---------------------------------------------------------------------------------

@dataclass
class EvalSpec:
    cadence: int = 1000
    episodes: int = 10
    cvar_alpha: float = 0.2
    max_steps: int = EPISODE_CAP

    def __post_init__(self):
        if self.cadence < 1 or self.episodes < 1 or self.max_steps < 1:
            raise DomainError("cadence, episodes and max_steps must be positive")
        if not 0.0 < self.cvar_alpha < 1.0:
            raise DomainError("cvar_alpha must lie in (0, 1)")


@dataclass
class TrainResult:
    """Final tables of a run plus its metrics stream.

    ``q`` is the (CVaR or expectile) action-value table for the actor-critic
    and Q-learning; the on-policy baselines fill ``v`` (and ``v_var``) instead.
    """

    algorithm: Algorithm
    policy: SoftmaxPolicyTable | None
    q: np.ndarray | None
    metrics: list = field(default_factory=list)
    q_var: np.ndarray | None = None
    v: np.ndarray | None = None
    v_var: np.ndarray | None = None
    clip_hits: int = 0

    def eval_probs(self) -> np.ndarray:
        if self.policy is not None:
            return self.policy.probs()
        return greedy_probs(self.q)


class TrainingDiverged(RuntimeError):
    pass


def greedy_probs(q) -> np.ndarray:
    q = np.asarray(q)
    pi = np.zeros_like(q, dtype=float)
    pi[np.arange(q.shape[0]), np.argmax(q, axis=1)] = 1.0
    return pi


class Evaluator:
    """Rolls out checkpoint episodes from its own random stream."""

    def __init__(self, mdp: TabularMdp, spec: EvalSpec, rng: np.random.Generator):
        self.mdp = mdp
        self.spec = spec
        self.rng = rng
        grid = mdp.layout is not None
        self.goal = goal_state_mask(mdp) if grid else None
        self.risky = risky_pair_mask(mdp) if grid else np.zeros((mdp.n_states, mdp.n_actions), dtype=bool)

    def rollouts(self, probs: np.ndarray):
        """(returns, PathClass codes) of ``spec.episodes`` fresh episodes."""
        m, sp = self.mdp, self.spec
        u = self.rng.random((sp.episodes, sp.max_steps, 3))
        returns, _, _, finals, exposed = rollout_batch(
            np.ascontiguousarray(probs, dtype=float), m.transitions, m.reward_index, m.reward_values,
            m.reward_probs, m.terminal, m.gamma, m.initial_state, sp.max_steps, u, self.risky,
        )
        if self.goal is None:
            codes = np.full(sp.episodes, 2)
        else:
            codes = classify_outcomes(finals, exposed, self.goal)
        return returns, codes

    def __call__(self, step: int, probs: np.ndarray) -> RunMetrics:
        returns, codes = self.rollouts(probs)
        return RunMetrics.from_rollouts(step, returns, codes, self.spec.cvar_alpha)


def _streams(seed: int):
    train, evaluation = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(train), np.random.default_rng(evaluation)


def _check_finite(step, **tables):
    for name, t in tables.items():
        if t is not None and not np.all(np.isfinite(t)):
            bad = np.argwhere(~np.isfinite(t))[:5].tolist()
            raise TrainingDiverged(f"non-finite entries in {name} at step {step}: first (s, a) {bad}")


def _drive(mdp, cfg: AgentConfig, eval_spec: EvalSpec | None, callbacks, advance, probs_fn, tables,
           width: int):
    """Shared loop: evaluate, advance one cadence block, check tables, repeat."""
    eval_spec = eval_spec or EvalSpec()
    rng, eval_rng = _streams(cfg.seed)
    evaluator = Evaluator(mdp, eval_spec, eval_rng)
    metrics = []

    def emit(step):
        rm = evaluator(step, probs_fn())
        metrics.append(rm)
        for cb in callbacks or ():
            cb(rm)

    emit(0)
    done = 0
    while done < cfg.total_steps:
        n = min(eval_spec.cadence, cfg.total_steps - done)
        advance(rng.random((n, width)))
        done += n
        _check_finite(done, **tables)
        emit(done)
    return metrics


def _mdp_arrays(mdp):
    return (mdp.transitions, mdp.reward_index, mdp.reward_values, mdp.reward_probs,
            mdp.terminal, mdp.gamma, mdp.initial_state)


def train_actor_critic(mdp: TabularMdp, cfg: AgentConfig, callbacks=(), eval_spec: EvalSpec | None = None,
                       kernel=None) -> TrainResult:
    """Off-policy actor-critic for dynamic expectile (ExpAC, EPG) or CVaR (CVaRAC)."""
    if cfg.algorithm not in (Algorithm.EXP_AC, Algorithm.CVAR_AC, Algorithm.EPG):
        raise UsageError(f"train_actor_critic cannot run {cfg.algorithm.value}")
    kernel = kernel or actor_critic_chunk
    S, A = mdp.n_states, mdp.n_actions
    theta = np.zeros((S, A))
    theta_bar = theta.copy()
    q = np.zeros((S, A))
    q_bar = q.copy()
    q_var = np.zeros((S, A))
    cap = cfg.buffer_capacity
    buf = (np.zeros(cap, np.int64), np.zeros(cap, np.int64), np.zeros(cap),
           np.zeros(cap, np.int64), np.zeros(cap, np.bool_))
    ctr = np.array([mdp.initial_state, 0, 0, 0, 0, 0], dtype=np.int64)
    kind = cfg.risk_kind
    bound = cvar_clip_bound(mdp)

    def advance(u):
        kernel(*_mdp_arrays(mdp), cfg.max_episode_steps, kind, cfg.alpha, cfg.lr_policy, cfg.lr_q,
               cfg.quantile_step(mdp), cfg.tau, cfg.batch_size, cfg.entropy_coeff, cfg.explore_eps,
               cfg.explore_steps, theta, theta_bar, q, q_bar, q_var, *buf, ctr, bound, u)

    metrics = _drive(mdp, cfg, eval_spec, callbacks, advance, lambda: softmax_table(theta),
                     {"theta": theta, "q": q, "q_var": q_var}, 4 + cfg.batch_size)
    if ctr[5]:
        log.warning("%s: critic clip at +-%.3g hit %d times", mdp.name, bound, ctr[5])
    return TrainResult(cfg.algorithm, SoftmaxPolicyTable(theta), q, metrics,
                       q_var=q_var if kind == 1 else None, clip_hits=int(ctr[5]))


def train_q_learning(mdp: TabularMdp, cfg: AgentConfig, callbacks=(), eval_spec: EvalSpec | None = None,
                     kernel=None) -> TrainResult:
    """Risk-neutral epsilon-greedy Q-learning, evaluated with its greedy policy."""
    if cfg.algorithm is not Algorithm.Q_LEARNING:
        raise UsageError(f"train_q_learning cannot run {cfg.algorithm.value}")
    kernel = kernel or q_learning_chunk
    q = np.zeros((mdp.n_states, mdp.n_actions))
    ctr = np.array([mdp.initial_state, 0, 0], dtype=np.int64)

    def advance(u):
        kernel(*_mdp_arrays(mdp), cfg.max_episode_steps, cfg.lr_q, cfg.explore_eps, q, ctr, u)

    metrics = _drive(mdp, cfg, eval_spec, callbacks, advance, lambda: greedy_probs(q), {"q": q}, 4)
    return TrainResult(cfg.algorithm, None, q, metrics)


def train_exp_pg(mdp: TabularMdp, cfg: AgentConfig, callbacks=(), eval_spec: EvalSpec | None = None,
                 kernel=None) -> TrainResult:
    """On-policy expectile policy gradient with a state-value critic (no replay, no targets)."""
    if cfg.algorithm is not Algorithm.EXP_PG:
        raise UsageError(f"train_exp_pg cannot run {cfg.algorithm.value}")
    kernel = kernel or exp_pg_chunk
    theta = np.zeros((mdp.n_states, mdp.n_actions))
    v = np.zeros(mdp.n_states)
    ctr = np.array([mdp.initial_state, 0, 0], dtype=np.int64)

    def advance(u):
        kernel(*_mdp_arrays(mdp), cfg.max_episode_steps, cfg.alpha, cfg.lr_policy, cfg.lr_q, theta, v, ctr, u)

    metrics = _drive(mdp, cfg, eval_spec, callbacks, advance, lambda: softmax_table(theta),
                     {"theta": theta, "v": v}, 4)
    return TrainResult(cfg.algorithm, SoftmaxPolicyTable(theta), None, metrics, v=v)


def train_envelope_pg(mdp: TabularMdp, cfg: AgentConfig, callbacks=(), eval_spec: EvalSpec | None = None,
                      kernel=None) -> TrainResult:
    """On-policy CVaR policy gradient weighted by the hinge below a learned state VaR."""
    if cfg.algorithm is not Algorithm.ENVELOPE_PG:
        raise UsageError(f"train_envelope_pg cannot run {cfg.algorithm.value}")
    kernel = kernel or envelope_pg_chunk
    theta = np.zeros((mdp.n_states, mdp.n_actions))
    v = np.zeros(mdp.n_states)
    v_var = np.zeros(mdp.n_states)
    ctr = np.array([mdp.initial_state, 0, 0, 0], dtype=np.int64)
    bound = cvar_clip_bound(mdp)

    def advance(u):
        kernel(*_mdp_arrays(mdp), cfg.max_episode_steps, cfg.alpha, cfg.lr_policy, cfg.lr_q,
               cfg.quantile_step(mdp), theta, v, v_var, bound, ctr, u)

    metrics = _drive(mdp, cfg, eval_spec, callbacks, advance, lambda: softmax_table(theta),
                     {"theta": theta, "v": v, "v_var": v_var}, 4)
    if ctr[3]:
        log.warning("%s: critic clip at +-%.3g hit %d times", mdp.name, bound, ctr[3])
    return TrainResult(cfg.algorithm, SoftmaxPolicyTable(theta), None, metrics, v=v, v_var=v_var,
                       clip_hits=int(ctr[3]))


TRAINERS = {
    Algorithm.EXP_AC: train_actor_critic,
    Algorithm.CVAR_AC: train_actor_critic,
    Algorithm.EPG: train_actor_critic,
    Algorithm.Q_LEARNING: train_q_learning,
    Algorithm.EXP_PG: train_exp_pg,
    Algorithm.ENVELOPE_PG: train_envelope_pg,
}


def train(mdp: TabularMdp, cfg: AgentConfig, callbacks=(), eval_spec: EvalSpec | None = None) -> TrainResult:
    return TRAINERS[cfg.algorithm](mdp, cfg, callbacks, eval_spec)
