"""Experiment orchestration: configs, seed sweeps, oracle runs and output files.

Output layout of a training run (``<out>/``)::

    config.yaml            resolved configuration
    metrics_<seed>.csv     step, mean_return, risk_averse_rate, empirical_cvar
    policy_<seed>.csv      final logits (state, action, logit)
    values_<seed>.csv      final critic (state, action, value), when the agent has one
    summary.json           across-seed mean and standard error per checkpoint
"""
from __future__ import annotations

import copy
import csv
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from .agents import AgentConfig, EvalSpec, Evaluator, greedy_probs, train
from .exact import ValueTables, evaluate_policy_exact, value_iteration_exact
from .exceptions import DomainError
from .metrics import PathClass, RunMetrics
from .risk_measures import DiscreteDistribution, RiskSpec
from .softmax_policy import SoftmaxPolicyTable
from .tabular_mdp import EPISODE_CAP, GridLayout, TabularMdp, build_cliffwalk, build_maze, clipped_normal_atoms, grid_mdp

log = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "DYNRISK_OUTPUT_ROOT"
DEFAULT_OUTPUT_ROOT = "runs"


class ConfigError(DomainError):
    """Invalid configuration; the CLI maps it to exit code 1."""


# --- environments -------------------------------------------------------------------

@dataclass
class EnvConfig:
    """``name`` is "maze", "cliffwalk" or a path to a text grid.

    The reward fields only apply to custom grids; ``slips`` lists
    ``[row, first_col, last_col, prob]`` lanes for them.
    """

    name: str = "maze"
    noise_atoms: int = 21
    gamma: float = 0.999
    step_reward: float = -1.0
    goal_reward: float = 10.0
    cliff_reward: float = -100.0
    noise_scale: float = 30.0
    noise_bound: float = 20.0
    slips: list = field(default_factory=list)

    def build(self) -> TabularMdp:
        kind = self.name.lower()
        if kind == "maze":
            return build_maze(self.noise_atoms, gamma=self.gamma)
        if kind == "cliffwalk":
            return build_cliffwalk(gamma=self.gamma)
        path = Path(self.name)
        if not path.is_file():
            raise ConfigError(f"environment {self.name!r} is neither maze, cliffwalk nor a grid file")
        try:
            layout = GridLayout.parse(path.read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read grid {path}: {exc}") from None
        vals, probs = clipped_normal_atoms(self.noise_atoms, self.noise_scale, self.noise_bound)
        slips = {}
        for lane in self.slips:
            if len(lane) != 4:
                raise ConfigError("each slip lane is [row, first_col, last_col, prob]")
            row, lo, hi, p = lane
            for c in range(int(lo), int(hi) + 1):
                if (int(row), c) in layout.state_of:
                    slips[(int(row), c)] = float(p)
        return grid_mdp(layout, step_reward=self.step_reward, goal_reward=self.goal_reward,
                        cliff_reward=self.cliff_reward, noise=DiscreteDistribution.from_atoms(vals, probs),
                        slips=slips, gamma=self.gamma, name=path.stem)


# --- run configuration ------------------------------------------------------------------

@dataclass
class RunConfig:
    name: str
    environment: EnvConfig
    agent: AgentConfig
    evaluation: EvalSpec
    seeds: list
    out: str | None = None

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("seed list must be non-empty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be distinct")
        if any(not isinstance(s, int) or s < 0 for s in self.seeds):
            raise ConfigError("seeds must be non-negative integers")

    def agent_for(self, seed: int) -> AgentConfig:
        cfg = copy.copy(self.agent)
        cfg.seed = int(seed)
        return cfg

    def output_dir(self) -> Path:
        if self.out:
            return Path(self.out)
        return Path(os.environ.get(OUTPUT_ROOT_ENV, DEFAULT_OUTPUT_ROOT)) / self.name

    def to_dict(self):
        agent = self.agent.to_dict()
        agent.pop("seed")
        return {
            "name": self.name,
            "environment": asdict(self.environment),
            "agent": agent,
            "evaluation": asdict(self.evaluation),
            "seeds": list(self.seeds),
        }


def _section(cls, data, where, skip=()):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be a mapping")
    allowed = {f.name for f in fields(cls)} - set(skip)
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {sorted(unknown)}; allowed: {sorted(allowed)}")
    try:
        return cls(**data)
    except ConfigError:
        raise
    except (DomainError, TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def parse_seeds(spec) -> list[int]:
    """Accept a list, an int, "0-9" ranges and comma lists such as "0,2,5-7"."""
    if isinstance(spec, int):
        return [spec]
    if isinstance(spec, (list, tuple)):
        return [int(s) for s in spec]
    out = []
    for part in str(spec).split(","):
        part = part.strip()
        if not part:
            continue
        try:
            if "-" in part:
                lo, hi = part.split("-", 1)
                out.extend(range(int(lo), int(hi) + 1))
            else:
                out.append(int(part))
        except ValueError:
            raise ConfigError(f"bad seed specification {spec!r}") from None
    return out


def _apply_override(raw: dict, item: str):
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not key=value")
    key, text = item.split("=", 1)
    try:
        value = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"override {item!r}: {exc}") from None
    node = raw
    parts = key.strip().split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {key!r} descends into a non-mapping")
    node[parts[-1]] = value


def config_from_dict(raw: dict, overrides=()) -> RunConfig:
    raw = copy.deepcopy(raw) if raw else {}
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    if isinstance(raw.get("environment"), str):
        raw["environment"] = {"name": raw["environment"]}
    for item in overrides:
        _apply_override(raw, item)
    unknown = set(raw) - {"name", "environment", "agent", "evaluation", "seeds", "out"}
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {sorted(unknown)}")
    env = raw.get("environment", {})
    if isinstance(env, str):
        env = {"name": env}
    if "algorithm" not in (raw.get("agent") or {}):
        raise ConfigError("agent.algorithm is required")
    return RunConfig(
        name=str(raw.get("name", "experiment")),
        environment=_section(EnvConfig, env, "environment"),
        agent=_section(AgentConfig, raw.get("agent"), "agent", skip=("seed",)),
        evaluation=_section(EvalSpec, raw.get("evaluation"), "evaluation"),
        seeds=parse_seeds(raw.get("seeds", [0])),
        out=raw.get("out"),
    )


def committed_configs() -> list[str]:
    root = resources.files("dynrisk").joinpath("configs")
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".yaml"))


def load_config(source, overrides=()) -> RunConfig:
    """Load a YAML config from a path or by committed name (e.g. "maze-expac")."""
    path = Path(source)
    if path.is_file():
        text = path.read_text()
    else:
        res = resources.files("dynrisk").joinpath("configs", f"{source}.yaml")
        if not res.is_file():
            raise ConfigError(f"no config file {source!r}; committed configs: {committed_configs()}")
        text = res.read_text()
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    return config_from_dict(raw, overrides)


# --- outputs ------------------------------------------------------------------------------

def write_metrics_csv(path, metrics: list[RunMetrics]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RunMetrics.FIELDS)
        for m in metrics:
            w.writerow([m.step, repr(m.mean_return), repr(m.risk_averse_rate), repr(m.empirical_cvar)])


def read_metrics_csv(path) -> list[RunMetrics]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != RunMetrics.FIELDS:
            raise DomainError(f"{path}: expected columns {RunMetrics.FIELDS}")
        return [RunMetrics(int(r["step"]), float(r["mean_return"]), float(r["risk_averse_rate"]),
                           float(r["empirical_cvar"])) for r in reader]


def write_values_csv(path, q):
    ValueTables(np.asarray(q, float), np.zeros(len(q))).to_csv(path)


def summarize(per_seed: dict) -> dict:
    """Across-seed mean and standard error (ddof=1; 0 for one seed) per checkpoint."""
    seeds = sorted(per_seed)
    if not seeds:
        return {"seeds": [], "checkpoints": []}
    steps = [m.step for m in per_seed[seeds[0]]]
    for s in seeds:
        if [m.step for m in per_seed[s]] != steps:
            raise DomainError("seeds disagree on checkpoint steps")
    n = len(seeds)
    rows = []
    for i, step in enumerate(steps):
        row = {"step": step}
        for key in RunMetrics.FIELDS[1:]:
            x = np.array([getattr(per_seed[s][i], key) for s in seeds])
            se = float(x.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
            row[key] = {"mean": float(x.sum() / n), "se": se}
        rows.append(row)
    return {"seeds": seeds, "checkpoints": rows}


@dataclass
class ExperimentResult:
    out_dir: Path
    summary: dict
    failures: dict

    @property
    def ok(self):
        return not self.failures

    def final(self, key="risk_averse_rate"):
        return self.summary["checkpoints"][-1][key]["mean"]


def run_seed(cfg: RunConfig, seed: int, out_dir) -> list[RunMetrics]:
    """Train one seed and write its metrics and final tables."""
    out_dir = Path(out_dir)
    mdp = cfg.environment.build()
    result = train(mdp, cfg.agent_for(seed), eval_spec=cfg.evaluation)
    write_metrics_csv(out_dir / f"metrics_{seed}.csv", result.metrics)
    if result.policy is not None:
        result.policy.to_csv(out_dir / f"policy_{seed}.csv")
    else:
        SoftmaxPolicyTable.greedy_from(result.q).to_csv(out_dir / f"policy_{seed}.csv")
    if result.q is not None:
        write_values_csv(out_dir / f"values_{seed}.csv", result.q)
    return result.metrics


def _run_seed_safe(args):
    cfg, seed, out_dir = args
    try:
        return seed, run_seed(cfg, seed, out_dir), None
    except Exception as exc:  # isolate: one failing seed must not sink the sweep
        log.exception("seed %d failed", seed)
        return seed, None, f"{type(exc).__name__}: {exc}"


def run_experiment(cfg: RunConfig, workers: int = 1) -> ExperimentResult:
    out_dir = cfg.output_dir()
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "config.yaml").write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
    except OSError as exc:
        raise OSError(f"cannot prepare output directory {out_dir}: {exc}") from exc
    cfg.environment.build()  # fail fast on a bad environment before spawning workers
    jobs = [(cfg, s, out_dir) for s in cfg.seeds]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            results = list(pool.map(_run_seed_safe, jobs))
    else:
        results = [_run_seed_safe(j) for j in jobs]
    per_seed = {s: m for s, m, err in results if err is None}
    failures = {s: err for s, _, err in results if err is not None}
    summary = summarize(per_seed)
    summary = {"experiment": cfg.name, "failed_seeds": {str(k): v for k, v in failures.items()}, **summary}
    with open(out_dir / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2)
    return ExperimentResult(out_dir, summary, failures)


# --- oracle and evaluation -------------------------------------------------------------------

def classify_policy(mdp: TabularMdp, probs, episodes=100, seed=0, max_steps=EPISODE_CAP) -> dict:
    """Roll out ``probs`` and count episodes per path class."""
    ev = Evaluator(mdp, EvalSpec(cadence=1, episodes=episodes, max_steps=max_steps),
                   np.random.default_rng(seed))
    returns, codes = ev.rollouts(probs)
    m = RunMetrics.from_rollouts(0, returns, codes)
    counts = {c.name: int(np.sum(codes == c)) for c in PathClass}
    return {
        "classification": max(counts, key=counts.get),
        "counts": counts,
        "mean_return": m.mean_return,
        "empirical_cvar": m.empirical_cvar,
    }


def run_oracle(env: EnvConfig, spec: RiskSpec, out_dir=None, policy_path=None, tol=1e-9,
               episodes=100, seed=0) -> dict:
    """Exact value iteration (or evaluation of a given policy CSV) plus a greedy-rollout check."""
    mdp = env.build()
    if policy_path is not None:
        policy = SoftmaxPolicyTable.from_csv(policy_path)
        if policy.shape != (mdp.n_states, mdp.n_actions):
            raise DomainError(f"{policy_path}: policy shape {policy.shape} does not match the environment")
        tables = evaluate_policy_exact(mdp, policy, spec, tol)
        probs = policy.probs()
    else:
        tables, _ = value_iteration_exact(mdp, spec, tol)
        policy = SoftmaxPolicyTable.greedy_from(tables.q)
        probs = greedy_probs(tables.q)
    report = {
        "environment": mdp.name,
        "risk": str(spec),
        "mode": "evaluate" if policy_path is not None else "optimize",
        "start_value": float(tables.v[mdp.initial_state]),
        "sweeps": int(tables.iterations),
        **classify_policy(mdp, probs, episodes, seed),
    }
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        tables.to_csv(out_dir / "q.csv")
        with open(out_dir / "v.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["state", "value"])
            for s, x in enumerate(tables.v):
                w.writerow([s, repr(float(x))])
        if policy_path is None:
            policy.to_csv(out_dir / "policy.csv")
        with open(out_dir / "oracle.json", "w") as fh:
            json.dump(report, fh, indent=2)
    return report


def evaluate_policy_file(env: EnvConfig, policy_path, episodes=100, seed=0, cvar_alpha=0.2,
                         spec: RiskSpec | None = None) -> dict:
    """Monte Carlo metrics of a saved policy, plus its exact dynamic-risk value if ``spec`` is given."""
    mdp = env.build()
    policy = SoftmaxPolicyTable.from_csv(policy_path)
    if policy.shape != (mdp.n_states, mdp.n_actions):
        raise DomainError(f"{policy_path}: policy shape {policy.shape} does not match the environment")
    ev = Evaluator(mdp, EvalSpec(1, episodes, cvar_alpha), np.random.default_rng(seed))
    m = ev(0, policy.probs())
    report = {
        "environment": mdp.name,
        "episodes": episodes,
        "mean_return": m.mean_return,
        "risk_averse_rate": m.risk_averse_rate,
        "empirical_cvar": m.empirical_cvar,
    }
    if spec is not None:
        tables = evaluate_policy_exact(mdp, policy, spec)
        report["risk"] = str(spec)
        report["exact_start_value"] = float(tables.v[mdp.initial_state])
    return report


def plot_run(run_dir, out_path=None, metric="risk_averse_rate"):
    """Learning curve (mean +- standard error) from the per-seed CSVs of a run."""
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError as exc:  # plotting is an optional extra
        raise RuntimeError("plotting needs matplotlib (pip install 'artifact[plot]')") from exc
    run_dir = Path(run_dir)
    files = sorted(run_dir.glob("metrics_*.csv"))
    if not files:
        raise DomainError(f"no metrics_*.csv files in {run_dir}")
    if metric not in RunMetrics.FIELDS[1:]:
        raise DomainError(f"metric must be one of {RunMetrics.FIELDS[1:]}")
    per_seed = {int(f.stem.split("_")[1]): read_metrics_csv(f) for f in files}
    summary = summarize(per_seed)
    steps = np.array([c["step"] for c in summary["checkpoints"]])
    mean = np.array([c[metric]["mean"] for c in summary["checkpoints"]])
    se = np.array([c[metric]["se"] for c in summary["checkpoints"]])
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(steps, mean)
    ax.fill_between(steps, mean - se, mean + se, alpha=0.3)
    ax.set_xlabel("environment steps")
    ax.set_ylabel(metric.replace("_", " "))
    ax.set_title(f"{run_dir.name} ({len(files)} seeds)")
    out_path = Path(out_path) if out_path else run_dir / f"{metric}.png"
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path
