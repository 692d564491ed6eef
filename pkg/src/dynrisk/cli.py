"""Command-line entry point: ``dynrisk {train,oracle,evaluate,plot}``.

Exit codes: 0 success, 1 validation error, 2 runtime failure (including any
failed seed in a sweep).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

from .exceptions import DomainError, UsageError
from .harness import (
    OUTPUT_ROOT_ENV,
    ConfigError,
    EnvConfig,
    committed_configs,
    evaluate_policy_file,
    load_config,
    parse_seeds,
    plot_run,
    run_experiment,
    run_oracle,
)
from .risk_measures import RiskSpec

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("dynrisk")


def _risk_args(p, required=True):
    p.add_argument("--risk", choices=["expectile", "cvar", "mean"], required=required,
                   help="risk functional of the dynamic objective")
    p.add_argument("--alpha", type=float, default=None, help="risk level in (0, 1); ignored for mean")


def _env_args(p):
    p.add_argument("--env", default="maze", help="maze, cliffwalk, or a path to a text grid")
    p.add_argument("--noise-atoms", type=int, default=21, help="atoms of the discretised noisy-cell reward")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dynrisk", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run a seed sweep from a config")
    t.add_argument("--config", help=f"YAML file or committed name ({', '.join(committed_configs())})")
    t.add_argument("--seeds", help='seed list such as "0-9" or "0,3,5"; overrides the config')
    t.add_argument("--seed", type=int, help="single seed; overrides the config")
    t.add_argument("--out", help=f"output directory (default ${OUTPUT_ROOT_ENV}/<name>, root 'runs')")
    t.add_argument("--workers", type=int, default=1, help="parallel seed workers")
    t.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                   help="set a config entry, e.g. agent.total_steps=50000 (repeatable)")
    t.add_argument("--list", action="store_true", help="list committed configs and exit")

    o = sub.add_parser("oracle", help="exact value iteration or policy evaluation")
    _env_args(o)
    _risk_args(o)
    o.add_argument("--policy", help="policy CSV (state,action,logit) to evaluate instead of optimising")
    o.add_argument("--tol", type=float, default=1e-9)
    o.add_argument("--episodes", type=int, default=100, help="greedy rollouts used for path classification")
    o.add_argument("--seed", type=int, default=0)
    o.add_argument("--out", help="directory for q.csv, v.csv, policy.csv and oracle.json")

    e = sub.add_parser("evaluate", help="Monte Carlo metrics of a saved policy")
    _env_args(e)
    e.add_argument("--policy", required=True, help="policy CSV (state,action,logit)")
    e.add_argument("--episodes", type=int, default=100)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--cvar-alpha", type=float, default=0.2, help="level of the empirical return CVaR")
    _risk_args(e, required=False)
    e.add_argument("--out", help="write the report JSON here")

    pl = sub.add_parser("plot", help="learning curve from a run directory")
    pl.add_argument("--run", required=True, help="directory holding metrics_<seed>.csv files")
    pl.add_argument("--metric", default="risk_averse_rate",
                    choices=["mean_return", "risk_averse_rate", "empirical_cvar"])
    pl.add_argument("--out", help="image path (default <run>/<metric>.png)")
    return parser


def _spec(args) -> RiskSpec | None:
    if args.risk is None:
        return None
    if args.risk == "mean":
        return RiskSpec.mean()
    if args.alpha is None:
        raise ConfigError("--alpha is required for expectile and cvar")
    return RiskSpec.parse(args.risk, args.alpha)


def _env(args) -> EnvConfig:
    return EnvConfig(name=args.env, noise_atoms=args.noise_atoms)


def _emit(report, out=None):
    text = json.dumps(report, indent=2)
    print(text)
    if out:
        with open(out, "w") as fh:
            fh.write(text + "\n")


def cmd_train(args) -> int:
    if args.list:
        print("\n".join(committed_configs()))
        return EXIT_OK
    if not args.config:
        raise ConfigError("train needs --config")
    cfg = load_config(args.config, args.override)
    if args.seeds is not None and args.seed is not None:
        raise ConfigError("use either --seed or --seeds")
    if args.seeds is not None:
        cfg.seeds = parse_seeds(args.seeds)
        cfg.__post_init__()
    elif args.seed is not None:
        cfg.seeds = [args.seed]
        cfg.__post_init__()
    if args.out:
        cfg.out = args.out
    if args.workers < 1:
        raise ConfigError("--workers must be at least 1")
    result = run_experiment(cfg, workers=args.workers)
    last = result.summary["checkpoints"][-1] if result.summary["checkpoints"] else None
    if last:
        print(f"{cfg.name}: step {last['step']}, risk-averse rate "
              f"{last['risk_averse_rate']['mean']:.3f} +- {last['risk_averse_rate']['se']:.3f}, "
              f"mean return {last['mean_return']['mean']:.3f} ({len(result.summary['seeds'])} seeds)")
    print(f"outputs in {result.out_dir}")
    for seed, err in result.failures.items():
        print(f"seed {seed} failed: {err}", file=sys.stderr)
    return EXIT_OK if result.ok else EXIT_RUNTIME


def cmd_oracle(args) -> int:
    report = run_oracle(_env(args), _spec(args), out_dir=args.out, policy_path=args.policy,
                        tol=args.tol, episodes=args.episodes, seed=args.seed)
    _emit(report)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    report = evaluate_policy_file(_env(args), args.policy, episodes=args.episodes, seed=args.seed,
                                  cvar_alpha=args.cvar_alpha, spec=_spec(args))
    _emit(report, args.out)
    return EXIT_OK


def cmd_plot(args) -> int:
    print(plot_run(args.run, args.out, args.metric))
    return EXIT_OK


COMMANDS = {"train": cmd_train, "oracle": cmd_oracle, "evaluate": cmd_evaluate, "plot": cmd_plot}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse uses 2 for usage errors; we reserve 2 for runtime
        return EXIT_OK if exc.code == 0 else EXIT_VALIDATION
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (DomainError, UsageError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:
        log.debug("runtime failure", exc_info=True)
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
