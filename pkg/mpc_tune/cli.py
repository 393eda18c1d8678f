"""Command-line interface for mpc_tune."""

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from mpc_tune.benchmarks import available_problems, get_problem
from mpc_tune.config import RunConfig, apply_overrides, load_config
from mpc_tune.errors import ConfigError, InfeasibleContextError, TuningAbortedError
from mpc_tune.loaders import load_policy
from mpc_tune.models import PRESETS
from mpc_tune.pipeline import compare_policies, golden_file, run_bench, tune, validate_policy, write_oracle

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_INFEASIBLE = 3
EXIT_REGRESSION = 4


def _common_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        "--config",
        type=str,
        help="TOML config file merged over the bundled defaults",
    )
    common.add_argument("--seed", type=int, help="Root seed (default: [tuning] seed)")
    common.add_argument(
        "--preset",
        choices=sorted(PRESETS),
        help="Robustness preset: robust (delta=0.93) or non-robust (delta=0.5)",
    )
    common.add_argument("--delta", type=float, help="Constraint probability; overrides the preset")
    common.add_argument("--out", type=str, help="Output directory (default: [output] dir)")
    common.add_argument("--jobs", type=int, help="Worker processes for episodes and seeds")
    common.add_argument(
        "-v",
        "--verbose",
        action="store_true",
        help="Enable debug logging",
    )
    return common


def create_parser() -> argparse.ArgumentParser:
    """Create argument parser for CLI."""
    common = _common_parser()
    parser = argparse.ArgumentParser(
        prog="mpc-tune",
        description="Contextual constrained Bayesian optimization of cabin-climate MPC parameters",
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    commands = parser.add_subparsers(dest="command", required=True)

    tune_parser = commands.add_parser("tune", parents=[common], help="Run the tuning loop and smooth the policy")
    tune_parser.add_argument("--budget", type=int, help="Total number of evaluations (default: [tuning] budget)")
    tune_parser.add_argument(
        "--resume",
        action="store_true",
        help="Continue from dataset.csv in the output directory",
    )

    validate_parser = commands.add_parser(
        "validate", parents=[common], help="Monte Carlo validation of a policy on fresh episodes"
    )
    validate_parser.add_argument("policy", type=str, help="Policy CSV written by 'tune'")
    validate_parser.add_argument(
        "--n-episodes",
        type=int,
        help="Number of episodes (default: [validate] n_episodes)",
    )

    compare_parser = commands.add_parser(
        "compare", parents=[common], help="Constant versus context-dependent parameters on the nominal plant"
    )
    compare_parser.add_argument("policy", type=str, help="Policy CSV written by 'tune'")
    compare_parser.add_argument(
        "--contexts",
        type=float,
        nargs="+",
        help="Mass flows in kg/h (default: [compare] contexts)",
    )
    compare_parser.add_argument(
        "--constant-theta",
        type=float,
        nargs=2,
        metavar=("LOG_LAMBDA", "LOG_LAMBDA0"),
        help="Constant parameters (default: the policy at the first context)",
    )

    bench_parser = commands.add_parser(
        "bench", parents=[common], help="Score the optimizer on a synthetic problem against its grid oracle"
    )
    bench_parser.add_argument("problem", type=str, help=f"One of: {', '.join(available_problems())}")
    bench_parser.add_argument("--seeds", type=int, help="Number of seeds (default: [bench] seeds)")
    bench_parser.add_argument("--budget", type=int, help="Evaluations per seed (default: [bench] budget)")

    oracle_parser = commands.add_parser(
        "oracle", parents=[common], help="Regenerate the golden oracle file of a synthetic problem"
    )
    oracle_parser.add_argument("problem", type=str, help=f"One of: {', '.join(available_problems())}")

    return parser


def _load(args: argparse.Namespace) -> RunConfig:
    config = load_config(args.config)
    config = apply_overrides(
        config,
        seed=args.seed,
        budget=getattr(args, "budget", None) if args.command == "tune" else None,
        delta=args.delta,
        out=args.out,
        jobs=args.jobs,
        preset=args.preset,
    )
    if args.command == "bench" and args.budget is not None:
        if args.budget < config.tuning.n_initial:
            raise ConfigError(f"--budget must be >= n_initial ({config.tuning.n_initial}), got {args.budget}")
        config = replace(config, bench=replace(config.bench, budget=args.budget))
    return config


def _run(args: argparse.Namespace) -> int:
    config = _load(args)

    if args.command == "tune":
        summary = tune(config, resume=args.resume)
        print(
            f"Wrote policy to {summary.out_dir / 'policy.csv'} "
            f"({summary.dataset_size} evaluations, {summary.failed_evaluations} failed, gamma={summary.policy.gamma:g})"
        )
        return EXIT_OK

    if args.command == "validate":
        report = validate_policy(load_policy(args.policy), config, n_episodes=args.n_episodes, out_dir=config.output_dir)
        rate = "n/a" if report.satisfaction_rate is None else f"{report.satisfaction_rate:.3f}"
        print(
            f"Satisfaction rate {rate} over {report.n_episodes} episodes "
            f"({report.n_failed} failed, g_max={report.g_max:g})"
        )
        return EXIT_OK

    if args.command == "compare":
        contexts = args.contexts if args.contexts else list(config.compare.contexts)
        constant = args.constant_theta if args.constant_theta else list(config.compare.constant_theta)
        report = compare_policies(load_policy(args.policy), constant, contexts, config, out_dir=config.output_dir)
        print(f"Compared {len(contexts)} contexts; {len(report.flagged)} episodes exceed g_max")
        return EXIT_OK

    if args.command == "bench":
        report = run_bench(args.problem, config, seeds=args.seeds, out_dir=config.output_dir)
        print(
            f"{report.problem}: median suboptimality {report.median_suboptimality:.4f}, "
            f"worst {report.worst_suboptimality:.4f}, {report.violations} violations"
        )
        if not report.passed:
            for reason in report.failures:
                print(f"Regression: {reason}", file=sys.stderr)
            return EXIT_REGRESSION
        return EXIT_OK

    path = None
    if args.out:
        path = Path(args.out) / golden_file(get_problem(args.problem), config).name
    path = write_oracle(args.problem, config, path)
    print(f"Wrote oracle to {path}")
    return EXIT_OK


def main(argv=None):
    """Main CLI entry point."""
    parser = create_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )

    try:
        code = _run(args)
    except (ConfigError, FileNotFoundError) as e:
        print(f"Error: {e}", file=sys.stderr)
        code = EXIT_CONFIG
    except (InfeasibleContextError, TuningAbortedError) as e:
        print(f"Error: {e}", file=sys.stderr)
        code = EXIT_INFEASIBLE
    except Exception as e:
        print(f"Error: {e}", file=sys.stderr)
        code = EXIT_ERROR
    sys.exit(code)


if __name__ == "__main__":
    main()
