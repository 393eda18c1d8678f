"""
Python API behind the command line: tune, validate, compare, bench and oracle.

Every entry point takes a RunConfig, writes its report files into an output
directory and returns a report object.
"""

import logging
import multiprocessing as mp
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, TypeVar, Union

import numpy as np

from mpc_tune import tuner
from mpc_tune.benchmarks import (
    SyntheticProblem,
    constraint_violations,
    get_problem,
    oracle_table,
    suboptimality,
)
from mpc_tune.config import RunConfig
from mpc_tune.contexts import UniformContextSource, get_context_source
from mpc_tune.episode import EpisodeEnvironment, run_episode
from mpc_tune.errors import ConfigError, InfeasibleContextError
from mpc_tune.loaders import load_dataset, load_oracle
from mpc_tune.models import EpisodeOutcome, EpisodeSpec, OracleTable, Policy, TuningConfig
from mpc_tune.plant import DisturbanceTrajectory, MismatchSample
from mpc_tune.seeding import derive_seed, substream
from mpc_tune.sinks import (
    JSONLSink,
    write_dataset_csv,
    write_json,
    write_oracle_csv,
    write_policy_csv,
    write_table_csv,
    write_trajectory_csv,
)
from mpc_tune.smoothing import context_grid, pointwise_policy, query, smooth

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


def _map(func: Callable[[T], R], items: Sequence[T], jobs: int) -> List[R]:
    """Apply ``func`` to every item, in worker processes when ``jobs > 1``; order is kept."""
    items = list(items)
    worker_count = max(1, min(jobs, len(items)))
    if worker_count == 1:
        return [func(item) for item in items]
    executor = ProcessPoolExecutor(max_workers=worker_count, mp_context=mp.get_context("spawn"))
    try:
        futures = [executor.submit(func, item) for item in items]
        return [future.result() for future in futures]
    finally:
        executor.shutdown()


def _statistics(values: Sequence[float]) -> Dict[str, Optional[float]]:
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        return {"mean": None, "median": None, "std": None, "min": None, "max": None}
    return {
        "mean": float(np.mean(values)),
        "median": float(np.median(values)),
        "std": float(np.std(values)),
        "min": float(np.min(values)),
        "max": float(np.max(values)),
    }


def _output_dir(run_config: RunConfig, out_dir: Optional[Union[str, Path]]) -> Path:
    path = Path(out_dir if out_dir is not None else run_config.output_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


@dataclass
class TuneSummary:
    """Result of a tuning run and the files it produced."""

    out_dir: Path
    policy: Policy
    pointwise: Policy
    dataset_size: int
    failed_evaluations: int
    hyperparams: Dict[str, Dict[str, Any]]
    config: TuningConfig
    preset: str

    def to_dict(self) -> Dict[str, Any]:
        """Contents of ``summary.json``; nothing here depends on wall-clock time."""
        lower, upper = self.config.bounds
        feasibility = self.policy.feasibility
        return {
            "delta": self.config.delta,
            "gamma": self.policy.gamma,
            "budget": self.config.budget,
            "seed": self.config.seed,
            "preset": self.preset,
            "g_max": self.config.g_max,
            "dataset_size": self.dataset_size,
            "failed_evaluations": self.failed_evaluations,
            "grid": self.policy.grid,
            "max_second_difference": self.policy.max_second_difference(upper - lower),
            "min_feasibility": None if feasibility is None else float(np.min(feasibility)),
            "hyperparams": self.hyperparams,
        }


def tune(run_config: RunConfig, out_dir: Optional[Union[str, Path]] = None, resume: bool = False) -> TuneSummary:
    """
    Run the tuning loop on simulated episodes and smooth the final policy.

    Writes ``dataset.csv`` (checkpointed after every evaluation), ``run_log.jsonl``,
    ``policy_unsmoothed.csv``, ``policy.csv`` and ``summary.json``.

    Args:
        run_config: Loaded configuration.
        out_dir: Output directory; defaults to ``run_config.output_dir``.
        resume: Continue from an existing ``dataset.csv`` in the output directory.

    Raises:
        TuningAbortedError: after two consecutive failed evaluations.
        InfeasibleContextError: if a grid context has no feasible parameter.
    """
    config = run_config.tuning
    out = _output_dir(run_config, out_dir)
    dataset_path = out / "dataset.csv"
    log_path = out / "run_log.jsonl"

    resume_from = None
    if resume and dataset_path.exists():
        resume_from = load_dataset(dataset_path, (config.theta_min, config.theta_max), config.context_bounds)
        logger.info("resuming from %s with %d evaluations", dataset_path, len(resume_from))
    elif resume:
        logger.warning("nothing to resume in %s; starting a fresh run", out)
    if resume_from is None:
        for stale in (dataset_path, log_path):
            stale.unlink(missing_ok=True)

    try:
        context_source = get_context_source(
            run_config.contexts.mode,
            config.context_bounds,
            config.seed,
            run_config.contexts.replay_file or None,
        )
    except ValueError as e:
        raise ConfigError(str(e)) from e
    evaluator = tuner.EpisodeEvaluator(run_config.episode, run_config.episode_environment())
    result = tuner.run(
        config,
        context_source,
        evaluator,
        run_log=JSONLSink(log_path),
        resume_from=resume_from,
        checkpoint=lambda dataset: write_dataset_csv(dataset, dataset_path),
    )
    write_dataset_csv(result.dataset, dataset_path)
    logger.info(
        "tuning finished: %d evaluations, %d failed, %.1f s", len(result.dataset), result.failed_evaluations,
        result.wall_time,
    )

    grid = context_grid(config)
    pointwise = pointwise_policy(result.gp_objective, result.gp_constraint, config, grid)
    write_policy_csv(pointwise, out / "policy_unsmoothed.csv")
    policy = smooth(result.gp_objective, result.gp_constraint, config, grid=grid, pointwise=pointwise)
    write_policy_csv(policy, out / "policy.csv")
    logger.info("smoothed policy with gamma=%g", policy.gamma)

    summary = TuneSummary(
        out_dir=out,
        policy=policy,
        pointwise=pointwise,
        dataset_size=len(result.dataset),
        failed_evaluations=result.failed_evaluations,
        hyperparams={
            "objective": result.gp_objective.hyperparams.to_dict(),
            "constraint": result.gp_constraint.hyperparams.to_dict(),
        },
        config=config,
        preset=run_config.preset,
    )
    write_json(summary.to_dict(), out / "summary.json")
    return summary


@dataclass
class _EpisodeTask:
    theta: np.ndarray
    s: float
    seed: int
    spec: EpisodeSpec
    environment: EpisodeEnvironment
    mismatch: Optional[MismatchSample] = None
    disturbance: Optional[DisturbanceTrajectory] = None


def _run_task(task: _EpisodeTask) -> EpisodeOutcome:
    return run_episode(task.theta, task.s, task.spec, task.seed, task.environment, task.mismatch, task.disturbance)


@dataclass
class ValidationReport:
    """Monte Carlo robustness check of a policy on fresh episodes."""

    n_episodes: int
    g_max: float
    contexts: np.ndarray
    thetas: np.ndarray
    seeds: List[int]
    outcomes: List[EpisodeOutcome] = field(default_factory=list)

    @property
    def completed(self) -> List[EpisodeOutcome]:
        return [o for o in self.outcomes if not o.failed]

    @property
    def n_failed(self) -> int:
        return len(self.outcomes) - len(self.completed)

    @property
    def satisfaction_rate(self) -> Optional[float]:
        """Share of completed episodes with overshoot <= g_max."""
        completed = self.completed
        if not completed:
            return None
        return float(np.mean([o.g_value <= self.g_max for o in completed]))

    def to_dict(self) -> Dict[str, Any]:
        completed = self.completed
        return {
            "n_episodes": self.n_episodes,
            "n_failed": self.n_failed,
            "g_max": self.g_max,
            "satisfaction_rate": self.satisfaction_rate,
            "settling_time": _statistics([o.j_value for o in completed]),
            "overshoot": _statistics([o.g_value for o in completed]),
            "failures": [
                {"index": i, "s": o.context, "reason": o.failure_reason}
                for i, o in enumerate(self.outcomes)
                if o.failed
            ],
        }

    def rows(self) -> List[List[Any]]:
        result = []
        for index, (s, theta, seed, outcome) in enumerate(zip(self.contexts, self.thetas, self.seeds, self.outcomes)):
            result.append(
                [index, float(s)] + [float(v) for v in theta]
                + [seed, outcome.j_value, outcome.g_value, int(outcome.g_value <= self.g_max), int(outcome.failed)]
            )
        return result


def validate_policy(
    policy: Policy,
    run_config: RunConfig,
    n_episodes: Optional[int] = None,
    seed: Optional[int] = None,
    jobs: Optional[int] = None,
    out_dir: Optional[Union[str, Path]] = None,
) -> ValidationReport:
    """
    Run fresh episodes at random contexts with the policy's interpolated parameters.

    Every episode draws a new model-plant mismatch and disturbance. Failed episodes
    are counted in the report, never dropped.

    Args:
        policy: Policy to validate.
        run_config: Loaded configuration (episode, plant, g_max).
        n_episodes: Number of episodes; defaults to ``[validate] n_episodes``.
        seed: Root seed; defaults to ``[tuning] seed``.
        jobs: Worker processes; defaults to ``[validate] jobs``.
        out_dir: Writes ``validation.json`` and ``validation_episodes.csv`` when given.
    """
    n_episodes = run_config.n_episodes if n_episodes is None else n_episodes
    seed = run_config.tuning.seed if seed is None else seed
    jobs = run_config.jobs if jobs is None else jobs
    if n_episodes < 0:
        raise ConfigError(f"n_episodes must be >= 0, got {n_episodes}")

    low, high = float(policy.grid[0]), float(policy.grid[-1])
    contexts = np.array([substream(seed, "validate", i).uniform(low, high) for i in range(n_episodes)])
    thetas = np.array([query(policy, s) for s in contexts]).reshape(n_episodes, policy.params.shape[1])
    seeds = [derive_seed(seed, "validate", i, "episode") for i in range(n_episodes)]

    environment = run_config.episode_environment() if n_episodes else None
    tasks = [
        _EpisodeTask(theta, float(s), episode_seed, run_config.episode, environment)
        for theta, s, episode_seed in zip(thetas, contexts, seeds)
    ]
    outcomes = _map(_run_task, tasks, jobs)
    report = ValidationReport(n_episodes, run_config.tuning.g_max, contexts, thetas, seeds, outcomes)
    if report.n_failed:
        logger.warning("%d of %d validation episodes failed", report.n_failed, n_episodes)

    if out_dir is not None:
        out = _output_dir(run_config, out_dir)
        write_json(report.to_dict(), out / "validation.json")
        header = (
            ["index", "s"] + [f"theta_{name}" for name in policy.param_names]
            + ["seed", "j", "g", "satisfied", "failed"]
        )
        write_table_csv(out / "validation_episodes.csv", header, report.rows())
    return report


@dataclass
class ComparisonRow:
    """One nominal episode of the comparison."""

    s: float
    variant: str
    theta: np.ndarray
    outcome: EpisodeOutcome
    g_max: float

    @property
    def violated(self) -> bool:
        return self.outcome.failed or self.outcome.g_value > self.g_max


@dataclass
class ComparisonReport:
    """Constant versus context-dependent parameters on the nominal plant."""

    constant_theta: np.ndarray
    rows: List[ComparisonRow]

    @property
    def flagged(self) -> List[ComparisonRow]:
        """Rows whose overshoot exceeds g_max (or that failed)."""
        return [row for row in self.rows if row.violated]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "constant_theta": self.constant_theta,
            "episodes": [
                {
                    "s": row.s,
                    "variant": row.variant,
                    "theta": row.theta,
                    "violated": row.violated,
                    **row.outcome.to_dict(),
                }
                for row in self.rows
            ],
            "flagged": [{"s": row.s, "variant": row.variant} for row in self.flagged],
        }


def compare_policies(
    policy: Policy,
    constant_theta: Optional[Sequence[float]],
    contexts: Sequence[float],
    run_config: RunConfig,
    out_dir: Optional[Union[str, Path]] = None,
) -> ComparisonReport:
    """
    Run one nominal-plant episode per context with a constant parameter vector and
    with the policy's parameters.

    The plant has no mismatch and the disturbance is ``[compare] disturbance`` held
    constant, so the two variants differ only in their parameters.

    Args:
        policy: Context-dependent policy.
        constant_theta: Fixed parameters; the policy's value at the first context when empty.
        contexts: Mass flows to compare at; must lie inside the context bounds.
        run_config: Loaded configuration.
        out_dir: Writes ``comparison.json``, ``comparison.csv`` and trajectory dumps when given.
    """
    contexts = [float(s) for s in contexts]
    if not contexts:
        raise ConfigError("compare needs at least one context")
    s_min, s_max = run_config.tuning.context_bounds
    outside = [s for s in contexts if not s_min <= s <= s_max]
    if outside:
        raise ConfigError(f"contexts {outside} lie outside [{s_min}, {s_max}]")
    if constant_theta is None or len(constant_theta) == 0:
        constant = query(policy, contexts[0])
    else:
        constant = np.asarray(constant_theta, dtype=float)
        if constant.size != policy.params.shape[1]:
            raise ConfigError(f"constant theta needs {policy.params.shape[1]} entries, got {constant.size}")

    environment = run_config.episode_environment()
    disturbance = DisturbanceTrajectory.constant(*run_config.compare.disturbance, name="compare")
    mismatch = MismatchSample.nominal()
    variants = []
    for s in contexts:
        variants.append((s, "constant", constant))
        variants.append((s, "contextual", query(policy, s)))
    tasks = [
        _EpisodeTask(theta, s, run_config.tuning.seed, run_config.episode, environment, mismatch, disturbance)
        for s, _, theta in variants
    ]
    outcomes = _map(_run_task, tasks, run_config.jobs)
    g_max = run_config.tuning.g_max
    rows = [ComparisonRow(s, name, theta, outcome, g_max) for (s, name, theta), outcome in zip(variants, outcomes)]
    report = ComparisonReport(constant, rows)
    for row in report.flagged:
        logger.warning("compare: %s parameters exceed g_max=%g at s=%g", row.variant, g_max, row.s)

    if out_dir is not None:
        out = _output_dir(run_config, out_dir)
        write_json(report.to_dict(), out / "comparison.json")
        n_steps = len(run_config.episode.steps)
        header = (
            ["s", "variant"] + [f"theta_{name}" for name in policy.param_names] + ["j", "g", "violated"]
            + [f"t_s_zone{zone + 1}_step{step + 1}" for zone in run_config.episode.tracked_zones for step in range(n_steps)]
        )
        table = [
            [row.s, row.variant] + [float(v) for v in row.theta]
            + [row.outcome.j_value, row.outcome.g_value, int(row.violated)]
            + [float(v) for v in np.asarray(row.outcome.settling_times).reshape(-1)]
            for row in rows
        ]
        write_table_csv(out / "comparison.csv", header, table)
        if run_config.dump_trajectories:
            trajectories = out / "trajectories"
            trajectories.mkdir(exist_ok=True)
            for row in rows:
                write_trajectory_csv(row.outcome, trajectories / f"{row.variant}_s{row.s:g}.csv")
    return report


def bench_tuning_config(problem: SyntheticProblem, run_config: RunConfig, seed: int = 0) -> TuningConfig:
    """Tuning settings for a synthetic problem: its boxes, the bench budget and the run's delta."""
    return replace(
        run_config.tuning,
        theta_min=problem.theta_min,
        theta_max=problem.theta_max,
        s_min=problem.s_min,
        s_max=problem.s_max,
        g_max=problem.g_max,
        budget=run_config.bench.budget,
        seed=seed,
        param_names=tuple(f"theta{i + 1}" for i in range(problem.dim)),
    )


def golden_file(problem: SyntheticProblem, run_config: RunConfig) -> Path:
    """Golden file location; the name pins delta and grid size."""
    config = run_config.tuning
    return run_config.bench.golden_path() / f"{problem.name}_delta{config.delta:g}_n{config.n_grid}.csv"


def write_oracle(problem_name: str, run_config: RunConfig, path: Optional[Union[str, Path]] = None) -> Path:
    """
    Compute the grid oracle of a bundled problem and write it as a golden file.

    Raises:
        ConfigError: for unknown problems.
    """
    problem = get_problem(problem_name)
    config = bench_tuning_config(problem, run_config)
    path = Path(path) if path is not None else golden_file(problem, run_config)
    path.parent.mkdir(parents=True, exist_ok=True)
    table = oracle_table(problem, config.delta, context_grid(config))
    write_oracle_csv(table, path)
    logger.info("wrote oracle for %s (%d contexts, %d infeasible) to %s",
                problem.name, len(table), int(np.sum(~table.feasible)), path)
    return path


def _golden_table(problem: SyntheticProblem, run_config: RunConfig) -> OracleTable:
    """
    Load the golden oracle matching the problem, delta and grid size.

    Raises:
        ConfigError: if no golden file exists for this combination.
    """
    path = golden_file(problem, run_config)
    if not path.exists():
        raise ConfigError(
            f"no golden file {path} for {problem.name} at delta={run_config.tuning.delta:g}, "
            f"n_grid={run_config.tuning.n_grid}; create it with 'mpc-tune oracle {problem.name}'"
        )
    return load_oracle(path)


@dataclass
class _BenchTask:
    problem: SyntheticProblem
    config: TuningConfig
    table: OracleTable


@dataclass
class BenchSeedResult:
    """Scores of one seeded tuning run on a synthetic problem."""

    seed: int
    suboptimality: float
    worst_context_suboptimality: float
    violations: int
    max_second_difference: float
    max_jump_unsmoothed: float
    gamma: float
    infeasible_context: Optional[float] = None


def _bench_seed(task: _BenchTask) -> BenchSeedResult:
    config = task.config
    source = UniformContextSource(config.context_bounds, config.seed)
    result = tuner.run(config, source, tuner.ProblemEvaluator(task.problem))
    lower, upper = config.bounds
    grid = task.table.grid
    pointwise = pointwise_policy(result.gp_objective, result.gp_constraint, config, grid)
    try:
        policy = smooth(result.gp_objective, result.gp_constraint, config, grid=grid, pointwise=pointwise)
    except InfeasibleContextError as e:
        logger.warning("seed %d: smoothing infeasible at s=%g", config.seed, e.context)
        return BenchSeedResult(
            seed=config.seed, suboptimality=1.0, worst_context_suboptimality=1.0,
            violations=int(np.sum(task.table.feasible)), max_second_difference=float("inf"),
            max_jump_unsmoothed=pointwise.max_jump(upper - lower), gamma=float("nan"),
            infeasible_context=e.context,
        )
    gaps = suboptimality(task.problem, policy, task.table)
    return BenchSeedResult(
        seed=config.seed,
        suboptimality=float(np.mean(gaps)) if gaps.size else 0.0,
        worst_context_suboptimality=float(np.max(gaps)) if gaps.size else 0.0,
        violations=constraint_violations(task.problem, policy, task.table, config.delta),
        max_second_difference=policy.max_second_difference(upper - lower),
        max_jump_unsmoothed=pointwise.max_jump(upper - lower),
        gamma=policy.gamma,
    )


@dataclass
class BenchReport:
    """Acceptance report of a synthetic benchmark over several seeds."""

    problem: str
    delta: float
    budget: int
    acceptance: Sequence[str]
    results: List[BenchSeedResult]
    max_median_suboptimality: float
    max_worst_suboptimality: float
    max_violations: int
    max_curvature: float

    @property
    def median_suboptimality(self) -> float:
        return float(np.median([r.suboptimality for r in self.results]))

    @property
    def worst_suboptimality(self) -> float:
        return float(np.max([r.suboptimality for r in self.results]))

    @property
    def violations(self) -> int:
        return int(sum(r.violations for r in self.results))

    @property
    def failures(self) -> List[str]:
        """Reasons the benchmark misses its thresholds; empty when it passes."""
        reasons = [
            f"seed {r.seed}: no feasible policy at s={r.infeasible_context:g}"
            for r in self.results
            if r.infeasible_context is not None
        ]
        if "suboptimality" in self.acceptance:
            if self.median_suboptimality > self.max_median_suboptimality:
                reasons.append(
                    f"median suboptimality {self.median_suboptimality:.4f} > {self.max_median_suboptimality}"
                )
            if self.worst_suboptimality > self.max_worst_suboptimality:
                reasons.append(f"worst suboptimality {self.worst_suboptimality:.4f} > {self.max_worst_suboptimality}")
        if "violations" in self.acceptance and self.violations > self.max_violations:
            reasons.append(f"{self.violations} constraint violations > {self.max_violations}")
        if "curvature" in self.acceptance:
            reasons.extend(
                f"seed {r.seed}: max second difference {r.max_second_difference:.4f} > {self.max_curvature}"
                for r in self.results
                if r.infeasible_context is None and r.max_second_difference > self.max_curvature
            )
        return reasons

    @property
    def passed(self) -> bool:
        return not self.failures

    def to_dict(self) -> Dict[str, Any]:
        return {
            "problem": self.problem,
            "delta": self.delta,
            "budget": self.budget,
            "seeds": [r.seed for r in self.results],
            "median_suboptimality": self.median_suboptimality,
            "worst_suboptimality": self.worst_suboptimality,
            "violations": self.violations,
            "max_second_difference": max(r.max_second_difference for r in self.results),
            "passed": self.passed,
            "failures": self.failures,
        }


def run_bench(
    problem_name: str,
    run_config: RunConfig,
    seeds: Optional[int] = None,
    jobs: Optional[int] = None,
    out_dir: Optional[Union[str, Path]] = None,
) -> BenchReport:
    """
    Tune and smooth a synthetic problem with several seeds and score the policies
    against the golden grid oracle.

    Seed k uses ``[tuning] seed + k``. The golden file for the configured delta and
    grid size must exist; "mpc-tune oracle" writes it.

    Raises:
        ConfigError: for unknown problems, or when the golden file is missing.
    """
    problem = get_problem(problem_name)
    seeds = run_config.bench.seeds if seeds is None else seeds
    jobs = run_config.jobs if jobs is None else jobs
    if seeds < 1:
        raise ConfigError(f"seeds must be >= 1, got {seeds}")
    table = _golden_table(problem, run_config)
    tasks = [
        _BenchTask(problem, bench_tuning_config(problem, run_config, run_config.tuning.seed + k), table)
        for k in range(seeds)
    ]
    results = _map(_bench_seed, tasks, jobs)
    bench = run_config.bench
    report = BenchReport(
        problem=problem.name,
        delta=run_config.tuning.delta,
        budget=bench.budget,
        acceptance=problem.acceptance,
        results=results,
        max_median_suboptimality=bench.max_median_suboptimality,
        max_worst_suboptimality=bench.max_worst_suboptimality,
        max_violations=bench.max_violations,
        max_curvature=run_config.tuning.max_curvature,
    )
    if out_dir is not None:
        out = _output_dir(run_config, out_dir)
        write_json(report.to_dict(), out / "bench.json")
        header = [
            "seed", "suboptimality", "worst_context_suboptimality", "violations",
            "max_second_difference", "max_jump_unsmoothed", "gamma",
        ]
        write_table_csv(
            out / "bench_seeds.csv",
            header,
            [
                [r.seed, r.suboptimality, r.worst_context_suboptimality, r.violations,
                 r.max_second_difference, r.max_jump_unsmoothed, r.gamma]
                for r in results
            ],
        )
    return report
