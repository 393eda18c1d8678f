"""
Constrained contextual Bayesian optimization loop.

Per iteration: refit both surrogates on all evaluations so far, receive the next
context, maximize the constrained max-value entropy search score at that context,
evaluate the black box and append the result.
"""

import logging
import time
from dataclasses import dataclass
from typing import Callable, Optional, Protocol, Sequence, Tuple

import numpy as np
from scipy.stats import qmc

from mpc_tune import gp
from mpc_tune.acquisition import cmes_score, feasibility_probability, optimize_acquisition, sample_min_values, with_context
from mpc_tune.benchmarks import SyntheticProblem, evaluate
from mpc_tune.contexts import ContextSource
from mpc_tune.episode import EpisodeEnvironment, run_episode
from mpc_tune.errors import EpisodeFailedError, IllConditionedKernelError, TuningAbortedError
from mpc_tune.models import Dataset, EpisodeSpec, TuningConfig
from mpc_tune.seeding import derive_seed, substream
from mpc_tune.sinks import Sink

logger = logging.getLogger(__name__)

MAX_ATTEMPTS = 2


class Evaluator(Protocol):
    """Black box mapping (theta, s, seed) to a noisy (objective, constraint) pair."""

    def __call__(self, theta: Sequence[float], s: float, seed: int) -> Tuple[float, float]:
        """
        Evaluate the black box once.

        Raises:
            EpisodeFailedError: if the evaluation produced no usable result.
        """
        ...


class EpisodeEvaluator:
    """Evaluates tuning parameters with a simulated closed-loop cabin episode."""

    def __init__(self, spec: Optional[EpisodeSpec] = None, environment: Optional[EpisodeEnvironment] = None):
        self.spec = spec or EpisodeSpec()
        self.environment = environment or EpisodeEnvironment()

    def __call__(self, theta: Sequence[float], s: float, seed: int) -> Tuple[float, float]:
        outcome = run_episode(theta, s, self.spec, seed, self.environment)
        if outcome.failed:
            raise EpisodeFailedError(outcome.failure_reason or "episode failed")
        return outcome.j_value, outcome.g_value


class ProblemEvaluator:
    """Evaluates a synthetic benchmark problem."""

    def __init__(self, problem: SyntheticProblem):
        self.problem = problem

    def __call__(self, theta: Sequence[float], s: float, seed: int) -> Tuple[float, float]:
        return evaluate(self.problem, theta, s, seed)


@dataclass
class Incumbent:
    """Best evaluated parameter at a context under the current surrogates."""

    theta: np.ndarray
    mean: float
    feasibility: float
    feasible: bool


@dataclass
class TuningResult:
    """Final data and surrogates of a tuning run."""

    dataset: Dataset
    gp_objective: gp.GpModel
    gp_constraint: gp.GpModel
    failed_evaluations: int = 0
    wall_time: float = 0.0


@dataclass
class _LoopState:
    failures: int = 0


def _design_points(config: TuningConfig) -> np.ndarray:
    """Latin hypercube over the parameter box; row k is the k-th initial point."""
    sampler = qmc.LatinHypercube(d=config.dim, seed=derive_seed(config.seed, "initial"))
    lower, upper = config.bounds
    return qmc.scale(sampler.random(config.n_initial), lower, upper)


def _evaluate_with_retry(
    evaluator: Evaluator,
    config: TuningConfig,
    index: int,
    theta: np.ndarray,
    s: float,
    state: _LoopState,
    run_log: Optional[Sink],
    record: dict,
    resample: Optional[Callable[[int], np.ndarray]] = None,
) -> Tuple[np.ndarray, float, float]:
    """Evaluate once, resample once on failure, abort after two consecutive failures."""
    reasons = []
    for attempt in range(MAX_ATTEMPTS):
        if attempt and resample is not None:
            theta = resample(attempt)
        seed = derive_seed(config.seed, "episode", index, attempt)
        started = time.perf_counter()
        try:
            j, g = evaluator(theta, s, seed)
            if not (np.isfinite(j) and np.isfinite(g)):
                raise EpisodeFailedError(f"non-finite result j={j}, g={g}")
        except EpisodeFailedError as e:
            state.failures += 1
            reasons.append(str(e))
            logger.warning("evaluation %d (attempt %d) failed at s=%g, theta=%s: %s", index, attempt + 1, s, theta, e)
            if run_log is not None:
                run_log.write([dict(record, theta=theta, s=s, seed=seed, status="failed", reason=str(e),
                                    wall_time=time.perf_counter() - started)])
            continue
        if run_log is not None:
            run_log.write([dict(record, theta=theta, s=s, seed=seed, j=j, g=g, status="ok",
                                wall_time=time.perf_counter() - started)])
        return theta, j, g
    raise TuningAbortedError(
        f"evaluation {index} failed {MAX_ATTEMPTS} times in a row at s={s:g}: {'; '.join(reasons)}"
    )


def initial_design(
    config: TuningConfig,
    context_source: ContextSource,
    evaluator: Evaluator,
    run_log: Optional[Sink] = None,
    dataset: Optional[Dataset] = None,
    checkpoint: Optional[Callable[[Dataset], None]] = None,
    state: Optional[_LoopState] = None,
) -> Dataset:
    """
    Evaluate ``config.n_initial`` space-filling parameter vectors at received contexts.

    A failed evaluation is retried once with a fresh uniform parameter vector; two
    consecutive failures abort the run.

    Args:
        config: Problem definition.
        context_source: Supplies the context of every evaluation.
        evaluator: Black box.
        run_log: Optional sink receiving one record per evaluation attempt.
        dataset: Partial dataset to continue (resume).
        checkpoint: Called with the dataset after every successful evaluation.
    """
    dataset = dataset if dataset is not None else config.empty_dataset()
    state = state if state is not None else _LoopState()
    points = _design_points(config)
    lower, upper = config.bounds
    for index in range(len(dataset), config.n_initial):
        s = context_source.receive_context(index)

        def resample(attempt: int, index: int = index) -> np.ndarray:
            return substream(config.seed, "initial", index, attempt).uniform(lower, upper)

        record = {"iteration": index, "phase": "initial", "acquisition": None}
        theta, j, g = _evaluate_with_retry(evaluator, config, index, points[index], s, state, run_log, record, resample)
        dataset.add(theta, s, j, g)
        if checkpoint is not None:
            checkpoint(dataset)
    return dataset


def _fit_pair(
    dataset: Dataset, config: TuningConfig, index: int, previous: Optional[Tuple[gp.GpModel, gp.GpModel]]
) -> Tuple[gp.GpModel, gp.GpModel]:
    models = []
    for slot, target in enumerate(("objective", "constraint")):
        seed = derive_seed(config.seed, "gp", index, target)
        try:
            models.append(gp.fit(dataset, target, config.gp, seed=seed))
        except (IllConditionedKernelError, np.linalg.LinAlgError) as e:
            if previous is None:
                raise
            logger.warning("GP refit of %s failed at iteration %d (%s); reusing previous hyperparameters", target, index, e)
            models.append(gp.fit(dataset, target, config.gp, hyperparams=previous[slot].hyperparams))
    return models[0], models[1]


def incumbent(
    dataset: Dataset,
    gp_j: gp.Surrogate,
    gp_g: gp.Surrogate,
    s: float,
    delta: float,
    g_max: float,
    spread: str = "combined",
) -> Incumbent:
    """
    Evaluated parameter with minimal predicted objective at context s among those
    whose predicted feasibility reaches delta.

    Without a feasible candidate the most feasible one is returned with ``feasible=False``.
    """
    if len(dataset) == 0:
        raise ValueError("incumbent needs a non-empty dataset")
    thetas = np.asarray(dataset.params, dtype=float)
    points = with_context(thetas, s)
    mean, _ = gp_j.predict_batch(points)
    probability = feasibility_probability(gp_g, points, g_max, spread)
    ok = probability >= delta
    if np.any(ok):
        index = int(np.argmin(np.where(ok, mean, np.inf)))
        return Incumbent(thetas[index], float(mean[index]), float(probability[index]), True)
    index = int(np.argmax(probability))
    logger.info("no feasible incumbent at s=%g; reporting the most feasible evaluated point", s)
    return Incumbent(thetas[index], float(mean[index]), float(probability[index]), False)


def run(
    config: TuningConfig,
    context_source: ContextSource,
    evaluator: Evaluator,
    run_log: Optional[Sink] = None,
    resume_from: Optional[Dataset] = None,
    checkpoint: Optional[Callable[[Dataset], None]] = None,
) -> TuningResult:
    """
    Run the loop until the dataset holds ``config.budget`` evaluations.

    Iteration k only uses the evaluations made before it. All randomness derives from
    ``config.seed`` and the evaluation index, so a resumed run continues exactly as an
    uninterrupted one would.

    Args:
        config: Problem definition and budget.
        context_source: Supplies the context of every evaluation.
        evaluator: Black box.
        run_log: Sink receiving one record per evaluation attempt.
        resume_from: Dataset of an interrupted run with the same configuration.
        checkpoint: Called with the dataset after every successful evaluation.

    Returns:
        TuningResult with the final dataset and surrogates fitted on it.
    """
    started = time.perf_counter()
    dataset = resume_from.copy() if resume_from is not None else config.empty_dataset()
    if len(dataset) > config.budget:
        raise ValueError(f"resumed dataset has {len(dataset)} rows, more than the budget {config.budget}")
    state = _LoopState()
    if len(dataset) < config.n_initial:
        before = len(dataset)
        dataset = initial_design(config, context_source, evaluator, run_log, dataset, checkpoint, state)
        logger.info("initial design: %d evaluations", len(dataset) - before)

    models: Optional[Tuple[gp.GpModel, gp.GpModel]] = None
    lower, upper = config.bounds
    while len(dataset) < config.budget:
        index = len(dataset)
        models = _fit_pair(dataset, config, index, models)
        gp_j, gp_g = models
        s = context_source.receive_context(index)
        rng = substream(config.seed, "acquisition", index)
        min_values = sample_min_values(
            gp_j, gp_g, s, config.acquisition, (lower, upper), config.g_max, rng, config.constraint_spread
        )
        theta = optimize_acquisition(
            gp_j, gp_g, s, (lower, upper), config.acquisition, config.g_max, rng, min_values, config.constraint_spread
        )
        score = cmes_score(theta, s, gp_j, gp_g, min_values, config.g_max, config.constraint_spread)
        record = {"iteration": index, "phase": "acquisition", "acquisition": score}
        theta, j, g = _evaluate_with_retry(evaluator, config, index, theta, s, state, run_log, record)
        dataset.add(theta, s, j, g)
        if checkpoint is not None:
            checkpoint(dataset)

        best = incumbent(dataset, gp_j, gp_g, s, config.delta, config.g_max, config.constraint_spread)
        logger.info(
            "iteration %d/%d s=%.4g theta=%s j=%.4g g=%.4g | incumbent theta=%s mu_J=%.4g p=%.3f%s",
            index + 1, config.budget, s, np.round(theta, 4), j, g,
            np.round(best.theta, 4), best.mean, best.feasibility, "" if best.feasible else " (infeasible)",
        )

    gp_j, gp_g = _fit_pair(dataset, config, len(dataset), models)
    return TuningResult(dataset, gp_j, gp_g, state.failures, time.perf_counter() - started)
