"""Tests for the contextual tuning loop."""

from typing import List

import numpy as np
import pytest

from mpc_tune.benchmarks import get_problem
from mpc_tune.contexts import ReplayContextSource, UniformContextSource
from mpc_tune.errors import EpisodeFailedError, TuningAbortedError
from mpc_tune.models import AcquisitionConfig, Dataset, HyperPrior, TuningConfig
from mpc_tune.sinks import ListSink
from mpc_tune.tuner import ProblemEvaluator, incumbent, initial_design, run

PROBLEM = get_problem("sin-ridge")


def _config(budget: int = 8, **overrides) -> TuningConfig:
    values = dict(
        theta_min=(0.0, 0.0), theta_max=(1.0, 1.0), s_min=0.0, s_max=1.0,
        g_max=0.0, delta=0.9, budget=budget, n_initial=5, n_grid=5, seed=1,
        acquisition=AcquisitionConfig(
            n_min_value_samples=5, n_random_candidates=200, n_local_refinements=1, n_gumbel_candidates=64
        ),
        gp=HyperPrior(n_restarts=2),
    )
    values.update(overrides)
    return TuningConfig(**values)


def _source(config: TuningConfig) -> UniformContextSource:
    return UniformContextSource(config.context_bounds, config.seed)


class FlakyEvaluator:
    """Fails on the listed call numbers, otherwise evaluates the problem."""

    def __init__(self, failing_calls: List[int]):
        self.failing_calls = set(failing_calls)
        self.calls = 0
        self.inner = ProblemEvaluator(PROBLEM)

    def __call__(self, theta, s, seed):
        call = self.calls
        self.calls += 1
        if call in self.failing_calls:
            raise EpisodeFailedError("simulated solver breakdown")
        return self.inner(theta, s, seed)


def test_initial_design_is_space_filling() -> None:
    """Test that the initial design has one point per stratum in every dimension."""
    config = _config()

    dataset = initial_design(config, _source(config), ProblemEvaluator(PROBLEM))

    assert len(dataset) == config.n_initial
    params = np.asarray(dataset.params)
    for dim in range(2):
        strata = np.sort(np.floor(params[:, dim] * config.n_initial).astype(int))
        assert list(strata) == list(range(config.n_initial)), "Latin hypercube strata should be covered once"


def test_replayed_contexts_used_verbatim() -> None:
    """Test that every evaluation uses the received context."""
    config = _config(budget=7)
    values = [0.1, 0.9, 0.5, 0.25, 0.75, 0.0, 1.0]

    result = run(config, ReplayContextSource(values, config.context_bounds), ProblemEvaluator(PROBLEM))

    assert result.dataset.contexts == values


def test_run_is_deterministic() -> None:
    """Test that the same seed reproduces the same dataset."""
    config = _config()

    first = run(config, _source(config), ProblemEvaluator(PROBLEM))
    second = run(config, _source(config), ProblemEvaluator(PROBLEM))

    assert first.dataset.params == second.dataset.params
    assert first.dataset.objectives == second.dataset.objectives
    assert first.gp_objective.hyperparams == second.gp_objective.hyperparams


def test_budget_equal_to_initial_design() -> None:
    """Test that a budget of n_initial runs no acquisition step."""
    config = _config(budget=5)
    sink = ListSink()

    result = run(config, _source(config), ProblemEvaluator(PROBLEM), run_log=sink)

    assert len(result.dataset) == 5
    assert all(record["phase"] == "initial" for record in sink.get_records())


def test_run_log_and_checkpoints() -> None:
    """Test one log record and one checkpoint per evaluation."""
    config = _config()
    sink = ListSink()
    sizes: List[int] = []

    result = run(config, _source(config), ProblemEvaluator(PROBLEM), run_log=sink, checkpoint=lambda d: sizes.append(len(d)))

    records = sink.get_records()
    assert len(result.dataset) == config.budget
    assert len(records) == config.budget
    assert sizes == list(range(1, config.budget + 1))
    assert [r["iteration"] for r in records] == list(range(config.budget))
    acquisition = [r for r in records if r["phase"] == "acquisition"]
    assert len(acquisition) == config.budget - config.n_initial
    assert all(r["status"] == "ok" and r["acquisition"] >= 0.0 for r in acquisition)
    assert result.failed_evaluations == 0


def test_resume_continues_like_uninterrupted_run() -> None:
    """Test that resuming from a partial dataset reproduces the full run."""
    full = run(_config(budget=8), _source(_config()), ProblemEvaluator(PROBLEM))
    partial = run(_config(budget=6), _source(_config()), ProblemEvaluator(PROBLEM))

    resumed = run(_config(budget=8), _source(_config()), ProblemEvaluator(PROBLEM), resume_from=partial.dataset)

    assert resumed.dataset.params == full.dataset.params
    assert resumed.dataset.contexts == full.dataset.contexts
    assert len(partial.dataset) == 6, "The resumed dataset must not be modified"


def test_resume_larger_than_budget_rejected() -> None:
    """Test that a dataset beyond the budget cannot be resumed."""
    partial = run(_config(budget=6), _source(_config()), ProblemEvaluator(PROBLEM))

    with pytest.raises(ValueError, match="more than the budget"):
        run(_config(budget=5), _source(_config()), ProblemEvaluator(PROBLEM), resume_from=partial.dataset)


def test_single_failure_is_retried() -> None:
    """Test that one failed evaluation is logged and retried."""
    config = _config(budget=6)
    sink = ListSink()

    result = run(config, _source(config), FlakyEvaluator([0, 6]), run_log=sink)

    assert len(result.dataset) == 6
    assert result.failed_evaluations == 2
    failed = [r for r in sink.get_records() if r["status"] == "failed"]
    assert [r["iteration"] for r in failed] == [0, 5]
    assert all("solver breakdown" in r["reason"] for r in failed)


def test_consecutive_failures_abort() -> None:
    """Test that two failures in a row stop the run."""
    config = _config()

    with pytest.raises(TuningAbortedError, match="failed 2 times"):
        run(config, _source(config), FlakyEvaluator([2, 3]))


def test_non_finite_result_counts_as_failure() -> None:
    """Test that NaN metrics are treated like a failed episode."""
    config = _config()

    with pytest.raises(TuningAbortedError, match="non-finite"):
        run(config, _source(config), lambda theta, s, seed: (float("nan"), 0.0))


def test_incumbent_prefers_feasible_minimum(stub_surrogate) -> None:
    """Test the incumbent among evaluated parameters."""
    dataset = Dataset(params=[(0.1, 0.9), (0.3, 0.2), (0.6, 0.1)], objectives=[0, 0, 0], constraints=[0, 0, 0], contexts=[0.5] * 3)
    gp_j = stub_surrogate(lambda p: p[:, 0])
    gp_g = stub_surrogate(lambda p: p[:, 1] - 0.5)

    best = incumbent(dataset, gp_j, gp_g, 0.5, 0.9, 0.0)

    assert best.feasible
    assert np.allclose(best.theta, [0.3, 0.2])
    assert best.mean == pytest.approx(0.3)


def test_incumbent_without_feasible_point(stub_surrogate) -> None:
    """Test that the most feasible evaluated point is reported when none is feasible."""
    dataset = Dataset(params=[(0.1, 0.9), (0.3, 0.2), (0.6, 0.1)], objectives=[0, 0, 0], constraints=[0, 0, 0], contexts=[0.5] * 3)
    gp_j = stub_surrogate(lambda p: p[:, 0])
    gp_g = stub_surrogate(lambda p: 1.0 + p[:, 1], lambda p: np.ones(len(p)))

    best = incumbent(dataset, gp_j, gp_g, 0.5, 0.9, 0.0)

    assert not best.feasible
    assert np.allclose(best.theta, [0.6, 0.1])
    with pytest.raises(ValueError, match="non-empty"):
        incumbent(Dataset(), gp_j, gp_g, 0.5, 0.9, 0.0)
