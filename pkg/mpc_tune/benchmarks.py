"""
Synthetic contextual constrained problems with exact grid oracles.

Every problem has a 2-D parameter box and a scalar context, like the MPC tuning
problem, so that the tuner can be scored against a brute-force optimum.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import norm

from mpc_tune.errors import ConfigError
from mpc_tune.models import OracleTable, Policy

logger = logging.getLogger(__name__)

# (thetas (m, d), contexts (m,)) -> values (m,)
ClosedForm = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class SyntheticProblem:
    """Closed-form objective and constraint with additive Gaussian observation noise."""

    name: str
    objective: ClosedForm
    constraint: ClosedForm
    objective_noise: float = 0.0
    constraint_noise: float = 0.0
    g_max: float = 0.0
    theta_min: Tuple[float, ...] = (0.0, 0.0)
    theta_max: Tuple[float, ...] = (1.0, 1.0)
    s_min: float = 0.0
    s_max: float = 1.0
    oracle_resolution: int = 400
    acceptance: Tuple[str, ...] = ("suboptimality", "violations")
    description: str = ""

    def __post_init__(self):
        if self.objective_noise < 0 or self.constraint_noise < 0:
            raise ValueError(f"{self.name}: noise levels must be non-negative")
        if any(lo >= hi for lo, hi in zip(self.theta_min, self.theta_max)) or self.s_min >= self.s_max:
            raise ValueError(f"{self.name}: invalid boxes")
        if self.oracle_resolution < 2:
            raise ValueError(f"{self.name}: oracle_resolution must be >= 2")

    @property
    def dim(self) -> int:
        return len(self.theta_min)

    def true_values(self, thetas: np.ndarray, contexts: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Noise-free (j, g) for batches of parameters and contexts."""
        thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
        contexts = np.broadcast_to(np.asarray(contexts, dtype=float), (thetas.shape[0],))
        return self.objective(thetas, contexts), self.constraint(thetas, contexts)

    def theta_grid(self, resolution: Optional[int] = None) -> np.ndarray:
        """Full tensor grid over the parameter box, first dimension slowest."""
        resolution = resolution or self.oracle_resolution
        axes = [np.linspace(lo, hi, resolution) for lo, hi in zip(self.theta_min, self.theta_max)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.column_stack([m.reshape(-1) for m in mesh])


def _sin_ridge_objective(thetas: np.ndarray, s: np.ndarray) -> np.ndarray:
    a = 0.5 + 0.3 * np.sin(2.0 * np.pi * s)
    b = 0.3 + 0.4 * s
    return (thetas[:, 0] - a) ** 2 + 0.5 * (thetas[:, 1] - b) ** 2 + 0.1


def _sin_ridge_constraint(thetas: np.ndarray, s: np.ndarray) -> np.ndarray:
    return thetas[:, 0] + thetas[:, 1] - 1.0


_SWITCH_A = np.array([0.25, 0.25])
_SWITCH_B = np.array([0.75, 0.75])


def _switcher_objective(thetas: np.ndarray, s: np.ndarray) -> np.ndarray:
    to_a = np.sum((thetas - _SWITCH_A) ** 2, axis=1)
    to_b = np.sum((thetas - _SWITCH_B) ** 2, axis=1) + 0.02
    return np.minimum(to_a, to_b)


def _switcher_constraint(thetas: np.ndarray, s: np.ndarray) -> np.ndarray:
    return s - thetas[:, 0]


def _flat_valley_objective(thetas: np.ndarray, s: np.ndarray) -> np.ndarray:
    return 0.01 * (thetas[:, 0] - 0.5) ** 2


def _flat_valley_constraint(thetas: np.ndarray, s: np.ndarray) -> np.ndarray:
    return thetas[:, 1] - 0.9


_PROBLEM_REGISTRY: Dict[str, SyntheticProblem] = {
    "sin-ridge": SyntheticProblem(
        name="sin-ridge",
        objective=_sin_ridge_objective,
        constraint=_sin_ridge_constraint,
        objective_noise=0.01,
        constraint_noise=0.02,
        description="smooth optimum drifting across the box, half-plane constraint active for part of the contexts",
    ),
    "switcher": SyntheticProblem(
        name="switcher",
        objective=_switcher_objective,
        constraint=_switcher_constraint,
        objective_noise=0.01,
        constraint_noise=0.01,
        acceptance=("curvature", "violations"),
        description="two basins; the constraint forces the optimum to jump between them at a context threshold",
    ),
    "flat-valley": SyntheticProblem(
        name="flat-valley",
        objective=_flat_valley_objective,
        constraint=_flat_valley_constraint,
        objective_noise=0.001,
        constraint_noise=0.01,
        acceptance=("violations",),
        description="objective independent of theta2 and nearly flat in theta1",
    ),
}


def register_problem(problem: SyntheticProblem) -> None:
    """Register a synthetic problem under its name."""
    _PROBLEM_REGISTRY[problem.name] = problem


def available_problems() -> Sequence[str]:
    return sorted(_PROBLEM_REGISTRY)


def get_problem(name: str) -> SyntheticProblem:
    """
    Get a bundled or registered problem by name.

    Raises:
        ConfigError: for unknown names.
    """
    try:
        return _PROBLEM_REGISTRY[name]
    except KeyError:
        raise ConfigError(
            f"Unknown problem '{name}'. Available: {', '.join(available_problems())}"
        ) from None


def evaluate(problem: SyntheticProblem, theta: Sequence[float], s: float, seed: int) -> Tuple[float, float]:
    """Closed form plus seeded Gaussian noise; same call shape as an episode."""
    j_true, g_true = problem.true_values(np.asarray(theta, dtype=float).reshape(1, -1), np.asarray([s]))
    rng = np.random.default_rng(seed)
    noise_j, noise_g = rng.standard_normal(2)
    return (
        float(j_true[0] + problem.objective_noise * noise_j),
        float(g_true[0] + problem.constraint_noise * noise_g),
    )


def feasibility_exact(problem: SyntheticProblem, g_true: np.ndarray, g_max: Optional[float] = None) -> np.ndarray:
    """P(g + noise <= g_max) from the known noise model."""
    g_max = problem.g_max if g_max is None else g_max
    g_true = np.asarray(g_true, dtype=float)
    if problem.constraint_noise == 0:
        return (g_true <= g_max).astype(float)
    return norm.cdf((g_max - g_true) / problem.constraint_noise)


def oracle_table(
    problem: SyntheticProblem,
    delta: float,
    grid: Sequence[float],
    g_max: Optional[float] = None,
    resolution: Optional[int] = None,
) -> OracleTable:
    """
    Exhaustive grid search for the true constrained optimum at each context.

    Ties resolve to the lowest grid index. Contexts with no feasible grid point are
    flagged and carry the most feasible parameter instead.
    """
    thetas = problem.theta_grid(resolution)
    params, values, feasible = [], [], []
    for s in np.asarray(grid, dtype=float):
        j_true, g_true = problem.true_values(thetas, np.full(thetas.shape[0], s))
        probability = feasibility_exact(problem, g_true, g_max)
        ok = probability >= delta
        if np.any(ok):
            index = int(np.argmin(np.where(ok, j_true, np.inf)))
            feasible.append(True)
        else:
            index = int(np.argmax(probability))
            feasible.append(False)
            logger.info("%s: no feasible parameter at s=%g (max probability %.3g)", problem.name, s, probability[index])
        params.append(thetas[index])
        values.append(j_true[index])
    return OracleTable(grid=np.asarray(grid, dtype=float), params=np.asarray(params), values=values, feasible=feasible)


def oracle_policy(
    problem: SyntheticProblem,
    delta: float,
    grid: Sequence[float],
    g_max: Optional[float] = None,
    resolution: Optional[int] = None,
) -> Policy:
    """The oracle optimum as an unsmoothed policy; feasibility column holds the 0/1 flag."""
    table = oracle_table(problem, delta, grid, g_max, resolution)
    return Policy(
        grid=table.grid,
        params=table.params,
        delta=delta,
        gamma=0.0,
        feasibility=table.feasible.astype(float),
        param_names=tuple(f"theta{i + 1}" for i in range(problem.dim)),
    )


def suboptimality(
    problem: SyntheticProblem,
    policy: Policy,
    table: OracleTable,
    resolution: Optional[int] = None,
) -> np.ndarray:
    """
    (j(policy(s)) - j*(s)) / (j_max(s) - j*(s)) at every oracle-feasible grid context.

    j_max is the largest true objective over the parameter grid at that context.
    """
    thetas = problem.theta_grid(resolution)
    result = []
    for s, j_star, ok in zip(table.grid, table.values, table.feasible):
        if not ok:
            continue
        theta = np.array([np.interp(s, policy.grid, policy.params[:, i]) for i in range(policy.params.shape[1])])
        j_policy = problem.true_values(theta.reshape(1, -1), np.array([s]))[0][0]
        j_max = float(np.max(problem.true_values(thetas, np.full(thetas.shape[0], s))[0]))
        span = j_max - j_star
        result.append(0.0 if span <= 0 else max(0.0, (j_policy - j_star) / span))
    return np.asarray(result)


def constraint_violations(
    problem: SyntheticProblem, policy: Policy, table: OracleTable, delta: float, g_max: Optional[float] = None
) -> int:
    """Number of oracle-feasible grid contexts where the policy misses the true probabilistic constraint."""
    count = 0
    for s, ok in zip(table.grid, table.feasible):
        if not ok:
            continue
        theta = np.array([np.interp(s, policy.grid, policy.params[:, i]) for i in range(policy.params.shape[1])])
        g_true = problem.true_values(theta.reshape(1, -1), np.array([s]))[1]
        if feasibility_exact(problem, g_true, g_max)[0] < delta:
            count += 1
    return count
