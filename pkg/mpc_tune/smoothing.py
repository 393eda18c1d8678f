"""
Smooth policy extraction from the final surrogates.

On a grid s_1..s_N the smoother minimizes

    sum_n mu_J(theta_n, s_n) + gamma * sum_n ||u_{n+2} - 2 u_{n+1} + u_n||^2

subject to the box and Phi((g_max - mu_g(theta_n, s_n)) / sigma) > delta at every n,
starting from the pointwise constrained optima.
u_n is theta_n rescaled to the unit box, so gamma does not depend on the parameter units.
"""

import logging
import warnings
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy import optimize
from scipy.stats import norm

from mpc_tune.acquisition import feasibility_probability, with_context
from mpc_tune.errors import InfeasibleContextError
from mpc_tune.gp import Surrogate
from mpc_tune.models import Policy, TuningConfig

logger = logging.getLogger(__name__)

POINTWISE_RESOLUTION = 41
GAMMA_CANDIDATES = (0.0,) + tuple(float(g) for g in np.logspace(-3, 6, 10))
_PROB_MARGIN = 1e-4
_Z_CLIP = 40.0
_FD_STEP = 1e-5
_PENALTY_SCHEDULE = (1e1, 1e2, 1e3, 1e4, 1e5, 1e6)
_REPAIR_ITERATIONS = 40


@dataclass
class PointwiseOptimum:
    """Constrained minimizer of the objective mean at one context."""

    s: float
    theta: np.ndarray
    objective: float
    probability: float
    feasible: bool


def _required_probability(delta: float) -> float:
    return min(delta + _PROB_MARGIN, 0.5 * (1.0 + delta))


def _accepted_probability(delta: float) -> float:
    """Lowest probability counted as feasible; solvers target the stricter required level."""
    return min(delta + 0.5 * _PROB_MARGIN, 0.5 * (1.0 + delta))


def _probit_margin(gp_g: Surrogate, points: np.ndarray, g_max: float, spread: str) -> np.ndarray:
    """(g_max - mu_g) / sigma, clipped to a finite range."""
    mean, std = gp_g.predict_batch(points)
    if spread == "combined":
        std = gp_g.predict_noisy_std_batch(points)
    std = np.maximum(std, 1e-12 * max(1.0, abs(g_max)))
    return np.clip((g_max - mean) / std, -_Z_CLIP, _Z_CLIP)


def _box_grid(lower: np.ndarray, upper: np.ndarray, resolution: int) -> np.ndarray:
    axes = [np.linspace(lo, hi, resolution) for lo, hi in zip(lower, upper)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.column_stack([m.reshape(-1) for m in mesh])


def pointwise_optimum(
    gp_j: Surrogate,
    gp_g: Surrogate,
    s: float,
    delta: float,
    g_max: float,
    bounds: Tuple[np.ndarray, np.ndarray],
    spread: str = "combined",
    resolution: int = POINTWISE_RESOLUTION,
) -> PointwiseOptimum:
    """
    Minimize mu_J(., s) subject to the probabilistic constraint.

    A dense grid search picks the best feasible candidate, which SLSQP then refines on
    the probit form of the constraint. Contexts without any feasible candidate are
    flagged and carry the most feasible candidate.
    """
    lower, upper = (np.asarray(b, dtype=float) for b in bounds)
    width = upper - lower
    required = _required_probability(delta)
    accepted = _accepted_probability(delta)
    candidates = _box_grid(lower, upper, resolution)
    points = with_context(candidates, s)
    mean, _ = gp_j.predict_batch(points)
    probability = feasibility_probability(gp_g, points, g_max, spread)
    ok = probability >= accepted
    if not np.any(ok):
        index = int(np.argmax(probability))
        logger.info("no feasible parameter at s=%g (max probability %.4f)", s, probability[index])
        return PointwiseOptimum(float(s), candidates[index], float(mean[index]), float(probability[index]), False)

    index = int(np.argmin(np.where(ok, mean, np.inf)))
    best_theta, best_mean = candidates[index], float(mean[index])

    def objective(u):
        return float(gp_j.predict_batch(with_context(lower + u * width, s))[0][0])

    u0 = (best_theta - lower) / width
    if np.isfinite(g_max):
        z_required = float(norm.ppf(required))
        constraints = [
            {
                "type": "ineq",
                "fun": lambda u: float(_probit_margin(gp_g, with_context(lower + u * width, s), g_max, spread)[0])
                - z_required,
            }
        ]
        result = optimize.minimize(
            objective, u0, method="SLSQP", bounds=[(0.0, 1.0)] * u0.size, constraints=constraints,
            options={"maxiter": 200, "ftol": 1e-12},
        )
    else:
        result = optimize.minimize(objective, u0, method="L-BFGS-B", bounds=[(0.0, 1.0)] * u0.size)

    refined = lower + np.clip(result.x, 0.0, 1.0) * width
    refined_point = with_context(refined, s)
    refined_mean = float(gp_j.predict_batch(refined_point)[0][0])
    refined_probability = float(feasibility_probability(gp_g, refined_point, g_max, spread)[0])
    if refined_probability >= accepted and refined_mean < best_mean:
        return PointwiseOptimum(float(s), refined, refined_mean, refined_probability, True)
    return PointwiseOptimum(float(s), best_theta, best_mean, float(probability[index]), True)


def context_grid(config: TuningConfig) -> np.ndarray:
    """N equally spaced contexts spanning [s_min, s_max]."""
    return np.linspace(config.s_min, config.s_max, config.n_grid)


def pointwise_policy(
    gp_j: Surrogate,
    gp_g: Surrogate,
    config: TuningConfig,
    grid: Optional[Sequence[float]] = None,
) -> Policy:
    """Unsmoothed policy of pointwise optima; infeasible contexts keep their flagged point."""
    grid = context_grid(config) if grid is None else np.asarray(grid, dtype=float)
    optima = [
        pointwise_optimum(gp_j, gp_g, s, config.delta, config.g_max, config.bounds, config.constraint_spread)
        for s in grid
    ]
    return Policy(
        grid=grid,
        params=np.vstack([o.theta for o in optima]),
        delta=config.delta,
        gamma=0.0,
        feasibility=np.array([o.probability for o in optima]),
        param_names=config.param_names,
    )


def _second_difference_matrix(n: int) -> np.ndarray:
    matrix = np.zeros((max(n - 2, 0), n))
    for row in range(n - 2):
        matrix[row, row : row + 3] = (1.0, -2.0, 1.0)
    return matrix


def _penalized_solve(
    gp_j: Surrogate,
    gp_g: Surrogate,
    config: TuningConfig,
    grid: np.ndarray,
    start: np.ndarray,
    gamma: float,
) -> np.ndarray:
    """Exterior-penalty L-BFGS-B solve in normalized coordinates with escalating weight."""
    lower, upper = config.bounds
    width = upper - lower
    n, dims = start.shape
    second = _second_difference_matrix(n)
    curvature = second.T @ second
    constrained = np.isfinite(config.g_max)
    required = _required_probability(config.delta)
    z_required = float(norm.ppf(required))
    eye = np.eye(dims)
    contexts = np.repeat(grid, 2 * dims)

    def gp_terms(theta: np.ndarray, rho: float) -> Tuple[np.ndarray, np.ndarray]:
        points = with_context(theta, 0.0)
        points[:, -1] = grid
        mean, _ = gp_j.predict_batch(points)
        if not constrained:
            return mean, np.zeros(n)
        shortfall = np.maximum(0.0, z_required - _probit_margin(gp_g, points, config.g_max, config.constraint_spread))
        return mean, rho * shortfall**2

    def total(u_flat: np.ndarray, rho: float) -> Tuple[float, np.ndarray]:
        u = np.clip(u_flat.reshape(n, dims), 0.0, 1.0)
        theta = lower + u * width
        mean, penalty = gp_terms(theta, rho)
        diffs = second @ u
        value = float(np.sum(mean) + gamma * np.sum(diffs**2) + np.sum(penalty))

        # central differences of the per-point GP terms, all points in one batch
        plus = np.clip(u[:, None, :] + _FD_STEP * eye[None], 0.0, 1.0)
        minus = np.clip(u[:, None, :] - _FD_STEP * eye[None], 0.0, 1.0)
        shifted = np.concatenate([plus, minus], axis=1).reshape(-1, dims)
        points = with_context(lower + shifted * width, 0.0)
        points[:, -1] = contexts
        mean_fd, _ = gp_j.predict_batch(points)
        terms = mean_fd
        if constrained:
            margin = _probit_margin(gp_g, points, config.g_max, config.constraint_spread)
            terms = terms + rho * np.maximum(0.0, z_required - margin) ** 2
        terms = terms.reshape(n, 2, dims)
        spans = (plus - minus)[:, np.arange(dims), np.arange(dims)]
        grad = (terms[:, 0, :] - terms[:, 1, :]) / np.where(spans > 0, spans, 1.0)
        grad += 2.0 * gamma * (curvature @ u)
        return value, grad.reshape(-1)

    u = (start - lower) / width
    schedule = _PENALTY_SCHEDULE if constrained else (0.0,)
    for rho in schedule:
        result = optimize.minimize(
            total, u.reshape(-1), args=(rho,), jac=True, method="L-BFGS-B",
            bounds=[(0.0, 1.0)] * (n * dims), options={"maxiter": 500},
        )
        u = np.clip(result.x.reshape(n, dims), 0.0, 1.0)
        if not constrained:
            break
        theta = lower + u * width
        probability = feasibility_probability(gp_g, np.column_stack([theta, grid]), config.g_max, config.constraint_spread)
        violated = int(np.sum(probability < required))
        if violated == 0:
            break
        logger.debug("smoothing: %d grid points infeasible at penalty %g; escalating", violated, rho)
    return lower + u * width


def _repair(
    gp_g: Surrogate, config: TuningConfig, grid: np.ndarray, params: np.ndarray, anchors: np.ndarray
) -> np.ndarray:
    """Move infeasible grid points toward their feasible pointwise optimum by bisection."""
    required = _accepted_probability(config.delta)
    params = params.copy()
    probability = feasibility_probability(gp_g, np.column_stack([params, grid]), config.g_max, config.constraint_spread)
    for index in np.nonzero(probability < required)[0]:
        low, high = 0.0, 1.0
        for _ in range(_REPAIR_ITERATIONS):
            mid = 0.5 * (low + high)
            candidate = (1.0 - mid) * params[index] + mid * anchors[index]
            p = feasibility_probability(
                gp_g, with_context(candidate, grid[index]), config.g_max, config.constraint_spread
            )[0]
            if p >= required:
                high = mid
            else:
                low = mid
        params[index] = (1.0 - high) * params[index] + high * anchors[index]
        logger.info("smoothing: repaired grid point s=%g toward its pointwise optimum (t=%.3g)", grid[index], high)
    return params


def _smooth_fixed(
    gp_j: Surrogate,
    gp_g: Surrogate,
    config: TuningConfig,
    gamma: float,
    grid: np.ndarray,
    pointwise: Policy,
) -> Policy:
    if gamma == 0:
        params = pointwise.params.copy()
    else:
        params = _penalized_solve(gp_j, gp_g, config, grid, pointwise.params, gamma)
        params = _repair(gp_g, config, grid, params, pointwise.params)

    lower, upper = config.bounds
    params = np.clip(params, lower, upper)
    probability = feasibility_probability(gp_g, np.column_stack([params, grid]), config.g_max, config.constraint_spread)
    bad = np.nonzero(probability <= config.delta)[0]
    if bad.size:
        index = int(bad[0])
        raise InfeasibleContextError(float(grid[index]), float(probability[index]))
    return Policy(
        grid=grid, params=params, delta=config.delta, gamma=float(gamma),
        feasibility=probability, param_names=config.param_names,
    )


def _check_pointwise(pointwise: Policy, config: TuningConfig) -> None:
    accepted = _accepted_probability(config.delta)
    for s, probability in zip(pointwise.grid, pointwise.feasibility):
        if probability < accepted:
            raise InfeasibleContextError(float(s), float(probability))


def tune_gamma(
    gp_j: Surrogate,
    gp_g: Surrogate,
    config: TuningConfig,
    candidates: Sequence[float] = GAMMA_CANDIDATES,
    grid: Optional[Sequence[float]] = None,
    pointwise: Optional[Policy] = None,
) -> Tuple[float, Policy]:
    """
    Smallest gamma whose policy keeps every second difference within
    ``config.max_curvature`` of the box width.

    Returns:
        (gamma, policy); the largest candidate when none meets the bound.
    """
    grid = context_grid(config) if grid is None else np.asarray(grid, dtype=float)
    if pointwise is None:
        pointwise = pointwise_policy(gp_j, gp_g, config, grid)
        _check_pointwise(pointwise, config)
    lower, upper = config.bounds
    policy = pointwise
    gamma = 0.0
    for gamma in sorted(candidates):
        policy = _smooth_fixed(gp_j, gp_g, config, gamma, grid, pointwise)
        curvature = policy.max_second_difference(upper - lower)
        logger.debug("gamma=%g: max second difference %.4f of box width", gamma, curvature)
        if curvature <= config.max_curvature:
            return gamma, policy
    logger.warning(
        "no gamma candidate reaches max second difference %.3g; using gamma=%g", config.max_curvature, gamma
    )
    return gamma, policy


def smooth(
    gp_j: Surrogate,
    gp_g: Surrogate,
    config: TuningConfig,
    gamma: Optional[float] = None,
    grid: Optional[Sequence[float]] = None,
    pointwise: Optional[Policy] = None,
) -> Policy:
    """
    Smooth constrained policy over the context grid.

    Args:
        gp_j, gp_g: Final objective and constraint surrogates.
        config: Boxes, delta, g_max, grid size and smoothing settings.
        gamma: Smoothing weight; defaults to ``config.gamma``, and when that is None
            the weight is selected by ``tune_gamma``.
        grid: Explicit context grid.
        pointwise: Precomputed pointwise policy on the same grid.

    Raises:
        InfeasibleContextError: if some grid context has no feasible parameter.
    """
    grid = context_grid(config) if grid is None else np.asarray(grid, dtype=float)
    if grid.size < 3:
        raise ValueError(f"smoothing needs at least 3 grid points, got {grid.size}")
    if pointwise is None:
        pointwise = pointwise_policy(gp_j, gp_g, config, grid)
    elif not np.array_equal(pointwise.grid, grid):
        raise ValueError("pointwise policy was computed on a different grid")
    _check_pointwise(pointwise, config)
    gamma = config.gamma if gamma is None else gamma
    if gamma is None:
        _, policy = tune_gamma(gp_j, gp_g, config, grid=grid, pointwise=pointwise)
        return policy
    if gamma < 0:
        raise ValueError(f"gamma must be non-negative, got {gamma}")
    return _smooth_fixed(gp_j, gp_g, config, gamma, grid, pointwise)


def query(policy: Policy, s: float) -> np.ndarray:
    """Piecewise-linear interpolation of the policy; out-of-range contexts are clamped."""
    low, high = float(policy.grid[0]), float(policy.grid[-1])
    if s < low or s > high:
        warnings.warn(f"Context {s} outside policy grid [{low}, {high}]; clamping.", UserWarning)
        s = min(max(s, low), high)
    return np.array([np.interp(s, policy.grid, policy.params[:, i]) for i in range(policy.params.shape[1])])
