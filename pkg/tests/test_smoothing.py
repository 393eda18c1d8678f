"""Tests for pointwise optima, policy smoothing and policy queries."""

import itertools

import numpy as np
import pytest
from scipy.stats import norm

from mpc_tune.errors import InfeasibleContextError
from mpc_tune.models import Policy, TuningConfig
from mpc_tune.smoothing import pointwise_optimum, pointwise_policy, query, smooth, tune_gamma

UNIT_BOX = (np.array([0.0, 0.0]), np.array([1.0, 1.0]))


def _config(**overrides) -> TuningConfig:
    values = dict(
        theta_min=(0.0, 0.0), theta_max=(1.0, 1.0), s_min=0.0, s_max=1.0,
        g_max=0.0, delta=0.93, budget=10, n_initial=2, n_grid=5,
    )
    values.update(overrides)
    return TuningConfig(**values)


def _feasible(stub):
    return stub(lambda p: np.full(len(p), -1.0))


def _tracking(target):
    """Objective mean (theta - target(s))^2 summed over the parameters."""
    return lambda p: np.sum((p[:, :-1] - target(p[:, -1])[:, None]) ** 2, axis=1)


def test_query_interpolates_and_clamps() -> None:
    """Test piecewise-linear queries and clamping outside the grid."""
    policy = Policy(grid=[50.0, 100.0, 150.0], params=[[0.0, 1.0], [1.0, 3.0], [2.0, 2.0]], delta=0.93, gamma=0.0)

    assert np.allclose(query(policy, 100.0), [1.0, 3.0]), "Grid points are returned exactly"
    assert np.allclose(query(policy, 75.0), [0.5, 2.0])
    with pytest.warns(UserWarning, match="outside policy grid"):
        assert np.allclose(query(policy, 200.0), [2.0, 2.0])
    with pytest.warns(UserWarning):
        assert np.allclose(query(policy, 0.0), [0.0, 1.0])


def test_inactive_constraint_gives_unconstrained_minimum(stub_surrogate) -> None:
    """Test the pointwise optimum when the constraint holds everywhere."""
    gp_j = stub_surrogate(lambda p: (p[:, 0] - 0.4) ** 2 + (p[:, 1] - 0.63) ** 2)

    optimum = pointwise_optimum(gp_j, _feasible(stub_surrogate), 0.5, 0.93, 0.0, UNIT_BOX)

    assert optimum.feasible
    assert np.allclose(optimum.theta, [0.4, 0.63], atol=1e-3)


def test_active_constraint_meets_kkt_point(stub_surrogate) -> None:
    """Test the constrained optimum on the boundary of the feasibility region."""
    gp_j = stub_surrogate(lambda p: (p[:, 0] - 0.8) ** 2 + (p[:, 1] - 0.8) ** 2)
    gp_g = stub_surrogate(lambda p: p[:, 0] + p[:, 1] - 1.0, lambda p: np.full(len(p), 0.1))

    optimum = pointwise_optimum(gp_j, gp_g, 0.5, 0.93, 0.0, UNIT_BOX)

    # theta1 + theta2 = 1 - 0.1 * z_0.93 on the symmetric axis
    edge = 1.0 - 0.1 * norm.ppf(0.93)
    assert optimum.feasible
    assert np.allclose(optimum.theta, [edge / 2.0, edge / 2.0], atol=1e-3), f"Got {optimum.theta}"
    assert optimum.probability >= 0.93


def test_infeasible_context_is_flagged(stub_surrogate) -> None:
    """Test that a context without feasible parameters is flagged, and smoothing refuses it."""
    gp_j = stub_surrogate(lambda p: p[:, 0])
    gp_g = stub_surrogate(lambda p: np.full(len(p), 1.0), lambda p: np.full(len(p), 0.1))

    optimum = pointwise_optimum(gp_j, gp_g, 0.5, 0.93, 0.0, UNIT_BOX)

    assert not optimum.feasible
    assert optimum.probability < 0.93
    with pytest.raises(InfeasibleContextError) as excinfo:
        smooth(gp_j, gp_g, _config(), gamma=1.0)
    assert excinfo.value.context == 0.0, "The first grid context should be reported"


def test_zero_gamma_returns_pointwise_policy(stub_surrogate) -> None:
    """Test that no smoothing weight leaves the pointwise optima untouched."""
    gp_j = stub_surrogate(_tracking(lambda s: 0.2 + 0.6 * s**2))
    gp_g = _feasible(stub_surrogate)
    config = _config()

    pointwise = pointwise_policy(gp_j, gp_g, config)
    policy = smooth(gp_j, gp_g, config, gamma=0.0)

    assert np.array_equal(policy.params, pointwise.params)
    assert policy.gamma == 0.0 and policy.delta == 0.93
    assert np.allclose(pointwise.params[:, 0], 0.2 + 0.6 * np.linspace(0.0, 1.0, 5) ** 2, atol=1e-4)


def test_large_gamma_flattens_curvature(stub_surrogate) -> None:
    """Test that a huge smoothing weight drives second differences to zero."""
    gp_j = stub_surrogate(_tracking(lambda s: 0.1 + 0.8 * s**2))
    config = _config(g_max=np.inf, n_grid=7)

    pointwise = pointwise_policy(gp_j, _feasible(stub_surrogate), config)
    policy = smooth(gp_j, _feasible(stub_surrogate), config, gamma=1e6)

    assert pointwise.max_second_difference() > 0.04
    assert policy.max_second_difference() < 0.005, "Policy should be nearly affine"
    assert np.all((policy.params >= 0.0) & (policy.params <= 1.0))


def test_curvature_decreases_with_gamma(stub_surrogate) -> None:
    """Test that more smoothing never yields a rougher policy."""
    gp_j = stub_surrogate(_tracking(lambda s: 0.5 + 0.4 * np.sin(6.0 * s)))
    config = _config(g_max=np.inf, n_grid=9)
    gp_g = _feasible(stub_surrogate)

    roughness = []
    for gamma in (0.0, 1e-2, 1.0, 1e2):
        policy = smooth(gp_j, gp_g, config, gamma=gamma)
        roughness.append(float(np.sum(policy.second_differences() ** 2)))

    assert all(b <= a * 1.01 + 1e-10 for a, b in zip(roughness, roughness[1:])), f"Roughness {roughness}"
    assert roughness[-1] < 0.5 * roughness[0]


def test_three_point_smoothing_matches_brute_force(stub_surrogate) -> None:
    """Test a one-parameter, three-context problem against the closed form and a grid search."""
    targets = np.array([0.2, 0.9, 0.3])
    gamma = 0.5
    gp_j = stub_surrogate(lambda p: (p[:, 0] - np.interp(p[:, 1], [0.0, 0.5, 1.0], targets)) ** 2)
    config = _config(theta_min=(0.0,), theta_max=(1.0,), param_names=("theta",), g_max=np.inf, n_grid=3)

    policy = smooth(gp_j, _feasible(stub_surrogate), config, gamma=gamma)

    def cost(theta):
        theta = np.asarray(theta)
        return float(np.sum((theta - targets) ** 2) + gamma * (theta[0] - 2 * theta[1] + theta[2]) ** 2)

    # (I + gamma D'D) theta = targets, D = [1, -2, 1]
    expected = targets + gamma * 1.3 / (1.0 + 6.0 * gamma) * np.array([1.0, -2.0, 1.0])
    axis = np.linspace(0.0, 1.0, 30)
    brute = min(cost(theta) for theta in itertools.product(axis, repeat=3))
    assert np.allclose(policy.params[:, 0], expected, atol=1e-4)
    assert cost(policy.params[:, 0]) <= brute + 1e-9, "Continuous optimum must beat the grid search"


def test_smoothed_policy_stays_feasible(stub_surrogate) -> None:
    """Test that smoothing respects the probabilistic constraint at every grid point."""
    gp_j = stub_surrogate(_tracking(lambda s: 0.3 + 0.6 * s))
    gp_g = stub_surrogate(lambda p: p[:, 0] - 0.6, lambda p: np.full(len(p), 0.05))
    config = _config(n_grid=7)

    policy = smooth(gp_j, gp_g, config, gamma=10.0)

    assert np.all(policy.feasibility > 0.93), f"Feasibility {policy.feasibility}"
    assert np.all(policy.params[:, 0] <= 0.6 - 0.05 * norm.ppf(0.93) + 1e-6)


def test_tune_gamma_keeps_affine_optimum_unsmoothed(stub_surrogate) -> None:
    """Test that an already affine pointwise policy needs no smoothing."""
    gp_j = stub_surrogate(_tracking(lambda s: 0.2 + 0.5 * s))
    config = _config(g_max=np.inf)

    gamma, policy = tune_gamma(gp_j, _feasible(stub_surrogate), config)

    assert gamma == 0.0
    assert policy.max_second_difference(np.ones(2)) <= config.max_curvature


def test_smooth_validates_inputs(stub_surrogate) -> None:
    """Test gamma sign, grid size and grid consistency checks."""
    gp_j = stub_surrogate(_tracking(lambda s: 0.5 + 0.0 * s))
    gp_g = _feasible(stub_surrogate)
    config = _config(g_max=np.inf)

    with pytest.raises(ValueError, match="non-negative"):
        smooth(gp_j, gp_g, config, gamma=-1.0)
    with pytest.raises(ValueError, match="at least 3"):
        smooth(gp_j, gp_g, config, gamma=1.0, grid=[0.0, 1.0])
    pointwise = pointwise_policy(gp_j, gp_g, config)
    with pytest.raises(ValueError, match="different grid"):
        smooth(gp_j, gp_g, config, gamma=1.0, grid=np.linspace(0.0, 1.0, 4), pointwise=pointwise)


def test_objective_sum_grows_with_gamma(stub_surrogate) -> None:
    """Test that a larger smoothing weight never lowers the summed objective mean."""
    gp_j = stub_surrogate(_tracking(lambda s: 0.5 + 0.4 * np.sin(6.0 * s)))
    gp_g = stub_surrogate(lambda p: p[:, 0] - 0.7, lambda p: np.full(len(p), 0.05))
    config = _config(n_grid=9)
    grid = np.linspace(0.0, 1.0, 9)

    def objective_sum(policy: Policy) -> float:
        return float(np.sum(gp_j.predict_batch(np.column_stack([policy.params, grid]))[0]))

    pointwise = objective_sum(pointwise_policy(gp_j, gp_g, config))
    sums = [objective_sum(smooth(gp_j, gp_g, config, gamma=gamma)) for gamma in (0.0, 1e-2, 1e-1, 1.0, 10.0, 1e2, 1e3)]

    assert sums[0] == pytest.approx(pointwise)
    assert all(b >= a - 1e-4 for a, b in zip(sums, sums[1:])), f"Objective sums {sums}"
    assert all(total >= pointwise - 1e-4 for total in sums), "Smoothing cannot beat the pointwise optima"
    assert sums[-1] > sums[0] + 1e-3


def test_smoothing_weight_acts_on_normalized_parameters(stub_surrogate) -> None:
    """Test that the same problem on an unequal box gives the same policy in box units."""
    lower, upper = np.array([-2.0, 10.0]), np.array([3.0, 10.5])
    width = upper - lower

    def unit_target(s):
        return 0.5 + 0.3 * np.sin(5.0 * s)

    gp_unit = stub_surrogate(_tracking(unit_target))
    gp_box = stub_surrogate(
        lambda p: np.sum(((p[:, :-1] - lower) / width - unit_target(p[:, -1])[:, None]) ** 2, axis=1)
    )
    unit_config = _config(g_max=np.inf, n_grid=7)
    box_config = _config(g_max=np.inf, n_grid=7, theta_min=tuple(lower), theta_max=tuple(upper))

    unit = smooth(gp_unit, _feasible(stub_surrogate), unit_config, gamma=0.3)
    box = smooth(gp_box, _feasible(stub_surrogate), box_config, gamma=0.3)

    assert np.allclose((box.params - lower) / width, unit.params, atol=1e-3), "Policies differ in box units"
    assert unit.max_second_difference() > 1e-3, "The weight should leave some curvature"
