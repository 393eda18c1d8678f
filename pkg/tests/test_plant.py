"""Tests for the three-zone cabin model."""

from collections import Counter

import numpy as np
import pytest

from mpc_tune.errors import ConfigError, PlantBlowUpError
from mpc_tune.plant import (
    MISMATCH_FIELDS,
    CabinPlant,
    DisturbanceTrajectory,
    MismatchSample,
    PlantParams,
    PlantState,
    continuous_matrices,
    sample_disturbance,
    sample_mismatch,
    step,
)

NOMINAL = PlantParams()


def test_uniform_equilibrium_is_stationary() -> None:
    """Test that equal air, solid, mixing and ambient temperatures stay put without sun."""
    state = PlantState.uniform(295.15)

    after = step(state, [295.15] * 3, 100.0, (295.15, 0.0), NOMINAL, dt=0.5)

    assert np.allclose(after.vector(), 295.15, atol=1e-9), "Equilibrium should be preserved"


def test_solar_heats_solids_first() -> None:
    """Test that irradiation enters through the solids."""
    state = PlantState.uniform(295.15)

    after = step(state, [295.15] * 3, 100.0, (295.15, 500.0), NOMINAL, dt=1.0)

    assert np.all(after.t_solids > 295.15), "Solids should warm up in the sun"
    assert np.allclose(after.t_air, 295.15, atol=1e-12), "Air only follows through the solids"


def _rise_time(m_dot: float) -> float:
    plant = CabinPlant(NOMINAL, m_dot)
    state = PlantState.uniform(295.15)
    air = []
    for k in range(1200):
        state = plant.step(state, [305.15] * 3, (295.15, 0.0), 0.5, k * 0.5)
        air.append(state.t_air[0])
    air = np.asarray(air)
    rise = air - 295.15
    target = (1.0 - np.exp(-1.0)) * rise[-1]
    return 0.5 * (int(np.argmax(rise >= target)) + 1)


def test_doubling_mass_flow_shortens_response() -> None:
    """Test that the air response gets roughly twice as fast at twice the mass flow."""
    slow, fast = _rise_time(75.0), _rise_time(150.0)

    assert fast < slow, "Higher mass flow should speed up the response"
    assert 0.4 <= fast / slow <= 0.7, f"Expected roughly half the rise time, got ratio {fast / slow:.3f}"


def test_input_gain_is_linear_in_mass_flow() -> None:
    """Test that the ventilation gain scales with the mass flow."""
    _, b_low, _ = continuous_matrices(NOMINAL, 50.0)
    _, b_high, _ = continuous_matrices(NOMINAL, 100.0)

    assert np.allclose(b_high, 2.0 * b_low), "Input matrix should double with the mass flow"
    with pytest.raises(ValueError, match="mass flow"):
        continuous_matrices(NOMINAL, -1.0)


def test_envelope_violation_raises() -> None:
    """Test the physical sanity envelope."""
    plant = CabinPlant(NOMINAL, 150.0)
    state = PlantState.uniform(339.9)

    with pytest.raises(PlantBlowUpError) as excinfo:
        plant.step(state, [400.0] * 3, (295.15, 0.0), 0.5, t=12.0)

    assert excinfo.value.time == pytest.approx(12.5), "Blow-up should report the time reached"


def test_step_length_limited() -> None:
    """Test that the explicit step rejects long steps."""
    with pytest.raises(ValueError, match="dt"):
        step(PlantState.uniform(295.15), [295.15] * 3, 100.0, (295.15, 0.0), NOMINAL, dt=2.5)


def test_plant_params_validated() -> None:
    """Test per-zone lengths, positivity and the flow split."""
    with pytest.raises(ValueError, match="flow_split"):
        PlantParams(flow_split=(0.5, 0.5, 0.5))
    with pytest.raises(ValueError, match="entries"):
        PlantParams(c_air=(1000.0, 1000.0))
    with pytest.raises(ValueError, match="positive"):
        PlantParams(h_ambient=0.0)


def test_mismatch_sample_in_range_and_reproducible() -> None:
    """Test sampled mismatch factors."""
    samples = [sample_mismatch(seed, 0.3) for seed in range(50)]

    for sample in samples:
        assert set(sample.factors) == set(MISMATCH_FIELDS)
        assert all(0.7 <= v <= 1.3 for v in sample.factors.values()), "Factors must stay within 1 +/- 0.3"
    assert sample_mismatch(7).factors == sample_mismatch(7).factors, "Same seed should give same factors"
    assert sample_mismatch(7).factors != sample_mismatch(8).factors


def test_mismatch_applies_to_plant_only() -> None:
    """Test that applying a mismatch scales the named parameter groups."""
    sample = MismatchSample({"c_air": 1.2, "h_ambient": 0.8})

    perturbed = sample.apply(NOMINAL)

    assert perturbed.c_air == pytest.approx(tuple(1.2 * v for v in NOMINAL.c_air))
    assert perturbed.h_ambient == pytest.approx(0.8 * NOMINAL.h_ambient)
    assert perturbed.c_solid == NOMINAL.c_solid, "Unnamed groups keep nominal values"
    assert MismatchSample.nominal().apply(NOMINAL) == NOMINAL


def test_mismatch_outside_spread_rejected() -> None:
    """Test mismatch validation."""
    with pytest.raises(ValueError, match="outside"):
        MismatchSample({"c_air": 1.5}, spread=0.3)
    with pytest.raises(ValueError, match="unknown"):
        MismatchSample({"wheel_base": 1.0})


def test_disturbance_selection_is_uniform() -> None:
    """Test that catalog entries are drawn with equal frequency."""
    catalog = [DisturbanceTrajectory.constant(280.0 + 5 * i, name=f"d{i}") for i in range(4)]

    counts = Counter(sample_disturbance(catalog, seed).name for seed in range(4000))

    assert set(counts) == {"d0", "d1", "d2", "d3"}
    sigma = np.sqrt(4000 * 0.25 * 0.75)
    for name, count in counts.items():
        assert abs(count - 1000) < 4 * sigma, f"{name} drawn {count} times"
    assert sample_disturbance(catalog, 11) is sample_disturbance(catalog, 11)


def test_empty_catalog_rejected() -> None:
    """Test that an empty disturbance catalog is a configuration error."""
    with pytest.raises(ConfigError, match="empty"):
        sample_disturbance([], 0)


def test_disturbance_interpolation_and_hold() -> None:
    """Test linear interpolation inside and hold outside the recorded range."""
    trajectory = DisturbanceTrajectory([0.0, 100.0], [290.0, 300.0], [0.0, 400.0], "ramp")

    assert trajectory.at(50.0) == pytest.approx((295.0, 200.0))
    assert trajectory.at(500.0) == pytest.approx((300.0, 400.0)), "Values are held after the last sample"


def test_disturbance_ranges_checked() -> None:
    """Test physical ranges and grid monotonicity of a trajectory."""
    with pytest.raises(ValueError, match="ambient"):
        DisturbanceTrajectory.constant(200.0)
    with pytest.raises(ValueError, match="solar"):
        DisturbanceTrajectory.constant(295.0, 2000.0)
    with pytest.raises(ValueError, match="increasing"):
        DisturbanceTrajectory([0.0, 0.0], [295.0, 295.0], [0.0, 0.0])


@pytest.mark.parametrize("m_dot", [50.0, 100.0, 150.0])
def test_trajectories_under_same_inputs_contract(m_dot: float) -> None:
    """Test that two cabins driven by the same inputs never drift apart in the max norm."""
    rng = np.random.default_rng(int(m_dot))
    plant = CabinPlant(NOMINAL, m_dot)
    first = PlantState.from_vector(rng.uniform(280.0, 310.0, size=6))
    second = PlantState.from_vector(rng.uniform(280.0, 310.0, size=6))
    gaps = [np.max(np.abs(first.vector() - second.vector()))]

    for k in range(300):
        t_mix = rng.uniform(285.0, 320.0, size=3)
        disturbance = (rng.uniform(270.0, 305.0), rng.uniform(0.0, 800.0))
        first = plant.step(first, t_mix, disturbance, dt=2.0, t=2.0 * k)
        second = plant.step(second, t_mix, disturbance, dt=2.0, t=2.0 * k)
        gaps.append(np.max(np.abs(first.vector() - second.vector())))

    assert np.all(np.diff(gaps) <= 1e-9), "State difference must not grow"
    assert gaps[-1] < gaps[0], "Ventilation should pull the air temperatures together"
