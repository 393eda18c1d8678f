"""Tests for episode metrics and closed-loop simulation."""

import numpy as np
import pytest

from mpc_tune.episode import EpisodeEnvironment, episode_metrics, overshoot, run_episode, settling_time
from mpc_tune.models import EpisodeSpec
from mpc_tune.plant import DisturbanceTrajectory, MismatchSample

TIMES = np.linspace(0.0, 100.0, 101)


def test_first_order_settling_time() -> None:
    """Test settling of a first-order response into a 10 % band."""
    times = np.linspace(0.0, 200.0, 20001)
    values = np.where(times < 20.0, 0.0, 1.0 - np.exp(-(times - 20.0) / 10.0))

    result = settling_time(times, values, 1.0, 20.0, band=0.1)

    assert result == pytest.approx(10.0 * np.log(10.0), abs=0.02), "Should enter the band at tau * ln(10)"


def test_settling_time_counts_last_band_entry() -> None:
    """Test that leaving and re-entering the band moves the settling time."""
    values = np.where((TIMES >= 50.0) & (TIMES < 60.0), 1.5, 1.0)

    assert settling_time(TIMES, values, 1.0, 10.0) == pytest.approx(50.0)
    assert settling_time(TIMES, values, 1.0, 10.0, window_end=40.0) == 0.0, "Excursion outside the window"


def test_settling_time_never_settled() -> None:
    """Test that a trajectory outside the band at the window end gets the window length."""
    values = np.full(TIMES.size, 2.0)

    assert settling_time(TIMES, values, 1.0, 10.0) == pytest.approx(90.0)
    assert settling_time(TIMES, values, 1.0, 10.0, window_end=30.0) == pytest.approx(20.0)


def test_settling_time_already_settled() -> None:
    """Test a trajectory that sits on the reference."""
    assert settling_time(TIMES, np.ones(TIMES.size), 1.0, 10.0) == 0.0


def test_overshoot_upward_step() -> None:
    """Test overshoot past an upward reference step."""
    values = np.where(TIMES < 10.0, 0.0, 1.0 + 0.3 * np.exp(-((TIMES - 20.0) ** 2) / 4.0))

    assert overshoot(TIMES, values, 0.0, 1.0, 10.0) == pytest.approx(0.3)


def test_overshoot_downward_step() -> None:
    """Test that overshoot is measured in the direction of the step."""
    values = np.where(TIMES < 10.0, 1.0, -0.3 * np.exp(-((TIMES - 20.0) ** 2) / 4.0))

    assert overshoot(TIMES, values, 1.0, 0.0, 10.0) == pytest.approx(0.3)


def test_monotone_approach_has_no_overshoot() -> None:
    """Test that approaching from below is not overshoot."""
    values = np.where(TIMES < 10.0, 0.0, 1.0 - np.exp(-(TIMES - 10.0) / 5.0))

    assert overshoot(TIMES, values, 0.0, 1.0, 10.0) == 0.0


def test_zero_step_has_no_overshoot() -> None:
    """Test that a zero reference change yields no overshoot."""
    values = 1.0 + np.sin(TIMES)

    assert overshoot(TIMES, values, 1.0, 1.0, 10.0) == 0.0


def test_episode_metrics_reduce_windows(short_spec: EpisodeSpec) -> None:
    """Test J as the sum of settling times and g as the largest overshoot."""
    times = np.linspace(0.0, 140.0, 281)
    # air follows the reference one sample late
    t_air = np.vstack([short_spec.reference_at(max(t - 0.5, 0.0)) for t in times])
    excursion = (times >= 90.0) & (times < 95.0)
    t_air[excursion, 1] += 0.4

    settling, overshoots, j_value, g_value = episode_metrics(times, t_air, short_spec)

    assert settling.shape == (2, 2), "One settling time per tracked zone and step"
    assert np.allclose(settling, [[0.5, 0.5], [0.5, 15.0]]), "Zone 2 settles when the excursion ends"
    assert overshoots == pytest.approx([0.0, 0.4])
    assert j_value == pytest.approx(16.5)
    assert g_value == pytest.approx(0.4)


def test_run_episode_is_deterministic(short_spec: EpisodeSpec) -> None:
    """Test that an episode depends only on its inputs and seed."""
    environment = EpisodeEnvironment(n2=8)

    first = run_episode((0.5, 0.0), 90.0, short_spec, seed=4, environment=environment)
    second = run_episode((0.5, 0.0), 90.0, short_spec, seed=4, environment=environment)
    other = run_episode((0.5, 0.0), 90.0, short_spec, seed=5, environment=environment)

    assert not first.failed, first.failure_reason
    assert np.array_equal(first.t_air, second.t_air), "Same seed should reproduce the trajectory"
    assert first.j_value == second.j_value and first.g_value == second.g_value
    assert not np.array_equal(first.t_air, other.t_air), "Another seed should draw another plant"
    assert first.t_air.shape == (281, 3)
    assert first.times[-1] == pytest.approx(140.0)
    assert first.settling_times.shape == (2, 2)
    assert first.context == 90.0
    assert np.isfinite(first.j_value) and first.g_value >= 0.0


def test_runaway_plant_reports_failure() -> None:
    """Test that leaving the sanity envelope marks the episode as failed."""
    spec = EpisodeSpec(
        horizon=200.0,
        settle_time=20.0,
        steps=((20.0, (345.0, 345.0, 345.0)), (40.0, (345.0, 345.0, 345.0))),
    )
    environment = EpisodeEnvironment(n2=8, t_mix_bounds=(273.15, 400.0))

    outcome = run_episode(
        (-1.0, -1.0), 150.0, spec, environment=environment,
        mismatch=MismatchSample.nominal(), disturbance=DisturbanceTrajectory.constant(295.15),
    )

    assert outcome.failed, "Driving the cabin past 340 K should fail the episode"
    assert "blow-up" in outcome.failure_reason
    assert np.isnan(outcome.j_value) and np.isnan(outcome.g_value)
    assert outcome.to_dict()["failed"] is True


def test_environment_validated() -> None:
    """Test discretization and mismatch spread validation."""
    with pytest.raises(ValueError, match="discretization"):
        EpisodeEnvironment(discretization="tustin")
    with pytest.raises(ValueError, match="mismatch_spread"):
        EpisodeEnvironment(mismatch_spread=1.0)


def test_episode_spec_validated() -> None:
    """Test reference schedule validation."""
    with pytest.raises(ValueError, match="at least 2"):
        EpisodeSpec(steps=((120.0, (298.15, 298.15, 295.15)),))
    with pytest.raises(ValueError, match="increasing"):
        EpisodeSpec(steps=((300.0, (298.15,) * 3), (200.0, (298.15,) * 3)))
    with pytest.raises(ValueError, match="settle phase"):
        EpisodeSpec(settle_time=200.0)
    with pytest.raises(ValueError, match="multiple"):
        EpisodeSpec(control_interval=1.2)


def test_reference_schedule(short_spec: EpisodeSpec) -> None:
    """Test the piecewise-constant reference and the step windows."""
    assert np.allclose(short_spec.reference_at(10.0), 295.15)
    assert np.allclose(short_spec.reference_at(20.0), [297.15, 297.15, 295.15])
    assert np.allclose(short_spec.reference_at(139.0), [296.15, 298.15, 295.15])
    windows = short_spec.windows()
    assert [(start, end) for start, end, _, _ in windows] == [(20.0, 80.0), (80.0, 140.0)]
    assert short_spec.substeps == 4


def _direct_settling(times, values, ref, step_time, window_end, band) -> float:
    window = [(t, v) for t, v in zip(times, values) if step_time <= t <= window_end]
    settled_from = None
    for t, v in window:
        if abs(v - ref) > band:
            settled_from = None
        elif settled_from is None:
            settled_from = t
    if not window:
        return 0.0
    if settled_from is None:
        return window_end - step_time
    return settled_from - step_time


def _direct_overshoot(times, values, ref_before, ref_after, step_time, window_end) -> float:
    sign = 1.0 if ref_after > ref_before else -1.0
    worst = 0.0
    for t, v in zip(times, values):
        if step_time <= t <= window_end:
            worst = max(worst, sign * (v - ref_after))
    return worst


@pytest.mark.parametrize("seed", range(10))
def test_metrics_agree_with_sample_loop(seed: int) -> None:
    """Test settling time and overshoot against a plain loop over the samples."""
    rng = np.random.default_rng(seed)
    times = np.arange(0.0, 300.0, 2.0)
    step_time = float(rng.choice(times[:50]))
    window_end = float(rng.uniform(step_time + 20.0, 300.0))
    before, after = rng.uniform(290.0, 300.0, size=2)
    decay = np.exp(-np.maximum(times - step_time, 0.0) / rng.uniform(10.0, 60.0))
    values = np.where(
        times < step_time,
        before,
        after + (before - after) * decay * np.cos((times - step_time) / rng.uniform(3.0, 20.0)),
    ) + rng.normal(scale=0.03, size=times.size)

    assert settling_time(times, values, after, step_time, window_end, band=0.1) == pytest.approx(
        _direct_settling(times, values, after, step_time, window_end, 0.1)
    )
    assert overshoot(times, values, before, after, step_time, window_end) == pytest.approx(
        _direct_overshoot(times, values, before, after, step_time, window_end)
    )


def _ringing_step(times: np.ndarray, step_time: float) -> np.ndarray:
    lag = times - step_time
    return np.where(lag < 0, 295.0, 297.0 - 2.0 * np.exp(-lag / 15.0) * np.cos(lag / 6.0))


@pytest.mark.parametrize("step_time", [45.0, 130.0])
def test_metrics_invariant_to_step_time_shift(step_time: float) -> None:
    """Test that moving the step and the response together leaves both metrics unchanged."""
    times = np.arange(0.0, 400.0, 1.0)
    early = _ringing_step(times, 20.0)
    shifted = _ringing_step(times, step_time)

    settle = settling_time(times, early, 297.0, 20.0, 220.0)
    peak = overshoot(times, early, 295.0, 297.0, 20.0, 220.0)

    assert settle > 0.0 and peak > 0.0
    assert settling_time(times, shifted, 297.0, step_time, step_time + 200.0) == pytest.approx(settle)
    assert overshoot(times, shifted, 295.0, 297.0, step_time, step_time + 200.0) == pytest.approx(peak)
