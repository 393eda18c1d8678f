"""
Simulated training episode: observer settle phase, then scheduled reference steps.

Each episode draws a model-plant mismatch and a disturbance trajectory from its seed,
runs the closed loop (true plant, nominal MPC, disturbance observer) at a constant
mass flow and reduces the trajectories to a settling-time objective and an overshoot
constraint value.
"""

import functools
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np

from mpc_tune.errors import PlantBlowUpError
from mpc_tune.models import EpisodeOutcome, EpisodeSpec
from mpc_tune.mpc import DISCRETIZATIONS, MpcController, MpcParams, ObserverState, linearize, observe
from mpc_tune.plant import (
    ZONES,
    CabinPlant,
    DisturbanceTrajectory,
    MismatchSample,
    PlantParams,
    PlantState,
    sample_disturbance,
    sample_mismatch,
)
from mpc_tune.seeding import derive_seed

logger = logging.getLogger(__name__)


@functools.lru_cache(maxsize=1)
def bundled_catalog() -> Tuple[DisturbanceTrajectory, ...]:
    """The disturbance catalog shipped with the package."""
    from mpc_tune.loaders import default_catalog_path, load_catalog

    return tuple(load_catalog(default_catalog_path()))


@dataclass
class EpisodeEnvironment:
    """Everything about an episode except the tuned parameters, the context and the seed."""

    plant: PlantParams = field(default_factory=PlantParams)
    n2: int = 20
    q: Tuple[float, ...] = (1.0, 1.0, 1.0)
    t_mix_bounds: Tuple[float, float] = (273.15, 333.15)
    observer_gain: float = 0.1
    mismatch_spread: float = 0.3
    discretization: str = "exact"
    catalog: Optional[Tuple[DisturbanceTrajectory, ...]] = None

    def __post_init__(self):
        if self.discretization not in DISCRETIZATIONS:
            raise ValueError(f"discretization must be one of {DISCRETIZATIONS}, got '{self.discretization}'")
        if not 0 <= self.mismatch_spread < 1:
            raise ValueError(f"mismatch_spread must lie in [0, 1), got {self.mismatch_spread}")
        if self.catalog is not None:
            self.catalog = tuple(self.catalog)

    def disturbances(self) -> Sequence[DisturbanceTrajectory]:
        return bundled_catalog() if self.catalog is None else self.catalog

    def mpc_params(self, theta: Sequence[float], control_interval: float) -> MpcParams:
        return MpcParams.from_theta(
            theta, n2=self.n2, q=self.q, t_mix_bounds=self.t_mix_bounds, control_interval=control_interval
        )


def settling_time(
    times: np.ndarray,
    values: np.ndarray,
    ref: float,
    step_time: float,
    window_end: Optional[float] = None,
    band: float = 0.1,
) -> float:
    """
    Time after ``step_time`` from which the trajectory stays within ``band`` of ``ref``.

    A trajectory that is still outside the band at the end of the window gets the full
    window length.
    """
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    end = float(times[-1]) if window_end is None else float(window_end)
    mask = (times >= step_time) & (times <= end)
    window_times, window_values = times[mask], values[mask]
    if window_times.size == 0:
        return 0.0
    outside = np.nonzero(np.abs(window_values - ref) > band)[0]
    if outside.size == 0:
        return 0.0
    last = int(outside[-1])
    if last == window_times.size - 1:
        return end - step_time
    return float(window_times[last + 1] - step_time)


def overshoot(
    times: np.ndarray,
    values: np.ndarray,
    ref_before: float,
    ref_after: float,
    step_time: float,
    window_end: Optional[float] = None,
) -> float:
    """Largest excursion past ``ref_after`` in the direction of the step; 0 for a zero step."""
    direction = np.sign(ref_after - ref_before)
    if direction == 0:
        return 0.0
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    end = float(times[-1]) if window_end is None else float(window_end)
    mask = (times >= step_time) & (times <= end)
    if not np.any(mask):
        return 0.0
    return max(0.0, float(np.max(direction * (values[mask] - ref_after))))


def episode_metrics(
    times: np.ndarray, t_air: np.ndarray, spec: EpisodeSpec
) -> Tuple[np.ndarray, np.ndarray, float, float]:
    """
    Settling times (zones x steps), overshoots per zone, J and g for a recorded episode.

    Only ``spec.tracked_zones`` enter the metrics.
    """
    windows = spec.windows()
    settling = np.zeros((len(spec.tracked_zones), len(windows)))
    overshoots = np.zeros((len(spec.tracked_zones), len(windows)))
    for row, zone in enumerate(spec.tracked_zones):
        for col, (start, end, before, after) in enumerate(windows):
            settling[row, col] = settling_time(times, t_air[:, zone], after[zone], start, end, spec.settle_band)
            overshoots[row, col] = overshoot(times, t_air[:, zone], before[zone], after[zone], start, end)
    per_zone = overshoots.max(axis=1)
    return settling, per_zone, float(settling.sum()), float(per_zone.max())


def _failed(s: float, reason: str, times, t_air, t_ref, t_mix, spec: EpisodeSpec) -> EpisodeOutcome:
    logger.warning("episode at s=%g failed: %s", s, reason)
    n_tracked, n_steps = len(spec.tracked_zones), len(spec.steps)
    return EpisodeOutcome(
        times=np.asarray(times),
        t_air=np.asarray(t_air).reshape(-1, ZONES),
        t_ref=np.asarray(t_ref).reshape(-1, ZONES),
        t_mix=np.asarray(t_mix).reshape(-1, ZONES),
        settling_times=np.full((n_tracked, n_steps), np.nan),
        overshoots=np.full(n_tracked, np.nan),
        j_value=float("nan"),
        g_value=float("nan"),
        context=float(s),
        failed=True,
        failure_reason=reason,
    )


def run_episode(
    theta: Sequence[float],
    s: float,
    spec: Optional[EpisodeSpec] = None,
    seed: int = 0,
    environment: Optional[EpisodeEnvironment] = None,
    mismatch: Optional[MismatchSample] = None,
    disturbance: Optional[DisturbanceTrajectory] = None,
) -> EpisodeOutcome:
    """
    Run one closed-loop episode with lambda, lambda0 = 10**theta at mass flow s.

    Args:
        theta: (log10 lambda, log10 lambda0).
        s: Constant blower mass flow in kg/h.
        spec: Reference schedule and timing.
        seed: Episode seed; mismatch and disturbance are drawn from named substreams.
        environment: Plant, controller and catalog settings.
        mismatch: Fixed mismatch instead of a sampled one (e.g. nominal for comparisons).
        disturbance: Fixed disturbance trajectory instead of a sampled one.

    Returns:
        EpisodeOutcome; ``failed`` is set on plant blow-up or controller degradation.
    """
    spec = spec or EpisodeSpec()
    env = environment or EpisodeEnvironment()
    if mismatch is None:
        mismatch = sample_mismatch(derive_seed(seed, "mismatch"), env.mismatch_spread)
    if disturbance is None:
        disturbance = sample_disturbance(env.disturbances(), derive_seed(seed, "disturbance"))

    plant = CabinPlant(mismatch.apply(env.plant), s)
    model = linearize(env.plant, s, spec.control_interval, env.discretization)
    controller = MpcController(env.mpc_params(theta, spec.control_interval), model)
    observer = ObserverState(gain=env.observer_gain)

    state = PlantState.uniform(disturbance.at(0.0)[0])
    low, high = env.t_mix_bounds
    previous = np.clip(state.t_air, low, high)
    prediction: Optional[np.ndarray] = None
    n_control = int(round(spec.horizon / spec.control_interval))

    times, t_air, t_ref, t_mix = [0.0], [state.t_air], [spec.reference_at(0.0)], [previous]
    for k in range(n_control):
        t = k * spec.control_interval
        w = np.asarray(disturbance.at(t))
        if prediction is None:
            estimate = state.vector()
        else:
            observer = observe(observer, state.t_air, prediction[:ZONES])
            estimate = np.concatenate([state.t_air, prediction[ZONES:]])
        command = controller.solve(estimate, observer.estimates, spec.reference_at(t), previous, w)
        if controller.degraded_steps:
            return _failed(s, f"MPC solver degraded at t={t:g} s", times, t_air, t_ref, t_mix, spec)
        prediction = model.step(estimate, command, w)

        for sub in range(spec.substeps):
            t_sub = t + sub * spec.plant_dt
            try:
                state = plant.step(state, command, disturbance.at(t_sub), spec.plant_dt, t_sub)
            except PlantBlowUpError as exc:
                return _failed(s, str(exc), times, t_air, t_ref, t_mix, spec)
            t_next = t_sub + spec.plant_dt
            times.append(t_next)
            t_air.append(state.t_air)
            t_ref.append(spec.reference_at(t_next))
            t_mix.append(command)
        previous = command

    times_arr = np.asarray(times)
    t_air_arr = np.vstack(t_air)
    settling, overshoots, j_value, g_value = episode_metrics(times_arr, t_air_arr, spec)
    if not (np.isfinite(j_value) and np.isfinite(g_value)):
        return _failed(s, "non-finite metrics", times, t_air, t_ref, t_mix, spec)
    return EpisodeOutcome(
        times=times_arr,
        t_air=t_air_arr,
        t_ref=np.vstack(t_ref),
        t_mix=np.vstack(t_mix),
        settling_times=settling,
        overshoots=overshoots,
        j_value=j_value,
        g_value=g_value,
        context=float(s),
    )
