"""
Three-zone lumped thermal model of a vehicle cabin.

Six states: air temperature and mean solid temperature per zone (driver, passenger,
rear). Zone air is ventilated with mixing-temperature air at a passenger-set mass flow
split by fixed fractions, exchanges heat with its solids, the neighbouring zones and the
ambient; solids absorb a fraction of the solar irradiation. For a fixed mass flow the
model is linear; the ventilation gain makes the time constants shrink with mass flow.
"""

import logging
from dataclasses import dataclass, field, fields, replace
from typing import Dict, Mapping, Sequence, Tuple

import numpy as np

from mpc_tune.errors import ConfigError, PlantBlowUpError

logger = logging.getLogger(__name__)

ZONES = 3
ENVELOPE = (240.0, 340.0)
MISMATCH_FIELDS = ("c_air", "c_solid", "h_air_solid", "h_zone", "h_ambient", "solar_absorption")
AMBIENT_RANGE = (250.0, 320.0)
SOLAR_RANGE = (0.0, 1200.0)


@dataclass(frozen=True)
class PlantParams:
    """Nominal parameters of the cabin model (SI units, per zone where a tuple)."""

    c_air: Tuple[float, ...] = (1000.0, 1000.0, 800.0)  # J/K
    c_solid: Tuple[float, ...] = (1.5e4, 1.5e4, 1.2e4)  # J/K
    h_air_solid: Tuple[float, ...] = (1.2, 1.2, 1.0)  # W/K
    h_zone: Tuple[float, ...] = (0.8, 0.4, 0.4)  # W/K between zones 1-2, 1-3, 2-3
    h_ambient: float = 0.6  # W/K per zone
    solar_absorption: Tuple[float, ...] = (0.02, 0.02, 0.015)
    flow_split: Tuple[float, ...] = (0.4, 0.4, 0.2)
    c_p: float = 1005.0  # J/(kg K)

    def __post_init__(self):
        for item in fields(self):
            value = getattr(self, item.name)
            values = (value,) if np.isscalar(value) else tuple(value)
            if not np.isscalar(value):
                object.__setattr__(self, item.name, tuple(float(v) for v in values))
                if len(values) != ZONES:
                    raise ValueError(f"{item.name} needs {ZONES} entries, got {len(values)}")
            if any(not (np.isfinite(v) and v > 0) for v in values):
                raise ValueError(f"{item.name} must be positive, got {value}")
        if abs(sum(self.flow_split) - 1.0) > 1e-9:
            raise ValueError(f"flow_split must sum to 1, got {sum(self.flow_split)}")

    def scaled(self, factors: Mapping[str, float]) -> "PlantParams":
        """Copy with the named fields multiplied by the given factors."""
        changes = {}
        for name, factor in factors.items():
            value = getattr(self, name)
            changes[name] = value * factor if np.isscalar(value) else tuple(v * factor for v in value)
        return replace(self, **changes)


@dataclass
class MismatchSample:
    """Multiplicative model-plant mismatch factors, one per parameter group."""

    factors: Dict[str, float] = field(default_factory=lambda: {name: 1.0 for name in MISMATCH_FIELDS})
    spread: float = 0.3

    def __post_init__(self):
        unknown = set(self.factors) - set(MISMATCH_FIELDS)
        if unknown:
            raise ValueError(f"unknown mismatch parameters: {sorted(unknown)}")
        for name, factor in self.factors.items():
            if not 1.0 - self.spread - 1e-12 <= factor <= 1.0 + self.spread + 1e-12:
                raise ValueError(f"mismatch factor {name}={factor} outside 1 +/- {self.spread}")

    @classmethod
    def nominal(cls) -> "MismatchSample":
        return cls()

    def apply(self, params: PlantParams) -> PlantParams:
        """Plant parameters as perturbed by this sample (the controller keeps the nominal ones)."""
        return params.scaled(self.factors)


@dataclass
class PlantState:
    """Zone air and solid temperatures in K."""

    t_air: np.ndarray
    t_solids: np.ndarray

    def __post_init__(self):
        self.t_air = np.asarray(self.t_air, dtype=float).reshape(ZONES)
        self.t_solids = np.asarray(self.t_solids, dtype=float).reshape(ZONES)

    @classmethod
    def uniform(cls, temperature: float) -> "PlantState":
        return cls(np.full(ZONES, float(temperature)), np.full(ZONES, float(temperature)))

    @classmethod
    def from_vector(cls, vector: np.ndarray) -> "PlantState":
        return cls(vector[:ZONES], vector[ZONES:])

    def vector(self) -> np.ndarray:
        return np.concatenate([self.t_air, self.t_solids])


@dataclass
class DisturbanceTrajectory:
    """Ambient temperature (K) and solar irradiation (W) over time (s)."""

    times: np.ndarray
    t_ambient: np.ndarray
    q_solar: np.ndarray
    name: str = ""

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float).reshape(-1)
        self.t_ambient = np.asarray(self.t_ambient, dtype=float).reshape(-1)
        self.q_solar = np.asarray(self.q_solar, dtype=float).reshape(-1)
        if not (self.times.size == self.t_ambient.size == self.q_solar.size) or self.times.size == 0:
            raise ValueError(f"disturbance '{self.name}': series lengths must match the time grid")
        if self.times.size > 1 and np.any(np.diff(self.times) <= 0):
            raise ValueError(f"disturbance '{self.name}': time grid must be strictly increasing")
        if np.any(self.t_ambient < AMBIENT_RANGE[0]) or np.any(self.t_ambient > AMBIENT_RANGE[1]):
            raise ValueError(f"disturbance '{self.name}': ambient temperature outside {AMBIENT_RANGE} K")
        if np.any(self.q_solar < SOLAR_RANGE[0]) or np.any(self.q_solar > SOLAR_RANGE[1]):
            raise ValueError(f"disturbance '{self.name}': solar irradiation outside {SOLAR_RANGE} W")

    @classmethod
    def constant(cls, t_ambient: float, q_solar: float = 0.0, name: str = "constant") -> "DisturbanceTrajectory":
        return cls(np.array([0.0]), np.array([t_ambient]), np.array([q_solar]), name)

    def at(self, t: float) -> Tuple[float, float]:
        """(ambient temperature, solar irradiation) at time t, held beyond the recorded range."""
        return (
            float(np.interp(t, self.times, self.t_ambient)),
            float(np.interp(t, self.times, self.q_solar)),
        )


def continuous_matrices(params: PlantParams, m_dot: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Continuous-time matrices of dx/dt = A x + B t_mix + E [t_ambient, q_solar].

    Args:
        params: Plant parameters.
        m_dot: Total blower mass flow in kg/h.
    """
    if not (np.isfinite(m_dot) and m_dot >= 0):
        raise ValueError(f"mass flow must be non-negative, got {m_dot}")
    c_air = np.asarray(params.c_air)
    c_solid = np.asarray(params.c_solid)
    h_as = np.asarray(params.h_air_solid)
    vent = m_dot / 3600.0 * np.asarray(params.flow_split) * params.c_p

    h12, h13, h23 = params.h_zone
    coupling = np.array([[0.0, h12, h13], [h12, 0.0, h23], [h13, h23, 0.0]])

    a = np.zeros((2 * ZONES, 2 * ZONES))
    a[:ZONES, :ZONES] = coupling - np.diag(coupling.sum(axis=1) + vent + h_as + params.h_ambient)
    a[:ZONES, ZONES:] = np.diag(h_as)
    a[ZONES:, :ZONES] = np.diag(h_as)
    a[ZONES:, ZONES:] = -np.diag(h_as)
    a[:ZONES] /= c_air[:, None]
    a[ZONES:] /= c_solid[:, None]

    b = np.zeros((2 * ZONES, ZONES))
    b[:ZONES] = np.diag(vent / c_air)

    e = np.zeros((2 * ZONES, 2))
    e[:ZONES, 0] = params.h_ambient / c_air
    e[ZONES:, 1] = np.asarray(params.solar_absorption) / c_solid
    return a, b, e


class CabinPlant:
    """Plant at a fixed mass flow; caches the model matrices across steps."""

    def __init__(self, params: PlantParams, m_dot: float):
        self.params = params
        self.m_dot = float(m_dot)
        self._a, self._b, self._e = continuous_matrices(params, self.m_dot)

    def step(
        self,
        state: PlantState,
        t_mix: Sequence[float],
        disturbance: Tuple[float, float],
        dt: float,
        t: float = 0.0,
    ) -> PlantState:
        """One explicit-Euler step of length dt seconds."""
        if not 0 < dt <= 2.0:
            raise ValueError(f"dt must lie in (0, 2] s, got {dt}")
        x = state.vector()
        rate = self._a @ x + self._b @ np.asarray(t_mix, dtype=float) + self._e @ np.asarray(disturbance, dtype=float)
        x_next = x + dt * rate
        if not np.all(np.isfinite(x_next)) or np.any(x_next < ENVELOPE[0]) or np.any(x_next > ENVELOPE[1]):
            raise PlantBlowUpError(t + dt, x_next)
        return PlantState.from_vector(x_next)


def step(
    state: PlantState,
    t_mix: Sequence[float],
    m_dot: float,
    disturbance: Tuple[float, float],
    params: PlantParams,
    dt: float,
    t: float = 0.0,
) -> PlantState:
    """
    Advance the cabin by one explicit-Euler step.

    Args:
        state: Current temperatures.
        t_mix: Mixing temperature per zone (K).
        m_dot: Blower mass flow (kg/h).
        disturbance: (ambient temperature in K, solar irradiation in W).
        params: Plant parameters.
        dt: Step length in seconds, at most 2 s.
        t: Current time, reported on blow-up.

    Raises:
        PlantBlowUpError: if any temperature leaves [240, 340] K.
    """
    return CabinPlant(params, m_dot).step(state, t_mix, disturbance, dt, t)


def sample_mismatch(seed: int, spread: float = 0.3) -> MismatchSample:
    """Uniform factors in [1 - spread, 1 + spread] for every mismatch parameter group."""
    rng = np.random.default_rng(seed)
    factors = {name: float(rng.uniform(1.0 - spread, 1.0 + spread)) for name in MISMATCH_FIELDS}
    return MismatchSample(factors, spread)


def sample_disturbance(catalog: Sequence[DisturbanceTrajectory], seed: int) -> DisturbanceTrajectory:
    """Uniformly select one trajectory from the catalog."""
    if not catalog:
        raise ConfigError("disturbance catalog is empty")
    rng = np.random.default_rng(seed)
    return catalog[int(rng.integers(len(catalog)))]
