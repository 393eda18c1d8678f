"""Core data models for mpc_tune."""

from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

PARAM_NAMES = ("log_lambda", "log_lambda0")
PRESETS = {"robust": 0.93, "non-robust": 0.5}
TARGETS = ("objective", "constraint")
SPREADS = ("combined", "latent")

_BOUND_TOL = 1e-9


@dataclass
class Dataset:
    """Evaluated parameters with their objective, constraint and context values."""

    params: List[Tuple[float, ...]] = field(default_factory=list)
    objectives: List[float] = field(default_factory=list)
    constraints: List[float] = field(default_factory=list)
    contexts: List[float] = field(default_factory=list)
    theta_bounds: Optional[Tuple[Tuple[float, ...], Tuple[float, ...]]] = None
    context_bounds: Optional[Tuple[float, float]] = None

    def __post_init__(self):
        """Validate row counts and box membership."""
        lengths = {len(self.params), len(self.objectives), len(self.constraints), len(self.contexts)}
        if len(lengths) != 1:
            raise ValueError(
                "Dataset columns must have equal length, got "
                f"params={len(self.params)}, objectives={len(self.objectives)}, "
                f"constraints={len(self.constraints)}, contexts={len(self.contexts)}"
            )
        self.params = [tuple(float(v) for v in p) for p in self.params]
        self.objectives = [float(v) for v in self.objectives]
        self.constraints = [float(v) for v in self.constraints]
        self.contexts = [float(v) for v in self.contexts]
        if self.theta_bounds is not None:
            lo, hi = self.theta_bounds
            self.theta_bounds = (tuple(float(v) for v in lo), tuple(float(v) for v in hi))
        if self.context_bounds is not None:
            self.context_bounds = (float(self.context_bounds[0]), float(self.context_bounds[1]))
        for theta, s in zip(self.params, self.contexts):
            self._check_point(theta, s)

    def __len__(self) -> int:
        return len(self.params)

    @property
    def dim(self) -> int:
        """Number of tuned parameters."""
        if self.theta_bounds is not None:
            return len(self.theta_bounds[0])
        return len(self.params[0]) if self.params else 0

    def _check_point(self, theta: Sequence[float], s: float) -> None:
        if self.theta_bounds is not None:
            lo, hi = self.theta_bounds
            if len(theta) != len(lo):
                raise ValueError(f"parameter {tuple(theta)} has dimension {len(theta)}, expected {len(lo)}")
            for value, low, high in zip(theta, lo, hi):
                if value < low - _BOUND_TOL or value > high + _BOUND_TOL:
                    raise ValueError(f"parameter {tuple(theta)} outside box [{lo}, {hi}]")
        if self.context_bounds is not None:
            low, high = self.context_bounds
            if s < low - _BOUND_TOL or s > high + _BOUND_TOL:
                raise ValueError(f"context {s} outside [{low}, {high}]")

    def add(self, theta: Sequence[float], s: float, j: float, g: float) -> None:
        """Append one evaluation."""
        theta = tuple(float(v) for v in theta)
        self._check_point(theta, float(s))
        if not (np.isfinite(j) and np.isfinite(g)):
            raise ValueError(f"non-finite evaluation j={j}, g={g} cannot enter the dataset")
        self.params.append(theta)
        self.contexts.append(float(s))
        self.objectives.append(float(j))
        self.constraints.append(float(g))

    def inputs(self) -> np.ndarray:
        """Joint (theta, s) inputs as an (n, d + 1) array."""
        if not self.params:
            return np.empty((0, self.dim + 1))
        return np.column_stack([np.asarray(self.params, dtype=float), np.asarray(self.contexts, dtype=float)])

    def targets(self, selector: str) -> np.ndarray:
        """Objective or constraint column."""
        if selector == "objective":
            return np.asarray(self.objectives, dtype=float)
        if selector == "constraint":
            return np.asarray(self.constraints, dtype=float)
        raise ValueError(f"Unknown target selector '{selector}'. Supported: {', '.join(TARGETS)}")

    def input_bounds(self) -> Optional[Tuple[np.ndarray, np.ndarray]]:
        """Joint (theta, s) box, if both boxes are known."""
        if self.theta_bounds is None or self.context_bounds is None:
            return None
        lo = np.append(np.asarray(self.theta_bounds[0], dtype=float), self.context_bounds[0])
        hi = np.append(np.asarray(self.theta_bounds[1], dtype=float), self.context_bounds[1])
        return lo, hi

    def copy(self) -> "Dataset":
        return Dataset(
            params=list(self.params),
            objectives=list(self.objectives),
            constraints=list(self.constraints),
            contexts=list(self.contexts),
            theta_bounds=self.theta_bounds,
            context_bounds=self.context_bounds,
        )


@dataclass
class HyperPrior:
    """Hyper-prior and MAP search settings for the GP surrogates (normalized units)."""

    length_scale_box: Tuple[float, float] = (0.05, 2.0)
    box_softness: float = 0.25  # width of the smooth box edges in log length-scale units
    signal_variance_bounds: Tuple[float, float] = (1e-2, 1e2)
    noise_floor: float = 1e-8
    noise_max: float = 1.0
    prior_mean_bounds: Tuple[float, float] = (-3.0, 3.0)
    n_restarts: int = 8
    jitter_min: float = 1e-10
    jitter_max: float = 1e-4
    standardize_targets: bool = True

    def __post_init__(self):
        low, high = self.length_scale_box
        if not 0 < low < high:
            raise ValueError(f"length_scale_box must satisfy 0 < low < high, got {self.length_scale_box}")
        if self.noise_floor <= 0 or self.noise_floor >= self.noise_max:
            raise ValueError(f"noise_floor must lie in (0, noise_max), got {self.noise_floor}")
        if self.n_restarts < 1:
            raise ValueError(f"n_restarts must be >= 1, got {self.n_restarts}")
        if not 0 < self.jitter_min <= self.jitter_max:
            raise ValueError("jitter bounds must satisfy 0 < jitter_min <= jitter_max")


@dataclass
class AcquisitionConfig:
    """Settings of the constrained max-value entropy search and its optimizer."""

    n_min_value_samples: int = 10
    n_random_candidates: int = 1000
    n_local_refinements: int = 5
    feasibility_floor: float = 0.05
    n_gumbel_candidates: int = 512
    fd_step: float = 1e-4

    def __post_init__(self):
        for name in ("n_min_value_samples", "n_random_candidates", "n_local_refinements", "n_gumbel_candidates"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not 0 < self.feasibility_floor <= 0.5:
            raise ValueError(f"feasibility_floor must lie in (0, 0.5], got {self.feasibility_floor}")
        if self.fd_step <= 0:
            raise ValueError(f"fd_step must be positive, got {self.fd_step}")


@dataclass
class TuningConfig:
    """Problem definition and budget of one contextual tuning run."""

    theta_min: Tuple[float, ...] = (-2.0, -2.0)
    theta_max: Tuple[float, ...] = (3.0, 3.0)
    s_min: float = 50.0
    s_max: float = 150.0
    g_max: float = 0.05
    delta: float = 0.93
    budget: int = 500
    n_initial: int = 10
    gamma: Optional[float] = None  # None selects the smallest gamma meeting max_curvature
    max_curvature: float = 0.1  # fraction of the box width allowed per second difference
    n_grid: int = 21
    seed: int = 0
    constraint_spread: str = "combined"
    param_names: Tuple[str, ...] = PARAM_NAMES
    acquisition: AcquisitionConfig = field(default_factory=AcquisitionConfig)
    gp: HyperPrior = field(default_factory=HyperPrior)

    def __post_init__(self):
        """Normalize and validate configuration values."""
        self.theta_min = tuple(float(v) for v in self.theta_min)
        self.theta_max = tuple(float(v) for v in self.theta_max)
        self.param_names = tuple(self.param_names)
        if len(self.theta_min) != len(self.theta_max):
            raise ValueError("theta_min and theta_max must have the same length")
        if len(self.param_names) != len(self.theta_min):
            raise ValueError("param_names must name every tuned parameter")
        if any(lo >= hi for lo, hi in zip(self.theta_min, self.theta_max)):
            raise ValueError(f"theta_min must be < theta_max componentwise, got {self.theta_min} / {self.theta_max}")
        if not self.s_min < self.s_max:
            raise ValueError(f"s_min must be < s_max, got {self.s_min} / {self.s_max}")
        if not 0 < self.delta < 1:
            raise ValueError(f"delta must lie in (0, 1), got {self.delta}")
        if self.n_initial < 2:
            raise ValueError(f"n_initial must be >= 2, got {self.n_initial}")
        if self.budget < self.n_initial:
            raise ValueError(f"budget ({self.budget}) must be >= n_initial ({self.n_initial})")
        if self.gamma is not None and self.gamma < 0:
            raise ValueError(f"gamma must be non-negative, got {self.gamma}")
        if self.n_grid < 3:
            raise ValueError(f"n_grid must be >= 3, got {self.n_grid}")
        if self.constraint_spread not in SPREADS:
            raise ValueError(f"constraint_spread must be one of {SPREADS}, got '{self.constraint_spread}'")

    @property
    def dim(self) -> int:
        return len(self.theta_min)

    @property
    def bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        """Parameter box as arrays."""
        return np.asarray(self.theta_min, dtype=float), np.asarray(self.theta_max, dtype=float)

    @property
    def context_bounds(self) -> Tuple[float, float]:
        return (float(self.s_min), float(self.s_max))

    def empty_dataset(self) -> Dataset:
        """A dataset bound to this configuration's boxes."""
        return Dataset(theta_bounds=(self.theta_min, self.theta_max), context_bounds=self.context_bounds)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class Policy:
    """Discretized parameter schedule over a context grid."""

    grid: np.ndarray
    params: np.ndarray
    delta: float
    gamma: float
    feasibility: Optional[np.ndarray] = None
    param_names: Tuple[str, ...] = PARAM_NAMES

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=float).reshape(-1)
        self.params = np.asarray(self.params, dtype=float)
        if self.params.ndim == 1:
            self.params = self.params.reshape(-1, 1)
        if self.params.shape[0] != self.grid.size:
            raise ValueError(f"policy has {self.grid.size} grid points but {self.params.shape[0]} parameter rows")
        if self.grid.size >= 2 and np.any(np.diff(self.grid) <= 0):
            raise ValueError("policy grid must be strictly increasing")
        if self.feasibility is not None:
            self.feasibility = np.asarray(self.feasibility, dtype=float).reshape(-1)
            if self.feasibility.size != self.grid.size:
                raise ValueError("feasibility must have one entry per grid point")
        self.param_names = tuple(self.param_names)
        if len(self.param_names) != self.params.shape[1]:
            self.param_names = tuple(f"theta{i + 1}" for i in range(self.params.shape[1]))

    def __len__(self) -> int:
        return self.grid.size

    def second_differences(self) -> np.ndarray:
        """theta[n+2] - 2 theta[n+1] + theta[n], shape (N - 2, d)."""
        if self.grid.size < 3:
            return np.zeros((0, self.params.shape[1]))
        return self.params[2:] - 2.0 * self.params[1:-1] + self.params[:-2]

    def max_second_difference(self, width: Optional[np.ndarray] = None) -> float:
        """Largest absolute second difference, optionally relative to the box width."""
        diffs = np.abs(self.second_differences())
        if diffs.size == 0:
            return 0.0
        if width is not None:
            diffs = diffs / np.asarray(width, dtype=float)
        return float(diffs.max())

    def max_jump(self, width: Optional[np.ndarray] = None) -> float:
        """Largest absolute change between adjacent grid points."""
        jumps = np.abs(np.diff(self.params, axis=0))
        if jumps.size == 0:
            return 0.0
        if width is not None:
            jumps = jumps / np.asarray(width, dtype=float)
        return float(jumps.max())


@dataclass
class EpisodeSpec:
    """Reference schedule and timing of the simulated training episode."""

    horizon: float = 600.0
    settle_time: float = 120.0
    initial_reference: Tuple[float, ...] = (295.15, 295.15, 295.15)
    steps: Tuple[Tuple[float, Tuple[float, ...]], ...] = (
        (120.0, (298.15, 298.15, 295.15)),
        (360.0, (297.15, 299.15, 295.15)),
    )
    settle_band: float = 0.1
    control_interval: float = 2.0
    plant_dt: float = 0.5
    tracked_zones: Tuple[int, ...] = (0, 1)

    def __post_init__(self):
        self.initial_reference = tuple(float(v) for v in self.initial_reference)
        self.steps = tuple((float(t), tuple(float(v) for v in ref)) for t, ref in self.steps)
        self.tracked_zones = tuple(int(z) for z in self.tracked_zones)
        if len(self.steps) < 2:
            raise ValueError(f"episode needs at least 2 reference steps, got {len(self.steps)}")
        times = [t for t, _ in self.steps]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError(f"step times must be strictly increasing, got {times}")
        if times[0] < self.settle_time:
            raise ValueError("first reference step must not precede the observer settle phase")
        if times[-1] >= self.horizon:
            raise ValueError("all reference steps must lie inside the horizon")
        n_zones = len(self.initial_reference)
        if any(len(ref) != n_zones for _, ref in self.steps):
            raise ValueError("every step must give one reference per zone")
        if self.settle_band <= 0:
            raise ValueError(f"settle_band must be positive, got {self.settle_band}")
        if not 0 < self.plant_dt <= 2.0:
            raise ValueError(f"plant_dt must lie in (0, 2] s, got {self.plant_dt}")
        ratio = self.control_interval / self.plant_dt
        if self.control_interval <= 0 or abs(ratio - round(ratio)) > 1e-9:
            raise ValueError("control_interval must be a positive multiple of plant_dt")

    @property
    def substeps(self) -> int:
        """Plant steps per control interval."""
        return int(round(self.control_interval / self.plant_dt))

    def reference_at(self, t: float) -> np.ndarray:
        """Piecewise-constant per-zone reference."""
        ref = self.initial_reference
        for step_time, step_ref in self.steps:
            if t >= step_time:
                ref = step_ref
        return np.asarray(ref, dtype=float)

    def windows(self) -> List[Tuple[float, float, np.ndarray, np.ndarray]]:
        """(start, end, reference before, reference after) for each step."""
        result = []
        previous = np.asarray(self.initial_reference, dtype=float)
        for idx, (start, ref) in enumerate(self.steps):
            end = self.steps[idx + 1][0] if idx + 1 < len(self.steps) else self.horizon
            after = np.asarray(ref, dtype=float)
            result.append((start, end, previous, after))
            previous = after
        return result


@dataclass
class EpisodeOutcome:
    """Trajectories and scalar metrics of one closed-loop episode."""

    times: np.ndarray
    t_air: np.ndarray
    t_ref: np.ndarray
    t_mix: np.ndarray
    settling_times: np.ndarray
    overshoots: np.ndarray
    j_value: float
    g_value: float
    context: float
    failed: bool = False
    failure_reason: Optional[str] = None

    def to_dict(self) -> Dict[str, Any]:
        """Scalar summary for reports."""
        return {
            "context": self.context,
            "j": self.j_value,
            "g": self.g_value,
            "settling_times": np.asarray(self.settling_times).tolist(),
            "overshoots": np.asarray(self.overshoots).tolist(),
            "failed": self.failed,
            "failure_reason": self.failure_reason,
        }


@dataclass
class OracleTable:
    """Context-wise true constrained optimum of a synthetic problem."""

    grid: np.ndarray
    params: np.ndarray
    values: np.ndarray
    feasible: np.ndarray

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=float).reshape(-1)
        self.params = np.atleast_2d(np.asarray(self.params, dtype=float))
        self.values = np.asarray(self.values, dtype=float).reshape(-1)
        self.feasible = np.asarray(self.feasible, dtype=bool).reshape(-1)
        if not (self.params.shape[0] == self.values.size == self.feasible.size == self.grid.size):
            raise ValueError("oracle columns must have one entry per grid point")

    def __len__(self) -> int:
        return self.grid.size
