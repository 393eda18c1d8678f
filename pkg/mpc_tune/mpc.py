"""
Linear MPC for the cabin with move-suppression tuning and an input-disturbance observer.

Cost over the prediction horizon N2 (squared weighted norms):

    sum_p ||T_p - T_ref,p||_q + ||dT_mix,p||_lambda_p

where the first move is measured against the previously applied command. The move
weights of the two front zones are (lambda0, lambda, ..., lambda); the rear zone row
is fixed to 1, so the rear zone cannot be tuned.
"""

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy import linalg

from mpc_tune.plant import ZONES, PlantParams, continuous_matrices

logger = logging.getLogger(__name__)

TUNED_ROWS = 2
DISCRETIZATIONS = ("exact", "euler")


@dataclass
class MpcParams:
    """Weights, horizon and input box of the controller."""

    lam: float = 1.0
    lam0: float = 1.0
    n2: int = 20
    q: Tuple[float, ...] = (1.0, 1.0, 1.0)
    t_mix_bounds: Tuple[float, float] = (273.15, 333.15)
    control_interval: float = 2.0
    max_iterations: int = 500

    def __post_init__(self):
        if not (self.lam > 0 and self.lam0 > 0):
            raise ValueError(f"lambda and lambda0 must be positive, got {self.lam} / {self.lam0}")
        if self.n2 < 2:
            raise ValueError(f"prediction horizon n2 must be >= 2, got {self.n2}")
        self.q = tuple(float(v) for v in self.q)
        if any(v < 0 for v in self.q):
            raise ValueError(f"tracking weights q must be non-negative, got {self.q}")
        low, high = self.t_mix_bounds
        if not low < high:
            raise ValueError(f"t_mix_bounds must satisfy low < high, got {self.t_mix_bounds}")
        if self.control_interval <= 0:
            raise ValueError(f"control_interval must be positive, got {self.control_interval}")

    def move_weights(self, n_inputs: int) -> np.ndarray:
        """(n2, n_inputs) move-suppression weights; tuned rows first, untuned rows fixed to 1."""
        weights = np.ones((self.n2, n_inputs))
        rows = min(n_inputs, TUNED_ROWS)
        weights[:, :rows] = self.lam
        weights[0, :rows] = self.lam0
        return weights

    @classmethod
    def from_theta(cls, theta: Sequence[float], **kwargs) -> "MpcParams":
        vector = TuningVector(theta)
        return cls(lam=vector.lam, lam0=vector.lam0, **kwargs)


@dataclass(frozen=True)
class TuningVector:
    """theta = (log10 lambda, log10 lambda0)."""

    theta: Tuple[float, float]

    def __post_init__(self):
        theta = tuple(float(v) for v in self.theta)
        if len(theta) != 2 or not all(np.isfinite(theta)):
            raise ValueError(f"tuning vector needs two finite entries, got {self.theta}")
        object.__setattr__(self, "theta", theta)

    @property
    def lam(self) -> float:
        return 10.0 ** self.theta[0]

    @property
    def lam0(self) -> float:
        return 10.0 ** self.theta[1]


@dataclass
class LinearModel:
    """Discrete model x+ = A x + B t_mix + E [t_ambient, q_solar]; outputs y = C x."""

    a: np.ndarray
    b: np.ndarray
    e: np.ndarray
    c: np.ndarray
    dt: float
    m_dot: float = float("nan")

    @property
    def n_states(self) -> int:
        return self.a.shape[0]

    @property
    def n_inputs(self) -> int:
        return self.b.shape[1]

    @property
    def n_outputs(self) -> int:
        return self.c.shape[0]

    def spectral_radius(self) -> float:
        return float(np.max(np.abs(np.linalg.eigvals(self.a))))

    def step(self, x: np.ndarray, u: np.ndarray, w: np.ndarray, d: Optional[np.ndarray] = None) -> np.ndarray:
        """One-step prediction, optionally with an output-space input disturbance d."""
        x_next = self.a @ x + self.b @ u + self.e @ w
        if d is not None:
            x_next = x_next + self.c.T @ d
        return x_next


def linearize(params: PlantParams, m_dot: float, dt: float = 2.0, discretization: str = "exact") -> LinearModel:
    """
    Discretize the nominal cabin model at a constant mass flow.

    The cabin model is linear for a fixed mass flow, so one model per episode suffices.

    Args:
        params: Nominal (mismatch-free) plant parameters.
        m_dot: Mass flow in kg/h.
        dt: Sampling interval in seconds.
        discretization: "exact" (zero-order hold via the matrix exponential) or
            "euler" (identical to ``plant.step`` at the same step size).
    """
    a_c, b_c, e_c = continuous_matrices(params, m_dot)
    n, m = a_c.shape[0], b_c.shape[1] + e_c.shape[1]
    if discretization == "exact":
        augmented = np.zeros((n + m, n + m))
        augmented[:n, :n] = a_c
        augmented[:n, n:] = np.hstack([b_c, e_c])
        phi = linalg.expm(augmented * dt)
        a, gamma = phi[:n, :n], phi[:n, n:]
    elif discretization == "euler":
        a, gamma = np.eye(n) + dt * a_c, dt * np.hstack([b_c, e_c])
    else:
        raise ValueError(f"Unknown discretization '{discretization}'. Supported: {', '.join(DISCRETIZATIONS)}")
    c = np.hstack([np.eye(ZONES), np.zeros((ZONES, n - ZONES))])
    return LinearModel(a, gamma[:, : b_c.shape[1]], gamma[:, b_c.shape[1] :], c, dt, float(m_dot))


@dataclass
class ObserverState:
    """Per-zone input-disturbance estimates (K per control step) and the fixed filter gain."""

    estimates: np.ndarray = field(default_factory=lambda: np.zeros(ZONES))
    gain: float = 0.1

    def __post_init__(self):
        self.estimates = np.asarray(self.estimates, dtype=float).reshape(-1)
        if not 0 < self.gain <= 1:
            raise ValueError(f"observer gain must lie in (0, 1], got {self.gain}")


def observe(observer: ObserverState, measured: np.ndarray, prediction: np.ndarray) -> ObserverState:
    """
    First-order update d <- d + gain * (e - d), e = measured - disturbance-free prediction.

    A constant prediction error e is approached geometrically with rate (1 - gain).
    """
    measured = np.asarray(measured, dtype=float)
    prediction = np.asarray(prediction, dtype=float)
    if not (np.all(np.isfinite(measured)) and np.all(np.isfinite(prediction))):
        raise ValueError("observer inputs must be finite")
    error = measured - prediction
    estimates = observer.estimates + observer.gain * (error - observer.estimates)
    return ObserverState(estimates, observer.gain)


def _solve_box_qp(
    h: np.ndarray,
    f: np.ndarray,
    lower: np.ndarray,
    upper: np.ndarray,
    start: np.ndarray,
    max_iterations: int,
) -> Tuple[np.ndarray, bool]:
    """
    Primal active-set method for min 0.5 x'Hx + f'x subject to lower <= x <= upper.

    Returns the iterate and whether the optimality conditions were met.
    """
    x = np.clip(start, lower, upper)
    at_lower = np.zeros(x.size, dtype=bool)
    at_upper = np.zeros(x.size, dtype=bool)
    tol = 1e-10 * max(1.0, float(np.max(np.abs(f))))
    for _ in range(max_iterations):
        free = ~(at_lower | at_upper)
        target = x.copy()
        if np.any(free):
            rhs = -(f[free] + h[np.ix_(free, ~free)] @ x[~free])
            target[free] = np.linalg.solve(h[np.ix_(free, free)], rhs)
        direction = target - x

        steps = np.full(x.size, np.inf)
        down = free & (direction < 0)
        up = free & (direction > 0)
        steps[down] = (lower[down] - x[down]) / direction[down]
        steps[up] = (upper[up] - x[up]) / direction[up]
        blocking = int(np.argmin(steps))
        if steps[blocking] < 1.0:
            x = x + steps[blocking] * direction
            if direction[blocking] < 0:
                x[blocking], at_lower[blocking] = lower[blocking], True
            else:
                x[blocking], at_upper[blocking] = upper[blocking], True
            continue

        x = target
        gradient = h @ x + f
        violation = np.where(at_lower, -gradient, 0.0) + np.where(at_upper, gradient, 0.0)
        worst = int(np.argmax(violation))
        if violation[worst] <= tol:
            return np.clip(x, lower, upper), True
        at_lower[worst] = at_upper[worst] = False
    return np.clip(x, lower, upper), False


class MpcController:
    """Condensed MPC over a fixed linear model; one instance per episode."""

    def __init__(self, params: MpcParams, model: LinearModel):
        self.params = params
        self.model = model
        n2, nu, ny = params.n2, model.n_inputs, model.n_outputs
        if len(params.q) != ny:
            raise ValueError(f"q needs {ny} entries, got {len(params.q)}")

        # outputs y_1..y_n2 as functions of x0, the inputs and the constant forcing
        powers = [np.eye(model.n_states)]
        for _ in range(n2):
            powers.append(model.a @ powers[-1])
        self._free_x = np.vstack([model.c @ powers[p] for p in range(1, n2 + 1)])
        sums = np.cumsum(np.stack(powers[:n2]), axis=0)
        self._free_c = np.vstack([model.c @ sums[p - 1] for p in range(1, n2 + 1)])
        self._su = np.zeros((n2 * ny, n2 * nu))
        for p in range(1, n2 + 1):
            for i in range(p):
                self._su[(p - 1) * ny : p * ny, i * nu : (i + 1) * nu] = model.c @ powers[p - 1 - i] @ model.b

        self._diff = np.eye(n2 * nu) - np.eye(n2 * nu, k=-nu)
        self._first = np.zeros((n2 * nu, nu))
        self._first[:nu] = np.eye(nu)
        self._q = np.tile(np.asarray(params.q, dtype=float), n2)
        self._lam = params.move_weights(nu).reshape(-1)

        self._h = self._su.T @ (self._q[:, None] * self._su) + self._diff.T @ (self._lam[:, None] * self._diff)
        self._h = 0.5 * (self._h + self._h.T)
        self._h_factor = linalg.cho_factor(self._h)
        low, high = params.t_mix_bounds
        self._lower = np.full(n2 * nu, low)
        self._upper = np.full(n2 * nu, high)
        self._warm: Optional[np.ndarray] = None
        self.degraded_steps = 0
        self.last_cost: float = 0.0

    def _linear_term(self, x: np.ndarray, forcing: np.ndarray, reference: np.ndarray, previous: np.ndarray) -> np.ndarray:
        offset = self._free_x @ x + self._free_c @ forcing - reference
        return self._su.T @ (self._q * offset) - self._diff.T @ (self._lam * (self._first @ previous))

    def _reference(self, t_ref: np.ndarray) -> np.ndarray:
        t_ref = np.asarray(t_ref, dtype=float)
        ny = self.model.n_outputs
        if t_ref.ndim == 1:
            return np.tile(t_ref.reshape(ny), self.params.n2)
        if t_ref.shape[0] < self.params.n2:
            t_ref = np.vstack([t_ref, np.repeat(t_ref[-1:], self.params.n2 - t_ref.shape[0], axis=0)])
        return t_ref[: self.params.n2].reshape(-1)

    def solve(
        self,
        state: np.ndarray,
        disturbance_estimate: np.ndarray,
        t_ref: np.ndarray,
        previous: np.ndarray,
        measured_disturbance: Optional[Sequence[float]] = None,
    ) -> np.ndarray:
        """
        First move of the optimal input sequence.

        Args:
            state: Estimated model state.
            disturbance_estimate: Observer estimates, held constant over the horizon.
            t_ref: Reference, one row per zone or (n2, zones) trajectory.
            previous: Previously applied command.
            measured_disturbance: Current (t_ambient, q_solar), held over the horizon.

        Returns:
            Mixing-temperature command; the previous command if the solver degrades.
        """
        nu = self.model.n_inputs
        previous = np.asarray(previous, dtype=float).reshape(nu)
        w = np.zeros(self.model.e.shape[1]) if measured_disturbance is None else np.asarray(measured_disturbance, float)
        forcing = self.model.e @ w + self.model.c.T @ np.asarray(disturbance_estimate, dtype=float)
        f = self._linear_term(np.asarray(state, dtype=float), forcing, self._reference(t_ref), previous)

        hold = np.tile(np.clip(previous, self._lower[:nu], self._upper[:nu]), self.params.n2)
        solution = linalg.cho_solve(self._h_factor, -f)
        converged = True
        if np.any(solution < self._lower) or np.any(solution > self._upper):
            start = hold if self._warm is None else self._warm
            solution, converged = _solve_box_qp(
                self._h, f, self._lower, self._upper, start, self.params.max_iterations
            )
        if not converged:
            self.degraded_steps += 1
            logger.warning(
                "MPC QP did not converge in %d iterations; holding previous command", self.params.max_iterations
            )
            self._warm = None
            return previous.copy()

        def cost(u: np.ndarray) -> float:
            return float(0.5 * u @ self._h @ u + f @ u)

        if cost(solution) > cost(hold):
            solution = hold
        self.last_cost = cost(solution)
        self._warm = np.concatenate([solution[nu:], solution[-nu:]])
        return solution[:nu].copy()


def solve(
    params: MpcParams,
    model: LinearModel,
    state: np.ndarray,
    disturbance_estimate: np.ndarray,
    t_ref: np.ndarray,
    previous: np.ndarray,
    measured_disturbance: Optional[Sequence[float]] = None,
) -> np.ndarray:
    """Single MPC solve; see ``MpcController.solve``."""
    controller = MpcController(params, model)
    return controller.solve(state, disturbance_estimate, t_ref, previous, measured_disturbance)
