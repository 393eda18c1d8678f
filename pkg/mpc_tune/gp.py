"""
Gaussian-process surrogates over the joint (theta, s) space.

Inputs are normalized to the unit hypercube and targets standardized internally;
hyperparameters live in those normalized units while predictions are returned in
original units. The kernel is an anisotropic squared exponential with a constant
prior mean and homoscedastic Gaussian noise. Hyperparameters are found by MAP
estimation: log marginal likelihood plus a smooth box hyper-prior on the length
scales, maximized by multi-start L-BFGS-B.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Protocol, Sequence, Tuple

import numpy as np
from scipy import linalg, optimize
from scipy.special import expit

from mpc_tune.errors import IllConditionedKernelError
from mpc_tune.models import Dataset, HyperPrior

logger = logging.getLogger(__name__)

_LOG_2PI = float(np.log(2.0 * np.pi))
_FAILED_OBJECTIVE = 1e25


class Surrogate(Protocol):
    """What the acquisition and smoothing code needs from a fitted model."""

    def predict_batch(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Latent posterior mean and standard deviation at (m, d + 1) points."""
        ...

    def predict_noisy_std_batch(self, points: np.ndarray) -> np.ndarray:
        """Predictive spread of a new noisy observation at (m, d + 1) points."""
        ...


@dataclass(frozen=True)
class GpHyperparams:
    """Kernel hyperparameters in normalized units."""

    signal_variance: float
    length_scales: Tuple[float, ...]
    noise_variance: float
    prior_mean: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "length_scales", tuple(float(v) for v in self.length_scales))
        if not (np.isfinite(self.signal_variance) and self.signal_variance > 0):
            raise ValueError(f"signal_variance must be positive, got {self.signal_variance}")
        if not self.length_scales or any(not (np.isfinite(v) and v > 0) for v in self.length_scales):
            raise ValueError(f"length scales must be positive, got {self.length_scales}")
        if not (np.isfinite(self.noise_variance) and self.noise_variance > 0):
            raise ValueError(f"noise_variance must be positive, got {self.noise_variance}")
        if not np.isfinite(self.prior_mean):
            raise ValueError(f"prior_mean must be finite, got {self.prior_mean}")

    def to_vector(self) -> np.ndarray:
        """[log sf2, log l_1..l_D, log sn2, mean]."""
        return np.concatenate(
            [
                [np.log(self.signal_variance)],
                np.log(self.length_scales),
                [np.log(self.noise_variance), self.prior_mean],
            ]
        )

    @classmethod
    def from_vector(cls, vector: np.ndarray) -> "GpHyperparams":
        vector = np.asarray(vector, dtype=float)
        return cls(
            signal_variance=float(np.exp(vector[0])),
            length_scales=tuple(np.exp(vector[1:-2])),
            noise_variance=float(np.exp(vector[-2])),
            prior_mean=float(vector[-1]),
        )

    def to_dict(self) -> dict:
        return {
            "signal_variance": self.signal_variance,
            "length_scales": list(self.length_scales),
            "noise_variance": self.noise_variance,
            "prior_mean": self.prior_mean,
        }


def se_kernel(xa: np.ndarray, xb: np.ndarray, signal_variance: float, length_scales: Sequence[float]) -> np.ndarray:
    """Anisotropic squared-exponential covariance between two point sets."""
    diff = (xa[:, None, :] - xb[None, :, :]) / np.asarray(length_scales, dtype=float)
    return signal_variance * np.exp(-0.5 * np.sum(diff**2, axis=-1))


def _cholesky(gram: np.ndarray, jitter_min: float, jitter_max: float, length_scales) -> Tuple[np.ndarray, float]:
    """Lower Cholesky factor, escalating diagonal jitter on failure."""
    try:
        return linalg.cholesky(gram, lower=True), 0.0
    except (linalg.LinAlgError, ValueError):
        pass
    eye = np.eye(gram.shape[0])
    jitter = jitter_min
    while jitter <= jitter_max * (1 + 1e-12):
        try:
            factor = linalg.cholesky(gram + jitter * eye, lower=True)
            logger.debug("Cholesky succeeded with jitter %.1e (n=%d)", jitter, gram.shape[0])
            return factor, jitter
        except (linalg.LinAlgError, ValueError):
            jitter *= 10.0
    raise IllConditionedKernelError(gram.shape[0], length_scales, jitter_max)


def log_marginal_likelihood(
    vector: np.ndarray,
    inputs: np.ndarray,
    targets: np.ndarray,
    jitter: Tuple[float, float] = (1e-10, 1e-4),
) -> Tuple[float, np.ndarray]:
    """
    Log marginal likelihood and its gradient with respect to the hyperparameter vector.

    Args:
        vector: [log sf2, log l_1..l_D, log sn2, mean] (see GpHyperparams.to_vector).
        inputs: (n, D) normalized inputs.
        targets: (n,) standardized targets.
        jitter: Jitter escalation range for the Cholesky factorization.

    Returns:
        (value, gradient) with gradient shaped like ``vector``.
    """
    vector = np.asarray(vector, dtype=float)
    n, dims = inputs.shape
    signal_variance = np.exp(vector[0])
    length_scales = np.exp(vector[1 : 1 + dims])
    noise_variance = np.exp(vector[1 + dims])
    mean = vector[2 + dims]

    k_f = se_kernel(inputs, inputs, signal_variance, length_scales)
    factor, _ = _cholesky(k_f + noise_variance * np.eye(n), jitter[0], jitter[1], length_scales)
    resid = targets - mean
    alpha = linalg.cho_solve((factor, True), resid)
    value = -0.5 * resid @ alpha - np.sum(np.log(np.diag(factor))) - 0.5 * n * _LOG_2PI

    k_inv = linalg.cho_solve((factor, True), np.eye(n))
    w = np.outer(alpha, alpha) - k_inv
    wk = w * k_f
    grad = np.empty_like(vector)
    grad[0] = 0.5 * np.sum(wk)
    for d in range(dims):
        diff = (inputs[:, d][:, None] - inputs[:, d][None, :]) / length_scales[d]
        grad[1 + d] = 0.5 * np.sum(wk * diff**2)
    grad[1 + dims] = 0.5 * noise_variance * np.trace(w)
    grad[2 + dims] = np.sum(alpha)
    return float(value), grad


def log_hyper_prior(vector: np.ndarray, priors: HyperPrior) -> Tuple[float, np.ndarray]:
    """Smooth box prior on the log length scales: flat inside the box, soft outside."""
    vector = np.asarray(vector, dtype=float)
    log_ls = vector[1:-2]
    low, high = np.log(priors.length_scale_box[0]), np.log(priors.length_scale_box[1])
    width = priors.box_softness
    below = (low - log_ls) / width
    above = (log_ls - high) / width
    value = -np.sum(np.logaddexp(0.0, below)) - np.sum(np.logaddexp(0.0, above))
    grad = np.zeros_like(vector)
    grad[1:-2] = (expit(below) - expit(above)) / width
    return float(value), grad


class GpModel:
    """Fitted GP posterior; immutable after construction."""

    def __init__(
        self,
        hyperparams: GpHyperparams,
        inputs: np.ndarray,
        targets: np.ndarray,
        input_lower: np.ndarray,
        input_scale: np.ndarray,
        target_mean: float = 0.0,
        target_std: float = 1.0,
        priors: Optional[HyperPrior] = None,
    ):
        inputs = np.array(np.atleast_2d(inputs), dtype=float)
        targets = np.array(targets, dtype=float).reshape(-1)
        if inputs.shape[0] != targets.size:
            raise ValueError(f"{inputs.shape[0]} inputs but {targets.size} targets")
        if len(hyperparams.length_scales) != inputs.shape[1]:
            raise ValueError(
                f"{len(hyperparams.length_scales)} length scales for {inputs.shape[1]} input dimensions"
            )
        self.hyperparams = hyperparams
        self.priors = priors or HyperPrior()
        self.inputs = inputs
        self.targets = targets
        self.input_lower = np.asarray(input_lower, dtype=float)
        self.input_scale = np.asarray(input_scale, dtype=float)
        self.target_mean = float(target_mean)
        self.target_std = float(target_std)

        self._x = self._normalize(inputs)
        self._y = (targets - self.target_mean) / self.target_std
        gram = se_kernel(self._x, self._x, hyperparams.signal_variance, hyperparams.length_scales)
        gram += hyperparams.noise_variance * np.eye(self._x.shape[0])
        self._factor, self.jitter = _cholesky(
            gram, self.priors.jitter_min, self.priors.jitter_max, hyperparams.length_scales
        )
        self._alpha = linalg.cho_solve((self._factor, True), self._y - hyperparams.prior_mean)
        for array in (self.inputs, self.targets, self._x, self._y, self._factor, self._alpha):
            array.setflags(write=False)

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def dim(self) -> int:
        """Input dimension (parameters plus context)."""
        return self.inputs.shape[1]

    @property
    def noise_variance(self) -> float:
        """Observation noise variance in original target units."""
        return self.hyperparams.noise_variance * self.target_std**2

    @property
    def prior_mean(self) -> float:
        return self.target_mean + self.target_std * self.hyperparams.prior_mean

    @property
    def signal_variance(self) -> float:
        return self.hyperparams.signal_variance * self.target_std**2

    def _normalize(self, points: np.ndarray) -> np.ndarray:
        return (points - self.input_lower) / self.input_scale

    def _check_points(self, points) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=float))
        if points.shape[1] != self.dim:
            raise ValueError(f"points have dimension {points.shape[1]}, model expects {self.dim}")
        if not np.all(np.isfinite(points)):
            raise ValueError("prediction points must be finite")
        return points

    def predict_batch(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Latent posterior mean and standard deviation in original units."""
        x = self._normalize(self._check_points(points))
        hp = self.hyperparams
        cross = se_kernel(x, self._x, hp.signal_variance, hp.length_scales)
        mean = hp.prior_mean + cross @ self._alpha
        v = linalg.solve_triangular(self._factor, cross.T, lower=True)
        var = np.maximum(hp.signal_variance - np.sum(v**2, axis=0), 0.0)
        return self.target_mean + self.target_std * mean, self.target_std * np.sqrt(var)

    def predict_noisy_std_batch(self, points: np.ndarray) -> np.ndarray:
        _, std = self.predict_batch(points)
        return np.sqrt(std**2 + self.noise_variance)

    def predict(self, point: Sequence[float]) -> Tuple[float, float]:
        mean, std = self.predict_batch(np.asarray(point, dtype=float).reshape(1, -1))
        return float(mean[0]), float(std[0])

    def predict_noisy_std(self, point: Sequence[float]) -> float:
        return float(self.predict_noisy_std_batch(np.asarray(point, dtype=float).reshape(1, -1))[0])

    def log_marginal_likelihood(self) -> float:
        """Log marginal likelihood of the standardized targets under the fitted hyperparameters."""
        value, _ = log_marginal_likelihood(
            self.hyperparams.to_vector(), self._x, np.asarray(self._y),
            (self.priors.jitter_min, self.priors.jitter_max),
        )
        return value


def _normalization(dataset: Dataset, inputs: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    bounds = dataset.input_bounds()
    if bounds is not None:
        lower, upper = bounds
    else:
        lower, upper = inputs.min(axis=0), inputs.max(axis=0)
    scale = upper - lower
    scale = np.where(scale > 0, scale, 1.0)
    return lower, scale


def _search_bounds(dims: int, priors: HyperPrior):
    ls_low, ls_high = priors.length_scale_box
    return (
        [tuple(np.log(priors.signal_variance_bounds))]
        + [(np.log(ls_low / 10.0), np.log(ls_high * 10.0))] * dims
        + [(np.log(priors.noise_floor), np.log(priors.noise_max))]
        + [tuple(priors.prior_mean_bounds)]
    )


def _starting_points(dims: int, priors: HyperPrior, rng: np.random.Generator, initial: Optional[GpHyperparams]):
    ls_low, ls_high = np.log(priors.length_scale_box)
    noise_low = max(np.log(priors.noise_floor), np.log(1e-4))
    noise_high = min(np.log(priors.noise_max), np.log(1e-1))
    default = np.concatenate([[0.0], np.full(dims, np.log(0.3)), [np.log(max(1e-2, priors.noise_floor)), 0.0]])
    starts = [initial.to_vector() if initial is not None else default]
    for _ in range(priors.n_restarts - 1):
        starts.append(
            np.concatenate(
                [
                    [rng.uniform(np.log(0.3), np.log(3.0))],
                    rng.uniform(ls_low, ls_high, size=dims),
                    [rng.uniform(noise_low, noise_high)],
                    [0.0],
                ]
            )
        )
    return starts


def _map_estimate(
    x: np.ndarray, y: np.ndarray, priors: HyperPrior, seed: int, initial: Optional[GpHyperparams]
) -> GpHyperparams:
    dims = x.shape[1]
    bounds = _search_bounds(dims, priors)
    jitter = (priors.jitter_min, priors.jitter_max)
    # length scales of the most recent failed factorization
    failed_length_scales = []

    def negative_posterior(vector):
        try:
            lml, lml_grad = log_marginal_likelihood(vector, x, y, jitter)
        except IllConditionedKernelError as e:
            failed_length_scales[:] = e.length_scales
            return _FAILED_OBJECTIVE, np.zeros_like(vector)
        prior, prior_grad = log_hyper_prior(vector, priors)
        return -(lml + prior), -(lml_grad + prior_grad)

    rng = np.random.default_rng(seed)
    best_value, best_vector = np.inf, None
    start = None
    for start in _starting_points(dims, priors, rng, initial):
        start = np.clip(start, [b[0] for b in bounds], [b[1] for b in bounds])
        result = optimize.minimize(
            negative_posterior, start, jac=True, method="L-BFGS-B", bounds=bounds, options={"maxiter": 200}
        )
        if np.isfinite(result.fun) and result.fun < best_value:
            best_value, best_vector = float(result.fun), result.x
    if best_vector is None or best_value >= _FAILED_OBJECTIVE:
        length_scales = failed_length_scales or np.exp(np.asarray(start)[1 : 1 + dims])
        logger.warning("all %d MAP restarts failed to factorize the kernel", priors.n_restarts)
        raise IllConditionedKernelError(x.shape[0], length_scales, priors.jitter_max)
    return GpHyperparams.from_vector(best_vector)


def fit(
    dataset: Dataset,
    target: str = "objective",
    priors: Optional[HyperPrior] = None,
    seed: int = 0,
    hyperparams: Optional[GpHyperparams] = None,
    initial: Optional[GpHyperparams] = None,
) -> GpModel:
    """
    Fit a GP surrogate for the objective or constraint column of a dataset.

    Args:
        dataset: Evaluations so far (must be non-empty).
        target: "objective" or "constraint".
        priors: Hyper-prior and search settings.
        seed: Seed of the random restarts.
        hyperparams: Fixed hyperparameters; skips the MAP search when given.
        initial: Warm start used as the first restart of the MAP search.

    Returns:
        Fitted GpModel whose predictions are in original units.
    """
    priors = priors or HyperPrior()
    if len(dataset) == 0:
        raise ValueError("cannot fit a GP to an empty dataset")
    inputs = dataset.inputs()
    targets = dataset.targets(target)
    lower, scale = _normalization(dataset, inputs)

    if priors.standardize_targets:
        target_mean = float(np.mean(targets))
        target_std = float(np.std(targets))
        if not target_std > 1e-12:
            target_std = 1.0
    else:
        target_mean, target_std = 0.0, 1.0

    if hyperparams is None:
        x = (inputs - lower) / scale
        y = (targets - target_mean) / target_std
        hyperparams = _map_estimate(x, y, priors, seed, initial)
        logger.debug("fitted %s GP on %d points: %s", target, len(dataset), hyperparams.to_dict())
    elif hyperparams.noise_variance < priors.noise_floor:
        raise ValueError(
            f"noise_variance {hyperparams.noise_variance:g} is below the configured floor {priors.noise_floor:g}"
        )

    return GpModel(hyperparams, inputs, targets, lower, scale, target_mean, target_std, priors)


def predict(model: GpModel, point: Sequence[float]) -> Tuple[float, float]:
    """Latent posterior mean and standard deviation at one (theta, s) point."""
    return model.predict(point)


def predict_noisy_std(model: GpModel, point: Sequence[float]) -> float:
    """sqrt(latent variance + noise variance) at one (theta, s) point."""
    return model.predict_noisy_std(point)
