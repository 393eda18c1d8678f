"""
Constrained max-value entropy search (CMES) for a context chosen by the environment.

The score of a candidate theta at context s is the Monte Carlo average, over sampled
feasible minimum values J*, of the entropy reduction of the objective posterior
truncated at J*, gated by the posterior probability that the constraint holds.
"""

import logging
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy import optimize
from scipy.special import log_ndtr
from scipy.stats import norm

from mpc_tune.gp import Surrogate
from mpc_tune.models import AcquisitionConfig

logger = logging.getLogger(__name__)

_TINY_STD = 1e-12
_GUMBEL_QUANTILES = (0.25, 0.5, 0.75)


def with_context(thetas: np.ndarray, s: float) -> np.ndarray:
    """Append the context column to a batch of parameter vectors."""
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    return np.column_stack([thetas, np.full(thetas.shape[0], float(s))])


def feasibility_probability(
    gp_g: Surrogate, points: np.ndarray, g_max: float, spread: str = "combined"
) -> np.ndarray:
    """
    Posterior probability that the constraint value stays below g_max.

    Args:
        gp_g: Constraint surrogate.
        points: (m, d + 1) joint points.
        g_max: Constraint bound; +inf disables the constraint.
        spread: "combined" uses sqrt(latent + noise variance), "latent" the latent std only.
    """
    points = np.atleast_2d(points)
    if not np.isfinite(g_max):
        return np.ones(points.shape[0]) if g_max > 0 else np.zeros(points.shape[0])
    mean, std = gp_g.predict_batch(points)
    if spread == "combined":
        std = gp_g.predict_noisy_std_batch(points)
    elif spread != "latent":
        raise ValueError(f"Unknown constraint spread '{spread}'. Supported: 'combined', 'latent'")
    prob = np.where(mean <= g_max, 1.0, 0.0)
    spread_ok = std > _TINY_STD
    z = (g_max - mean[spread_ok]) / std[spread_ok]
    prob[spread_ok] = norm.cdf(z)
    return prob


def information_gain(mean: np.ndarray, std: np.ndarray, min_values: np.ndarray) -> np.ndarray:
    """Entropy reduction of N(mean, std^2) truncated below at each J*, averaged over J*."""
    mean = np.asarray(mean, dtype=float).reshape(-1)
    std = np.asarray(std, dtype=float).reshape(-1)
    min_values = np.asarray(min_values, dtype=float).reshape(-1)
    gain = np.zeros(mean.size)
    known = std <= _TINY_STD * np.maximum(1.0, np.abs(mean))
    active = ~known
    if not np.any(active):
        return gain
    gamma = (mean[active, None] - min_values[None, :]) / std[active, None]
    log_cdf = log_ndtr(gamma)
    pdf_over_cdf = np.exp(norm.logpdf(gamma) - log_cdf)
    terms = 0.5 * gamma * pdf_over_cdf - log_cdf
    gain[active] = np.maximum(np.mean(terms, axis=1), 0.0)
    return gain


def cmes_scores(
    thetas: np.ndarray,
    s: float,
    gp_j: Surrogate,
    gp_g: Surrogate,
    min_values: np.ndarray,
    g_max: float,
    spread: str = "combined",
) -> np.ndarray:
    """Vectorized cmes_score over a batch of parameter vectors."""
    min_values = np.asarray(min_values, dtype=float).reshape(-1)
    if min_values.size == 0:
        raise ValueError("min_values must not be empty")
    points = with_context(thetas, s)
    mean, std = gp_j.predict_batch(points)
    gain = information_gain(mean, std, min_values)
    return gain * feasibility_probability(gp_g, points, g_max, spread)


def cmes_score(
    theta: Sequence[float],
    s: float,
    gp_j: Surrogate,
    gp_g: Surrogate,
    min_values: np.ndarray,
    g_max: float,
    spread: str = "combined",
) -> float:
    """Approximate information gain about the constrained minimum from evaluating theta at s."""
    return float(cmes_scores(np.asarray(theta, dtype=float).reshape(1, -1), s, gp_j, gp_g, min_values, g_max, spread)[0])


def _gumbel_min_samples(mean: np.ndarray, std: np.ndarray, n_samples: int, rng: np.random.Generator) -> np.ndarray:
    """Samples of min_i f_i, f_i ~ N(mean_i, std_i^2) independent, via a Gumbel fit."""
    best = float(np.min(mean))
    scale = max(1.0, float(np.max(np.abs(mean))))
    if np.all(std <= _TINY_STD * scale):
        return np.full(n_samples, best)

    # max of the negated values follows approximately Gumbel(a, b)
    neg_mean = -mean
    std = np.maximum(std, _TINY_STD * scale)

    def log_cdf(y: float) -> float:
        return float(np.sum(log_ndtr((y - neg_mean) / std)))

    low = float(np.max(neg_mean) - 6.0 * np.max(std))
    high = float(np.max(neg_mean + 6.0 * std))
    try:
        q1, q2, q3 = (
            optimize.brentq(lambda y, q=q: log_cdf(y) - np.log(q), low, high, xtol=1e-10 * scale)
            for q in _GUMBEL_QUANTILES
        )
    except ValueError:
        logger.debug("Gumbel quantile bracketing failed; using posterior-mean minimum")
        return np.full(n_samples, best)
    b = (q3 - q1) / (np.log(-np.log(0.25)) - np.log(-np.log(0.75)))
    a = q2 + b * np.log(np.log(2.0))
    u = np.clip(rng.uniform(size=n_samples), 1e-12, 1.0 - 1e-12)
    samples = -(a - b * np.log(-np.log(u)))
    return np.minimum(samples, best)


def sample_min_values(
    gp_j: Surrogate,
    gp_g: Surrogate,
    s: float,
    config: AcquisitionConfig,
    bounds: Tuple[np.ndarray, np.ndarray],
    g_max: float,
    rng: np.random.Generator,
    spread: str = "combined",
    candidates: Optional[np.ndarray] = None,
) -> np.ndarray:
    """
    Draw approximate samples of the feasible minimum J*(s).

    Candidates whose feasibility probability reaches ``config.feasibility_floor`` define
    the feasible set; if none does, the unconstrained minimum is sampled instead.

    Args:
        gp_j, gp_g: Objective and constraint surrogates.
        s: Context.
        config: Acquisition settings.
        bounds: (theta_min, theta_max).
        g_max: Constraint bound.
        rng: Random generator.
        spread: Constraint spread mode.
        candidates: Explicit candidate parameters; drawn uniformly when omitted.

    Returns:
        Array of ``config.n_min_value_samples`` values.
    """
    lower, upper = (np.asarray(b, dtype=float) for b in bounds)
    if candidates is None:
        candidates = rng.uniform(lower, upper, size=(config.n_gumbel_candidates, lower.size))
        evaluated = getattr(gp_j, "inputs", None)
        if evaluated is not None and len(evaluated):
            candidates = np.vstack([candidates, np.clip(np.asarray(evaluated)[:, : lower.size], lower, upper)])
    candidates = np.atleast_2d(np.asarray(candidates, dtype=float))
    points = with_context(candidates, s)
    mean, std = gp_j.predict_batch(points)
    feasible = feasibility_probability(gp_g, points, g_max, spread) >= config.feasibility_floor
    if not np.any(feasible):
        logger.warning(
            "no candidate reaches feasibility floor %.3f at s=%g; sampling the unconstrained minimum",
            config.feasibility_floor,
            s,
        )
        feasible = np.ones_like(feasible)
    return _gumbel_min_samples(mean[feasible], std[feasible], config.n_min_value_samples, rng)


def optimize_acquisition(
    gp_j: Surrogate,
    gp_g: Surrogate,
    s: float,
    bounds: Tuple[np.ndarray, np.ndarray],
    config: AcquisitionConfig,
    g_max: float,
    rng: np.random.Generator,
    min_values: Optional[np.ndarray] = None,
    spread: str = "combined",
) -> np.ndarray:
    """
    Select the next parameter vector for context s.

    Random search over ``n_random_candidates`` uniform points, followed by projected
    L-BFGS-B ascents (central finite-difference gradients in normalized coordinates)
    from the ``n_local_refinements`` best candidates.

    Returns:
        Parameter vector inside [theta_min, theta_max].
    """
    lower, upper = (np.asarray(b, dtype=float) for b in bounds)
    if lower.shape != upper.shape or np.any(lower >= upper) or not np.all(np.isfinite(lower + upper)):
        raise ValueError(f"invalid parameter box [{lower}, {upper}]")
    width = upper - lower
    dims = lower.size
    if min_values is None:
        min_values = sample_min_values(gp_j, gp_g, s, config, (lower, upper), g_max, rng, spread)

    def to_theta(u: np.ndarray) -> np.ndarray:
        u = np.atleast_2d(u)
        theta = lower + u * width
        theta = np.where(u >= 1.0, upper, theta)
        return np.where(u <= 0.0, lower, theta)

    def score_u(u: np.ndarray) -> np.ndarray:
        return cmes_scores(to_theta(u), s, gp_j, gp_g, min_values, g_max, spread)

    candidates_u = rng.uniform(size=(config.n_random_candidates, dims))
    scores = score_u(candidates_u)
    if not np.any(scores > 0):
        probability = feasibility_probability(gp_g, with_context(to_theta(candidates_u), s), g_max, spread)
        index = int(np.argmax(probability))
        logger.info("acquisition is zero everywhere at s=%g; exploring the most feasible candidate", s)
        return to_theta(candidates_u[index])[0]

    step = config.fd_step
    eye = np.eye(dims)

    def negative(u):
        return -float(score_u(np.clip(u, 0.0, 1.0))[0])

    def negative_grad(u):
        u = np.clip(u, 0.0, 1.0)
        plus = np.clip(u + step * eye, 0.0, 1.0)
        minus = np.clip(u - step * eye, 0.0, 1.0)
        values = score_u(np.vstack([plus, minus]))
        spans = np.diag(plus - minus)
        return -(values[:dims] - values[dims:]) / np.where(spans > 0, spans, 1.0)

    order = np.argsort(-scores, kind="stable")[: config.n_local_refinements]
    best_u, best_score = candidates_u[order[0]], float(scores[order[0]])
    for index in order:
        result = optimize.minimize(
            negative,
            candidates_u[index],
            jac=negative_grad,
            method="L-BFGS-B",
            bounds=[(0.0, 1.0)] * dims,
            options={"maxiter": 50},
        )
        refined = np.clip(result.x, 0.0, 1.0)
        value = -negative(refined)
        if value > best_score:
            best_u, best_score = refined, value
    return to_theta(best_u)[0]
