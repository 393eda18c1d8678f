"""Exception types raised by mpc_tune."""

from typing import Optional, Sequence


class MpcTuneError(Exception):
    """Base class for all mpc_tune errors."""


class ConfigError(MpcTuneError, ValueError):
    """Invalid configuration file, section, key or value."""


class IllConditionedKernelError(MpcTuneError):
    """Kernel Gram matrix could not be factorized even after maximal jitter."""

    def __init__(self, n_points: int, length_scales: Sequence[float], jitter: float):
        self.n_points = n_points
        self.length_scales = tuple(float(v) for v in length_scales)
        self.jitter = jitter
        super().__init__(
            f"ill-conditioned kernel: Cholesky failed for {n_points} points with "
            f"length scales {self.length_scales} after jitter {jitter:g}"
        )


class InfeasibleContextError(MpcTuneError):
    """No parameter satisfies the probabilistic constraint at a context."""

    def __init__(self, context: float, max_probability: float):
        self.context = float(context)
        self.max_probability = float(max_probability)
        super().__init__(
            f"no feasible parameter at context s={self.context:g}; "
            f"max achievable feasibility probability is {self.max_probability:.4f}"
        )


class PlantBlowUpError(MpcTuneError):
    """Plant state left the physical sanity envelope."""

    def __init__(self, time: float, state: Optional[Sequence[float]] = None):
        self.time = float(time)
        self.state = None if state is None else tuple(float(v) for v in state)
        super().__init__(f"plant blow-up at t={self.time:g} s, state={self.state}")


class EpisodeFailedError(MpcTuneError):
    """A black-box evaluation did not produce finite metrics."""


class TuningAbortedError(MpcTuneError):
    """Tuning loop stopped after consecutive evaluation failures."""
