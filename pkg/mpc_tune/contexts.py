"""Context sources: where the tuning loop receives the next episode's mass flow from."""

import warnings
from pathlib import Path
from typing import Callable, Dict, Optional, Protocol, Sequence, Tuple, Union

from mpc_tune.seeding import substream


class ContextSource(Protocol):
    """Protocol for context sources."""

    bounds: Tuple[float, float]

    def receive_context(self, index: int) -> float:
        """
        Context of evaluation number ``index`` (0-based).

        Sources are stateless per index so that resumed runs receive the same sequence.
        """
        ...


class UniformContextSource:
    """Contexts drawn uniformly from the bounds, one substream per index."""

    def __init__(self, bounds: Tuple[float, float], seed: int = 0):
        self.bounds = (float(bounds[0]), float(bounds[1]))
        if not self.bounds[0] < self.bounds[1]:
            raise ValueError(f"context bounds must satisfy s_min < s_max, got {self.bounds}")
        self.seed = seed

    def receive_context(self, index: int) -> float:
        rng = substream(self.seed, "contexts", index)
        return float(rng.uniform(*self.bounds))


class ReplayContextSource:
    """Replays a recorded sequence of contexts verbatim."""

    def __init__(self, values: Sequence[float], bounds: Tuple[float, float]):
        self.bounds = (float(bounds[0]), float(bounds[1]))
        self.values = [float(v) for v in values]
        if not self.values:
            raise ValueError("replay context sequence is empty")
        low, high = self.bounds
        for value in self.values:
            if not low <= value <= high:
                raise ValueError(f"replayed context {value} outside [{low}, {high}]")
        self._warned = False

    def receive_context(self, index: int) -> float:
        if index >= len(self.values) and not self._warned:
            warnings.warn(
                f"Context replay exhausted after {len(self.values)} values; cycling from the start.",
                UserWarning,
            )
            self._warned = True
        return self.values[index % len(self.values)]


# (bounds, seed, path) -> ContextSource
ContextSourceFactory = Callable[[Tuple[float, float], int, Optional[Union[str, Path]]], ContextSource]


def _uniform_source(bounds: Tuple[float, float], seed: int, path: Optional[Union[str, Path]]) -> ContextSource:
    return UniformContextSource(bounds, seed)


def _replay_source(bounds: Tuple[float, float], seed: int, path: Optional[Union[str, Path]]) -> ContextSource:
    if path is None:
        raise ValueError("replay context source requires a file path")
    from mpc_tune.loaders import load_contexts

    return ReplayContextSource(load_contexts(path), bounds)


_CONTEXT_SOURCE_REGISTRY: Dict[str, ContextSourceFactory] = {
    "uniform": _uniform_source,
    "replay": _replay_source,
}


def get_context_source(
    mode: str,
    bounds: Tuple[float, float],
    seed: int = 0,
    path: Optional[Union[str, Path]] = None,
) -> ContextSource:
    """
    Get a context source by mode.

    Args:
        mode: "uniform" or "replay" (case-insensitive).
        bounds: (s_min, s_max).
        seed: Seed of the uniform source.
        path: Replay file (required for "replay").

    Returns:
        ContextSource instance.
    """
    factory = _CONTEXT_SOURCE_REGISTRY.get(mode.lower())
    if factory is None:
        supported = ", ".join(f"'{name}'" for name in _CONTEXT_SOURCE_REGISTRY)
        raise ValueError(f"Unknown context source mode '{mode}'. Supported: {supported}")
    return factory(bounds, seed, path)
