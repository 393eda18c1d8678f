"""Tests for context sources."""

import warnings
from pathlib import Path

import pytest

from mpc_tune import contexts
from mpc_tune.contexts import ReplayContextSource, UniformContextSource, get_context_source


def test_uniform_source_is_stateless_per_index() -> None:
    """Test that contexts depend only on seed and index."""
    source = UniformContextSource((50.0, 150.0), seed=3)

    values = [source.receive_context(i) for i in range(100)]

    assert all(50.0 <= v <= 150.0 for v in values)
    assert source.receive_context(17) == values[17], "Asking again must give the same context"
    assert UniformContextSource((50.0, 150.0), seed=3).receive_context(5) == values[5]
    assert UniformContextSource((50.0, 150.0), seed=4).receive_context(5) != values[5]


def test_uniform_source_bounds_validated() -> None:
    """Test that an empty context range is rejected."""
    with pytest.raises(ValueError, match="s_min < s_max"):
        UniformContextSource((150.0, 50.0))


def test_replay_cycles_with_single_warning() -> None:
    """Test that an exhausted replay cycles and warns once."""
    source = ReplayContextSource([60.0, 70.0], (50.0, 150.0))

    assert source.receive_context(1) == 70.0
    with pytest.warns(UserWarning, match="exhausted"):
        assert source.receive_context(2) == 60.0
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert source.receive_context(3) == 70.0


def test_replay_validated() -> None:
    """Test empty and out-of-range replays."""
    with pytest.raises(ValueError, match="empty"):
        ReplayContextSource([], (50.0, 150.0))
    with pytest.raises(ValueError, match="outside"):
        ReplayContextSource([40.0], (50.0, 150.0))


def test_get_context_source(temp_dir: Path) -> None:
    """Test source selection by mode."""
    replay = temp_dir / "contexts.txt"
    replay.write_text("# recorded drive\n80\n120.5\n")

    assert isinstance(get_context_source("uniform", (50.0, 150.0), seed=1), UniformContextSource)
    source = get_context_source("Replay", (50.0, 150.0), path=replay)
    assert [source.receive_context(i) for i in range(2)] == [80.0, 120.5]
    with pytest.raises(ValueError, match="requires a file path"):
        get_context_source("replay", (50.0, 150.0))
    with pytest.raises(ValueError, match="Unknown context source mode"):
        get_context_source("sinusoidal", (50.0, 150.0))


def test_context_sources_resolved_through_registry(monkeypatch: pytest.MonkeyPatch) -> None:
    """Test that modes are looked up in the registry and unknown modes list the supported ones."""

    def fixed(bounds, seed, path):
        return ReplayContextSource([bounds[0]] * 3, bounds)

    monkeypatch.setitem(contexts._CONTEXT_SOURCE_REGISTRY, "fixed", fixed)

    source = get_context_source("FIXED", (50.0, 150.0))

    assert [source.receive_context(i) for i in range(3)] == [50.0, 50.0, 50.0]
    with pytest.raises(ValueError, match="Supported: 'uniform', 'replay', 'fixed'"):
        get_context_source("ramp", (50.0, 150.0))
