"""Pytest configuration and shared fixtures."""

import tempfile
from pathlib import Path
from typing import Callable, Iterator, Optional, Tuple

import numpy as np
import pytest

from mpc_tune.config import RunConfig, load_config
from mpc_tune.models import EpisodeSpec


class StubSurrogate:
    """Surrogate with a closed-form posterior; mean and std are functions of the joint points."""

    def __init__(
        self,
        mean: Callable[[np.ndarray], np.ndarray],
        std: Optional[Callable[[np.ndarray], np.ndarray]] = None,
        noise_std: float = 0.0,
    ):
        self.mean = mean
        self.std = std
        self.noise_std = noise_std

    def predict_batch(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        points = np.atleast_2d(np.asarray(points, dtype=float))
        mean = np.asarray(self.mean(points), dtype=float).reshape(-1)
        std = np.zeros(points.shape[0]) if self.std is None else np.asarray(self.std(points), dtype=float)
        return mean, np.broadcast_to(std, mean.shape).copy()

    def predict_noisy_std_batch(self, points: np.ndarray) -> np.ndarray:
        _, std = self.predict_batch(points)
        return np.sqrt(std**2 + self.noise_std**2)


@pytest.fixture
def temp_dir() -> Iterator[Path]:
    """Create a temporary directory for test files."""
    with tempfile.TemporaryDirectory() as tmpdir:
        yield Path(tmpdir)


@pytest.fixture
def stub_surrogate() -> type:
    """The closed-form surrogate class."""
    return StubSurrogate


@pytest.fixture
def default_config() -> RunConfig:
    """Bundled defaults."""
    return load_config()


@pytest.fixture
def short_spec() -> EpisodeSpec:
    """A short episode: 20 s settle phase and two 60 s step windows."""
    return EpisodeSpec(
        horizon=140.0,
        settle_time=20.0,
        initial_reference=(295.15, 295.15, 295.15),
        steps=((20.0, (297.15, 297.15, 295.15)), (80.0, (296.15, 298.15, 295.15))),
    )


@pytest.fixture
def catalog_dir(temp_dir: Path) -> Path:
    """A two-file disturbance catalog with a nested directory and a non-CSV file."""
    root = temp_dir / "catalog"
    (root / "nested").mkdir(parents=True)
    (root / "flat.csv").write_text("t,t_ambient,q_solar\n0,295.15,0\n600,295.15,0\n")
    (root / "nested" / "sunny.csv").write_text("t,t_ambient,q_solar\n0,300.15,400\n300,302.15,600\n600,301.15,500\n")
    (root / "notes.txt").write_text("not a trajectory")
    return root


@pytest.fixture
def small_toml(temp_dir: Path) -> Path:
    """A user config with a short budget on the bundled defaults."""
    path = temp_dir / "small.toml"
    path.write_text(
        "[tuning]\n"
        "budget = 6\n"
        "n_initial = 4\n"
        "n_grid = 5\n"
        "seed = 3\n"
        "\n"
        "[acquisition]\n"
        "n_random_candidates = 200\n"
        "n_local_refinements = 1\n"
        "n_gumbel_candidates = 128\n"
        "\n"
        "[gp]\n"
        "n_restarts = 2\n"
        "\n"
        "[episode]\n"
        "horizon = 140.0\n"
        "settle_time = 20.0\n"
        "step_times = [20.0, 80.0]\n"
        "step_references = [[297.15, 297.15, 295.15], [296.15, 298.15, 295.15]]\n"
        "\n"
        "[mpc]\n"
        "n2 = 8\n"
    )
    return path
