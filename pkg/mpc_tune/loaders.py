"""Readers for disturbance catalogs, dataset checkpoints, policies, context replays and oracle files."""

import csv
import fnmatch
import os
import warnings
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Protocol, Sequence, Tuple, Union

import numpy as np

from mpc_tune.errors import ConfigError
from mpc_tune.models import Dataset, OracleTable, Policy
from mpc_tune.plant import DisturbanceTrajectory

CATALOG_COLUMNS = ("t", "t_ambient", "q_solar")


class TrajectoryLoader(Protocol):
    """Protocol for disturbance trajectory loaders."""

    def load(self, source: Union[str, Path]) -> Iterator[DisturbanceTrajectory]:
        """
        Load disturbance trajectories from a source.

        Args:
            source: Path to a trajectory file or catalog directory.

        Yields:
            DisturbanceTrajectory objects.
        """
        ...


def _read_rows(path: Path) -> Tuple[List[str], List[Dict[str, str]]]:
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.DictReader(line for line in f if line.strip() and not line.startswith("#"))
        rows = list(reader)
        return list(reader.fieldnames or []), rows


def _require_columns(path: Path, header: Sequence[str], required: Sequence[str]) -> None:
    missing = [name for name in required if name not in header]
    if missing:
        raise ConfigError(f"{path}: missing column(s) {', '.join(missing)}")


def _column(path: Path, rows: List[Dict[str, str]], name: str) -> np.ndarray:
    try:
        return np.asarray([float(row[name]) for row in rows], dtype=float)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{path}: column '{name}' holds a non-numeric value ({e})") from e


class CSVTrajectoryLoader:
    """Loader for one trajectory per CSV file with columns t, t_ambient, q_solar."""

    def load(self, source: Union[str, Path]) -> Iterator[DisturbanceTrajectory]:
        """Load a trajectory CSV file."""
        path = Path(source)
        header, rows = _read_rows(path)
        _require_columns(path, header, CATALOG_COLUMNS)
        if not rows:
            raise ConfigError(f"{path}: trajectory file has no rows")
        try:
            yield DisturbanceTrajectory(
                times=_column(path, rows, "t"),
                t_ambient=_column(path, rows, "t_ambient"),
                q_solar=_column(path, rows, "q_solar"),
                name=path.stem,
            )
        except ValueError as e:
            raise ConfigError(f"{path}: {e}") from e


class CatalogLoader:
    """Loader for catalog directories, recursively loading matching trajectory files."""

    def __init__(
        self,
        include_patterns: Optional[list] = None,
        exclude_patterns: Optional[list] = None,
        loader_registry: Optional[Dict[str, TrajectoryLoader]] = None,
    ):
        self.include_patterns = include_patterns
        self.exclude_patterns = exclude_patterns or []
        self.loader_registry = loader_registry or get_default_loader_registry()

    def _should_load(self, path: Path) -> bool:
        """Check if file should be loaded based on patterns."""
        path_str = str(path)
        for pattern in self.exclude_patterns:
            if fnmatch.fnmatch(path_str, pattern) or fnmatch.fnmatch(path.name, pattern):
                return False

        if self.include_patterns:
            return any(
                fnmatch.fnmatch(path_str, pattern) or fnmatch.fnmatch(path.name, pattern)
                for pattern in self.include_patterns
            )
        return True

    def load(self, source: Union[str, Path]) -> Iterator[DisturbanceTrajectory]:
        """Load all matching files from the directory, in sorted order."""
        path = Path(source)
        if not path.is_dir():
            raise ConfigError(f"Catalog must be a directory: {source}")

        for root, dirs, files in os.walk(path):
            dirs.sort()
            for file in sorted(files):
                file_path = Path(root) / file
                if not self._should_load(file_path):
                    continue
                loader = self.loader_registry.get(file_path.suffix.lower())
                if loader is None:
                    continue
                try:
                    yield from loader.load(file_path)
                except (ConfigError, OSError) as e:
                    # one broken trajectory must not disable the whole catalog
                    warnings.warn(f"Failed to load {file_path}: {e}. Skipping this file.", UserWarning)


_LOADER_REGISTRY: Dict[str, TrajectoryLoader] = {
    ".csv": CSVTrajectoryLoader(),
}


def get_default_loader_registry() -> Dict[str, TrajectoryLoader]:
    """Get the default loader registry."""
    return _LOADER_REGISTRY.copy()


def register_loader(extension: str, loader: TrajectoryLoader):
    """
    Register a custom trajectory loader for a file extension.

    Args:
        extension: File extension (e.g., ".json").
        loader: Loader instance.
    """
    _LOADER_REGISTRY[extension.lower()] = loader


def get_loader(
    source: Union[str, Path],
    include_patterns: Optional[list] = None,
    exclude_patterns: Optional[list] = None,
) -> TrajectoryLoader:
    """
    Get appropriate loader for a catalog source.

    Args:
        source: Path to a catalog directory or a single trajectory file.
        include_patterns: Optional include patterns for directory loading.
        exclude_patterns: Optional exclude patterns for directory loading.

    Returns:
        Loader instance.
    """
    path = Path(source)
    if path.is_dir():
        return CatalogLoader(include_patterns=include_patterns, exclude_patterns=exclude_patterns)
    loader = _LOADER_REGISTRY.get(path.suffix.lower())
    if loader is None:
        raise ConfigError(f"No trajectory loader registered for '{path.suffix}' ({source})")
    return loader


def default_catalog_path() -> Path:
    """The synthetic catalog bundled with the package."""
    return Path(__file__).parent / "data" / "catalog"


def load_catalog(
    source: Union[str, Path, None] = None,
    include_patterns: Optional[list] = None,
    exclude_patterns: Optional[list] = None,
) -> List[DisturbanceTrajectory]:
    """
    Load a disturbance catalog.

    Args:
        source: Catalog directory or trajectory file; the bundled catalog when omitted.
        include_patterns: File patterns to include (default: all registered types).
        exclude_patterns: File patterns to exclude.

    Returns:
        Trajectories in deterministic (sorted path) order.
    """
    path = default_catalog_path() if source is None else Path(source)
    if not path.exists():
        raise ConfigError(f"Catalog not found: {path}")
    catalog = list(get_loader(path, include_patterns, exclude_patterns).load(path))
    if not catalog:
        raise ConfigError(f"disturbance catalog is empty: {path}")
    return catalog


def load_dataset(
    path: Union[str, Path],
    theta_bounds: Optional[Tuple[Sequence[float], Sequence[float]]] = None,
    context_bounds: Optional[Tuple[float, float]] = None,
) -> Dataset:
    """Read a dataset checkpoint with header theta1,...,thetad,s,j,g."""
    path = Path(path)
    header, rows = _read_rows(path)
    _require_columns(path, header, ("theta1", "s", "j", "g"))
    names = [name for name in header if name.startswith("theta")]
    params = np.column_stack([_column(path, rows, name) for name in names]) if rows else []
    try:
        return Dataset(
            params=[tuple(p) for p in params],
            objectives=list(_column(path, rows, "j")),
            constraints=list(_column(path, rows, "g")),
            contexts=list(_column(path, rows, "s")),
            theta_bounds=theta_bounds,
            context_bounds=context_bounds,
        )
    except ValueError as e:
        raise ConfigError(f"{path}: {e}") from e


def load_policy(path: Union[str, Path], delta: float = float("nan"), gamma: float = float("nan")) -> Policy:
    """Read a policy CSV with columns s, theta_<name>..., feasibility_prob."""
    path = Path(path)
    header, rows = _read_rows(path)
    _require_columns(path, header, ("s",))
    names = [name for name in header if name.startswith("theta_")]
    if not names or not rows:
        raise ConfigError(f"{path}: policy file needs theta_* columns and at least one row")
    feasibility = _column(path, rows, "feasibility_prob") if "feasibility_prob" in header else None
    try:
        return Policy(
            grid=_column(path, rows, "s"),
            params=np.column_stack([_column(path, rows, name) for name in names]),
            delta=delta,
            gamma=gamma,
            feasibility=feasibility,
            param_names=tuple(name[len("theta_"):] for name in names),
        )
    except ValueError as e:
        raise ConfigError(f"{path}: {e}") from e


def load_contexts(path: Union[str, Path]) -> List[float]:
    """Read a context replay file: one value per line, or a CSV with an ``s`` column."""
    path = Path(path)
    with open(path, "r", encoding="utf-8") as f:
        lines = [line.strip() for line in f if line.strip() and not line.lstrip().startswith("#")]
    if not lines:
        raise ConfigError(f"{path}: context replay file is empty")
    if "," in lines[0] or lines[0] == "s":
        header, rows = _read_rows(path)
        _require_columns(path, header, ("s",))
        return [float(v) for v in _column(path, rows, "s")]
    try:
        return [float(line) for line in lines]
    except ValueError as e:
        raise ConfigError(f"{path}: {e}") from e


def load_oracle(path: Union[str, Path]) -> OracleTable:
    """Read a golden oracle file with columns s, theta1*, ..., j*, feasible."""
    path = Path(path)
    header, rows = _read_rows(path)
    _require_columns(path, header, ("s", "j*", "feasible"))
    names = [name for name in header if name.startswith("theta") and name.endswith("*")]
    return OracleTable(
        grid=_column(path, rows, "s"),
        params=np.column_stack([_column(path, rows, name) for name in names]),
        values=_column(path, rows, "j*"),
        feasible=_column(path, rows, "feasible") > 0.5,
    )
