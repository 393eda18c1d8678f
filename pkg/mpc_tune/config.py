"""Run configuration: versioned TOML defaults, user file deep-merge, presets and overrides."""

import copy
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple, Union

try:
    import tomllib as toml_reader
except ModuleNotFoundError:  # Python < 3.11
    import tomli as toml_reader

from mpc_tune.errors import ConfigError
from mpc_tune.models import PRESETS, AcquisitionConfig, EpisodeSpec, HyperPrior, TuningConfig
from mpc_tune.plant import PlantParams

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1


def default_config_path() -> Path:
    return Path(__file__).parent / "data" / "defaults.toml"


@dataclass
class CatalogSettings:
    path: str = ""
    include: Tuple[str, ...] = ("*.csv",)
    exclude: Tuple[str, ...] = ()


@dataclass
class ContextSettings:
    mode: str = "uniform"
    replay_file: str = ""


@dataclass
class CompareSettings:
    contexts: Tuple[float, ...] = (50.0, 100.0, 150.0)
    constant_theta: Tuple[float, ...] = ()
    disturbance: Tuple[float, float] = (295.15, 0.0)


@dataclass
class BenchSettings:
    budget: int = 120
    seeds: int = 10
    golden_dir: str = ""
    max_median_suboptimality: float = 0.05
    max_worst_suboptimality: float = 0.15
    max_violations: int = 0

    def golden_path(self) -> Path:
        return Path(self.golden_dir) if self.golden_dir else Path(__file__).parent / "data" / "golden"


@dataclass
class RunConfig:
    """Validated contents of a run configuration file."""

    tuning: TuningConfig = field(default_factory=TuningConfig)
    plant: PlantParams = field(default_factory=PlantParams)
    mismatch_spread: float = 0.3
    n2: int = 20
    q: Tuple[float, ...] = (1.0, 1.0, 1.0)
    t_mix_bounds: Tuple[float, float] = (273.15, 333.15)
    observer_gain: float = 0.1
    discretization: str = "exact"
    episode: EpisodeSpec = field(default_factory=EpisodeSpec)
    catalog: CatalogSettings = field(default_factory=CatalogSettings)
    contexts: ContextSettings = field(default_factory=ContextSettings)
    output_dir: str = "runs/latest"
    dump_trajectories: bool = True
    n_episodes: int = 50
    jobs: int = 1
    compare: CompareSettings = field(default_factory=CompareSettings)
    bench: BenchSettings = field(default_factory=BenchSettings)
    preset: str = "robust"

    def episode_environment(self):
        """Episode environment with the configured (or bundled) disturbance catalog."""
        from mpc_tune.episode import EpisodeEnvironment
        from mpc_tune.loaders import load_catalog

        catalog = None
        if self.catalog.path or self.catalog.exclude or tuple(self.catalog.include) != ("*.csv",):
            catalog = tuple(
                load_catalog(self.catalog.path or None, list(self.catalog.include), list(self.catalog.exclude))
            )
        return EpisodeEnvironment(
            plant=self.plant,
            n2=self.n2,
            q=self.q,
            t_mix_bounds=self.t_mix_bounds,
            observer_gain=self.observer_gain,
            mismatch_spread=self.mismatch_spread,
            discretization=self.discretization,
            catalog=catalog,
        )

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def _read_toml(path: Union[str, Path]) -> Dict[str, Any]:
    try:
        with open(path, "rb") as f:
            return toml_reader.load(f)
    except FileNotFoundError:
        raise ConfigError(f"Config file not found: {path}") from None
    except toml_reader.TOMLDecodeError as e:
        raise ConfigError(f"{path}: invalid TOML ({e})") from e


def deep_merge(base: Mapping[str, Any], override: Mapping[str, Any], where: str = "") -> Dict[str, Any]:
    """
    Merge ``override`` into a copy of ``base``; every key must already exist in ``base``.

    Raises:
        ConfigError: naming the first unknown key or a table replaced by a value.
    """
    merged = copy.deepcopy(dict(base))
    for key, value in override.items():
        name = f"{where}.{key}" if where else key
        if key not in merged:
            raise ConfigError(f"Unknown config key '{name}'")
        if isinstance(merged[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"Config key '{name}' must be a table")
            merged[key] = deep_merge(merged[key], value, name)
        elif isinstance(value, dict):
            raise ConfigError(f"Config key '{name}' must be a value, not a table")
        else:
            merged[key] = value
    return merged


def _section(data: Mapping[str, Any], name: str, builder, **extra):
    values = dict(data[name])
    values.update(extra)
    try:
        return builder(**values)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"[{name}] {e}") from e


def build_run_config(data: Mapping[str, Any]) -> RunConfig:
    """Convert a merged config tree into a validated RunConfig."""
    if data.get("version") != SCHEMA_VERSION:
        raise ConfigError(f"Unsupported config version {data.get('version')!r}; expected {SCHEMA_VERSION}")
    preset = data["preset"]
    if preset not in PRESETS:
        raise ConfigError(f"Unknown preset '{preset}'. Supported: {', '.join(PRESETS)}")

    tuning = dict(data["tuning"])
    gamma = tuning.pop("gamma")
    if gamma == "auto":
        gamma = None
    elif isinstance(gamma, str) or isinstance(gamma, bool):
        raise ConfigError(f"[tuning] gamma must be a number or 'auto', got {gamma!r}")
    acquisition = _section(data, "acquisition", AcquisitionConfig)
    priors = _section(data, "gp", HyperPrior)
    try:
        tuning_config = TuningConfig(
            **tuning, gamma=gamma, delta=PRESETS[preset], acquisition=acquisition, gp=priors
        )
    except (TypeError, ValueError) as e:
        raise ConfigError(f"[tuning] {e}") from e

    plant = dict(data["plant"])
    mismatch_spread = float(plant.pop("mismatch_spread"))
    plant_params = _section({"plant": plant}, "plant", PlantParams)

    episode = dict(data["episode"])
    times = episode.pop("step_times")
    references = episode.pop("step_references")
    if len(times) != len(references):
        raise ConfigError("[episode] step_times and step_references must have the same length")
    spec = _section({"episode": episode}, "episode", EpisodeSpec, steps=tuple(zip(times, references)))

    mpc = data["mpc"]
    config = RunConfig(
        tuning=tuning_config,
        plant=plant_params,
        mismatch_spread=mismatch_spread,
        n2=int(mpc["n2"]),
        q=tuple(float(v) for v in mpc["q"]),
        t_mix_bounds=tuple(float(v) for v in mpc["t_mix_bounds"]),
        observer_gain=float(mpc["observer_gain"]),
        discretization=str(mpc["discretization"]),
        episode=spec,
        catalog=_section(data, "catalog", CatalogSettings),
        contexts=_section(data, "contexts", ContextSettings),
        output_dir=str(data["output"]["dir"]),
        dump_trajectories=bool(data["output"]["dump_trajectories"]),
        n_episodes=int(data["validate"]["n_episodes"]),
        jobs=int(data["validate"]["jobs"]),
        compare=_section(data, "compare", CompareSettings),
        bench=_section(data, "bench", BenchSettings),
        preset=preset,
    )
    _validate(config)
    return config


def _validate(config: RunConfig) -> None:
    if config.contexts.mode not in ("uniform", "replay"):
        raise ConfigError(f"[contexts] mode must be 'uniform' or 'replay', got '{config.contexts.mode}'")
    if config.contexts.mode == "replay" and not config.contexts.replay_file:
        raise ConfigError("[contexts] replay mode needs replay_file")
    if config.discretization not in ("exact", "euler"):
        raise ConfigError(f"[mpc] discretization must be 'exact' or 'euler', got '{config.discretization}'")
    if len(config.q) != 3:
        raise ConfigError(f"[mpc] q needs 3 entries, got {len(config.q)}")
    if not 0 < config.observer_gain <= 1:
        raise ConfigError(f"[mpc] observer_gain must lie in (0, 1], got {config.observer_gain}")
    if not 0 <= config.mismatch_spread < 1:
        raise ConfigError(f"[plant] mismatch_spread must lie in [0, 1), got {config.mismatch_spread}")
    if config.n_episodes < 0 or config.jobs < 1:
        raise ConfigError("[validate] n_episodes must be >= 0 and jobs >= 1")
    if config.tuning.dim != 2:
        raise ConfigError(f"[tuning] the MPC has 2 tuning parameters, got {config.tuning.dim}")
    if config.compare.constant_theta and len(config.compare.constant_theta) != 2:
        raise ConfigError("[compare] constant_theta needs 2 entries or none")
    if config.bench.seeds < 1 or config.bench.budget < config.tuning.n_initial:
        raise ConfigError("[bench] seeds must be >= 1 and budget >= tuning.n_initial")


def load_config(path: Optional[Union[str, Path]] = None) -> RunConfig:
    """
    Load the versioned defaults and deep-merge a user config file over them.

    Args:
        path: User TOML file; defaults only when omitted.

    Raises:
        ConfigError: on unreadable files, unknown keys or invalid values.
    """
    data = _read_toml(default_config_path())
    if path is not None:
        data = deep_merge(data, _read_toml(path))
        logger.debug("loaded config %s", path)
    return build_run_config(data)


def apply_overrides(
    config: RunConfig,
    seed: Optional[int] = None,
    budget: Optional[int] = None,
    delta: Optional[float] = None,
    out: Optional[str] = None,
    jobs: Optional[int] = None,
    preset: Optional[str] = None,
) -> RunConfig:
    """Apply command-line overrides; an explicit delta wins over any preset."""
    tuning_changes: Dict[str, Any] = {}
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"Unknown preset '{preset}'. Supported: {', '.join(PRESETS)}")
        tuning_changes["delta"] = PRESETS[preset]
        config = replace(config, preset=preset)
    if seed is not None:
        tuning_changes["seed"] = seed
    if budget is not None:
        tuning_changes["budget"] = budget
    if delta is not None:
        tuning_changes["delta"] = delta
    try:
        tuning = replace(config.tuning, **tuning_changes)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    config = replace(config, tuning=tuning)
    if out is not None:
        config = replace(config, output_dir=out)
    if jobs is not None:
        if jobs < 1:
            raise ConfigError(f"--jobs must be >= 1, got {jobs}")
        config = replace(config, jobs=jobs)
    return config
