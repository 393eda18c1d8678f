"""Writers for run logs, dataset checkpoints, policies, trajectories and oracle tables."""

import csv
import json
import os
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Protocol, Sequence, Union

import numpy as np

from mpc_tune.models import Dataset, EpisodeOutcome, OracleTable, Policy


class Sink(Protocol):
    """Protocol for run-log sinks."""

    def write(self, records: Iterable[Mapping[str, Any]]) -> None:
        """
        Write records to the sink.

        Args:
            records: Iterable of JSON-serializable mappings.
        """
        ...


def _jsonable(value: Any) -> Any:
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, tuple):
        return list(value)
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")


class JSONLSink:
    """Write records to a JSON-lines file, one object per line."""

    def __init__(self, output_path: Union[str, Path], append: bool = True):
        self.output_path = Path(output_path)
        self.append = append

    def write(self, records: Iterable[Mapping[str, Any]]) -> None:
        """Write records; appends to an existing log unless ``append`` is False."""
        mode = "a" if self.append else "w"
        with open(self.output_path, mode, encoding="utf-8") as f:
            for record in records:
                json.dump(record, f, ensure_ascii=False, sort_keys=True, default=_jsonable)
                f.write("\n")
        self.append = True


class ListSink:
    """Collect records into a list (in-memory sink)."""

    def __init__(self):
        self.records: List[Dict[str, Any]] = []

    def write(self, records: Iterable[Mapping[str, Any]]) -> None:
        """Collect records into list."""
        self.records.extend(dict(r) for r in records)

    def get_records(self) -> List[Dict[str, Any]]:
        """Get collected records."""
        return self.records


def _fmt(value: float) -> str:
    return repr(float(value))


def _write_csv(path: Union[str, Path], header: Sequence[str], rows: Iterable[Sequence[str]]) -> None:
    """Write a CSV through a temporary file so that readers never see a partial checkpoint."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
    os.replace(tmp, path)


def write_dataset_csv(dataset: Dataset, path: Union[str, Path]) -> None:
    """Dataset checkpoint with header theta1,...,thetad,s,j,g; floats are written losslessly."""
    header = [f"theta{i + 1}" for i in range(dataset.dim)] + ["s", "j", "g"]
    rows = (
        [_fmt(v) for v in theta] + [_fmt(s), _fmt(j), _fmt(g)]
        for theta, s, j, g in zip(dataset.params, dataset.contexts, dataset.objectives, dataset.constraints)
    )
    _write_csv(path, header, rows)


def write_policy_csv(policy: Policy, path: Union[str, Path]) -> None:
    """Policy with columns s, theta_<name>..., feasibility_prob."""
    header = ["s"] + [f"theta_{name}" for name in policy.param_names] + ["feasibility_prob"]
    feasibility = policy.feasibility if policy.feasibility is not None else np.full(len(policy), np.nan)
    rows = (
        [_fmt(s)] + [_fmt(v) for v in theta] + [_fmt(p)]
        for s, theta, p in zip(policy.grid, policy.params, feasibility)
    )
    _write_csv(path, header, rows)


def write_trajectory_csv(outcome: EpisodeOutcome, path: Union[str, Path]) -> None:
    """Per-episode dump: t, t_air_1..3, t_ref_1..3, t_mix_1..3."""
    zones = outcome.t_air.shape[1]
    header = (
        ["t"]
        + [f"t_air_{i + 1}" for i in range(zones)]
        + [f"t_ref_{i + 1}" for i in range(zones)]
        + [f"t_mix_{i + 1}" for i in range(zones)]
    )
    rows = (
        [_fmt(t)] + [_fmt(v) for v in np.concatenate([air, ref, mix])]
        for t, air, ref, mix in zip(outcome.times, outcome.t_air, outcome.t_ref, outcome.t_mix)
    )
    _write_csv(path, header, rows)


def write_oracle_csv(table: OracleTable, path: Union[str, Path]) -> None:
    """Golden oracle file: s, theta1*, ..., j*, feasible."""
    header = ["s"] + [f"theta{i + 1}*" for i in range(table.params.shape[1])] + ["j*", "feasible"]
    rows = (
        [_fmt(s)] + [_fmt(v) for v in theta] + [_fmt(j), str(int(ok))]
        for s, theta, j, ok in zip(table.grid, table.params, table.values, table.feasible)
    )
    _write_csv(path, header, rows)


def write_json(data: Mapping[str, Any], path: Union[str, Path]) -> None:
    """Pretty-printed JSON report with sorted keys."""
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2, sort_keys=True, default=_jsonable, allow_nan=True)
        f.write("\n")


def write_table_csv(path: Union[str, Path], header: Sequence[str], rows: Iterable[Sequence[Any]]) -> None:
    """Generic report table; floats are written losslessly, other values as text."""
    formatted = (
        [_fmt(v) if isinstance(v, (float, np.floating)) else str(v) for v in row]
        for row in rows
    )
    _write_csv(path, header, formatted)
