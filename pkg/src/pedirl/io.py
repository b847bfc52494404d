"""Readers and writers for maps, goals, parameters, trajectories and run manifests."""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .inference import IntentPosterior, Trajectory
from .mdp_solver import QTable
from .reward_model import Goal, GoalSet, ModelParams
from .semantic_map import CHAR_TO_CLASS, SemanticGrid, grid_to_strings

MAP_MAGIC = "semgrid"
MAP_VERSION = "v1"


class FormatError(ValueError):
    """A malformed input file; carries the path and 1-based line number when known."""

    def __init__(self, path, msg: str, line: int | None = None):
        loc = f"{path}:{line}" if line is not None else f"{path}"
        super().__init__(f"{loc}: {msg}")
        self.path = str(path)
        self.line = line


def _read_text(path) -> str:
    try:
        # no newline translation, so CRLF files can be reported
        return Path(path).read_bytes().decode("utf-8")
    except (FileNotFoundError, IsADirectoryError):
        raise FormatError(path, "file not found") from None
    except UnicodeDecodeError as exc:
        raise FormatError(path, f"not valid UTF-8 ({exc.reason})") from None


def _write_text(path, text: str) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


# -- maps ---------------------------------------------------------------------

def read_map(path) -> SemanticGrid:
    """Parse ``semgrid v1 <width> <height> <cell_size> <origin_x> <origin_y>`` plus rows (top row first)."""
    lines = _read_text(path).split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise FormatError(path, "empty map file", 1)
    if lines[0].endswith("\r"):
        raise FormatError(path, "CRLF line endings are not allowed", 1)
    head = lines[0].split()
    if len(head) != 7 or head[0] != MAP_MAGIC or head[1] != MAP_VERSION:
        raise FormatError(path, f"expected header '{MAP_MAGIC} {MAP_VERSION} <width> <height> <cell_size> "
                                f"<origin_x> <origin_y>'", 1)
    try:
        width, height = int(head[2]), int(head[3])
        cell_size, ox, oy = float(head[4]), float(head[5]), float(head[6])
    except ValueError:
        raise FormatError(path, "non-numeric header field", 1) from None
    if width <= 0 or height <= 0 or not cell_size > 0:
        raise FormatError(path, "width, height and cell_size must be positive", 1)
    rows = lines[1:]
    if len(rows) != height:
        raise FormatError(path, f"expected {height} rows, found {len(rows)}", len(lines))
    arr = np.empty((height, width), dtype=np.int8)
    for r, line in enumerate(rows):
        if line.endswith("\r"):
            raise FormatError(path, "CRLF line endings are not allowed", r + 2)
        if len(line) != width:
            raise FormatError(path, f"row has {len(line)} cells, expected {width}", r + 2)
        for c, ch in enumerate(line):
            cls = CHAR_TO_CLASS.get(ch)
            if cls is None:
                raise FormatError(path, f"invalid cell character {ch!r} at column {c + 1}", r + 2)
            arr[r, c] = cls
    return SemanticGrid((ox, oy), cell_size, arr[::-1])


def write_map(path, grid: SemanticGrid) -> None:
    ox, oy = grid.origin
    head = f"{MAP_MAGIC} {MAP_VERSION} {grid.width} {grid.height} {grid.cell_size!r} {ox!r} {oy!r}"
    _write_text(path, "\n".join([head, *grid_to_strings(grid)]) + "\n")


# -- goals and parameters -------------------------------------------------------

def _load_json(path):
    text = _read_text(path)
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(path, exc.msg, exc.lineno) from None


def _dump_json(path, obj) -> None:
    _write_text(path, json.dumps(obj, indent=2, sort_keys=False) + "\n")


def read_goals(path) -> GoalSet:
    data = _load_json(path)
    if isinstance(data, dict):
        data = data.get("goals")
    if not isinstance(data, list):
        raise FormatError(path, "expected a list of goal records")
    try:
        return GoalSet(Goal(str(r["id"]), float(r["x"]), float(r["y"]), float(r.get("d", 0.0))) for r in data)
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(path, f"bad goal record: {exc}") from None


def write_goals(path, goals) -> None:
    _dump_json(path, [{"id": g.id, "x": g.x, "y": g.y, "d": g.d} for g in goals])


def read_params(path) -> ModelParams:
    data = _load_json(path)
    if isinstance(data, dict) and "theta" in data and "w" not in data:
        data = data["theta"]
    try:
        return ModelParams.from_dict(data)
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(path, f"bad parameter file: {exc}") from None


def write_params(path, params: ModelParams) -> None:
    _dump_json(path, params.to_dict())


# -- trajectories -------------------------------------------------------------

def read_trajectory(path) -> Trajectory:
    """Read a ``t,x,y`` file with a header line."""
    text = _read_text(path)
    lines = text.split("\n")
    if not lines or lines[0].strip().replace(" ", "") != "t,x,y":
        raise FormatError(path, "expected header line 't,x,y'", 1)
    t, xy = [], []
    for n, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 3:
            raise FormatError(path, f"expected 3 fields, got {len(parts)}", n)
        try:
            vals = [float(v) for v in parts]
        except ValueError:
            raise FormatError(path, "non-numeric field", n) from None
        t.append(vals[0])
        xy.append(vals[1:])
    try:
        return Trajectory(np.array(t), np.array(xy).reshape(-1, 2))
    except ValueError as exc:
        raise FormatError(path, str(exc)) from None


def write_trajectory(path, traj: Trajectory) -> None:
    rows = ["t,x,y"] + [f"{t!r},{x!r},{y!r}" for t, (x, y) in zip(traj.t.tolist(), traj.xy.tolist())]
    _write_text(path, "\n".join(rows) + "\n")


def read_trajectory_dir(path) -> list[tuple[str, Trajectory]]:
    """All ``*.csv`` trajectories in a directory, sorted by file name."""
    p = Path(path)
    if not p.is_dir():
        raise FormatError(path, "trajectory directory not found")
    files = sorted(f for f in p.iterdir() if f.suffix == ".csv" and f.name != "labels.csv")
    return [(f.stem, read_trajectory(f)) for f in files]


def write_labels(path, names, labels) -> None:
    rows = ["trajectory,goal"] + [f"{n},{g}" for n, g in zip(names, labels)]
    _write_text(path, "\n".join(rows) + "\n")


def read_labels(path) -> dict[str, str]:
    with open(path, encoding="utf-8", newline="") as fh:
        return {r["trajectory"]: r["goal"] for r in csv.DictReader(fh)}


def write_posterior(path, post: IntentPosterior, extra: dict | None = None) -> None:
    _dump_json(path, {"posterior": {g: float(post[g]) for g in post}, **(extra or {})})


def write_qtable(path, table: QTable) -> None:
    """Plain-text dump for inspection: one line per cell, ``cell q_0 ... q_{n-1}``."""
    lines = [f"# goal {table.goal_id} actions {table.n_actions} sweeps {table.sweeps} residual {table.residual:.3e}",
             "# headings " + " ".join(f"{h:.6f}" for h in table.headings)]
    lines += [f"{i} " + " ".join(f"{v:.9g}" for v in row) for i, row in enumerate(table.q)]
    _write_text(path, "\n".join(lines) + "\n")


# -- manifests ----------------------------------------------------------------

@dataclass
class Manifest:
    """Paths to a dataset's map, goals, trajectories and parameters (relative to the manifest)."""

    path: Path | None = None
    map: Path | None = None
    goals: Path | None = None
    trajectories: Path | None = None
    test_trajectories: Path | None = None
    params: Path | None = None
    name: str | None = None
    seed: int | None = None
    protocol: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path) -> "Manifest":
        data = _load_json(path)
        if not isinstance(data, dict):
            raise FormatError(path, "manifest must be a JSON object")
        base = Path(path).resolve().parent

        def rel(key):
            v = data.get(key)
            return None if v is None else (base / v)

        known = {"map", "goals", "trajectories", "test_trajectories", "params", "name", "seed", "protocol"}
        unknown = set(data) - known
        if unknown:
            raise FormatError(path, f"unknown manifest keys: {sorted(unknown)}")
        return cls(Path(path), rel("map"), rel("goals"), rel("trajectories"), rel("test_trajectories"),
                   rel("params"), data.get("name") or Path(path).stem, data.get("seed"), data.get("protocol") or {})

    def require(self, *keys) -> None:
        for k in keys:
            v = getattr(self, k)
            if v is None:
                raise FormatError(self.path, f"manifest has no '{k}' entry")
            if k in ("map", "goals", "params") and not Path(v).is_file():
                raise FormatError(v, "file not found")

    def to_dict(self) -> dict:
        out = {}
        for k in ("map", "goals", "trajectories", "test_trajectories", "params"):
            v = getattr(self, k)
            if v is not None:
                out[k] = os.path.relpath(v, self.path.parent) if self.path else str(v)
        if self.name:
            out["name"] = self.name
        if self.seed is not None:
            out["seed"] = self.seed
        if self.protocol:
            out["protocol"] = self.protocol
        return out

    def save(self, path) -> None:
        self.path = Path(path)
        _dump_json(path, self.to_dict())


def dump_json(path, obj) -> None:
    _dump_json(path, obj)


def load_json(path):
    return _load_json(path)
