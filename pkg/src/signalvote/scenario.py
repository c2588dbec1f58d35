"""Scenario files: a versioned JSON document describing grid, demand and dynamics.

Example::

    {
      "version": "1",
      "grid": {"rows": 3, "cols": 4},
      "demand": [{"entry_lane": "0:N", "lambda": 0.1}, ...],
      "vehicles": [{"entry_time": 0.0, "route": ["0:WT", "1:WT", ...]}],
      "dynamics": {"saturation_headway": 2.0, "segment_traverse_seconds": 10.0,
                   "capacity_per_segment": 15, "turn_probability": 0.1}
    }

See ``docs/scenario-format.md`` for the field reference.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .sim import APPROACHES, Demand, Movement, RoadNetwork, parse_lane_id

FORMAT_VERSION = "1"

_TOP_KEYS = {"version", "grid", "demand", "vehicles", "dynamics"}
_DYNAMICS_KEYS = {
    "saturation_headway": float,
    "segment_traverse_seconds": float,
    "capacity_per_segment": int,
    "turn_probability": float,
}
DEMAND_PROFILES = ("uniform", "peak-directional")


@dataclass(frozen=True)
class Violation:
    code: str
    field: str
    reason: str

    def __str__(self) -> str:
        return f"{self.code} at {self.field}: {self.reason}"


class ScenarioError(Exception):
    def __init__(self, message: str, violations: list[Violation] | None = None):
        super().__init__(message)
        self.violations = violations or []


@dataclass
class ScenarioFile:
    rows: int
    cols: int
    demand: list[tuple[str, float]] = field(default_factory=list)
    vehicles: list[tuple[float, list[str]]] = field(default_factory=list)
    dynamics: dict[str, Any] = field(default_factory=dict)
    version: str = FORMAT_VERSION

    def to_dict(self) -> dict:
        doc: dict[str, Any] = {
            "version": self.version,
            "grid": {"rows": self.rows, "cols": self.cols},
            "demand": [{"entry_lane": k, "lambda": lam} for k, lam in self.demand],
        }
        if self.vehicles:
            doc["vehicles"] = [{"entry_time": t, "route": list(r)} for t, r in self.vehicles]
        if self.dynamics:
            doc["dynamics"] = dict(self.dynamics)
        return doc

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, doc: dict) -> "ScenarioFile":
        violations = validate(doc)
        if violations:
            raise ScenarioError("; ".join(map(str, violations)), violations)
        return cls(
            rows=doc["grid"]["rows"],
            cols=doc["grid"]["cols"],
            demand=[(d["entry_lane"], float(d["lambda"])) for d in doc["demand"]],
            vehicles=[(float(v["entry_time"]), list(v["route"])) for v in doc.get("vehicles", [])],
            dynamics=dict(doc.get("dynamics", {})),
            version=doc["version"],
        )


@dataclass(frozen=True)
class SyntheticGridSpec:
    rows: int
    cols: int
    base_lambda: float = 0.1
    demand_profile: str = "uniform"
    seed: int = 0
    turn_probability: float = 0.1
    # peak-directional: eastbound/southbound entries run at peak_factor * base
    peak_factor: float = 2.5


def _is_int(x) -> bool:
    return isinstance(x, int) and not isinstance(x, bool)


def _is_num(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool)


def validate(scenario: dict | ScenarioFile) -> list[Violation]:
    """Check a scenario document; returns an empty list when it is valid."""
    doc = scenario.to_dict() if isinstance(scenario, ScenarioFile) else scenario
    out: list[Violation] = []
    if not isinstance(doc, dict):
        return [Violation("BAD_TYPE", "$", "scenario must be a JSON object")]
    for key in sorted(set(doc) - _TOP_KEYS):
        out.append(Violation("UNKNOWN_KEY", key, "not part of the v1 format"))
    for key in ("version", "grid", "demand"):
        if key not in doc:
            out.append(Violation("MISSING_FIELD", key, "required"))
    if "version" in doc and doc["version"] != FORMAT_VERSION:
        out.append(Violation("BAD_VERSION", "version", f"expected {FORMAT_VERSION!r}"))

    rows = cols = None
    grid = doc.get("grid")
    if grid is not None:
        if not isinstance(grid, dict):
            out.append(Violation("BAD_TYPE", "grid", "must be an object"))
        else:
            for key in sorted(set(grid) - {"rows", "cols"}):
                out.append(Violation("UNKNOWN_KEY", f"grid.{key}", "not part of the v1 format"))
            r, c = grid.get("rows"), grid.get("cols")
            if not _is_int(r) or not _is_int(c):
                out.append(Violation("BAD_TYPE", "grid", "rows and cols must be integers"))
            elif r < 1 or c < 1:
                out.append(Violation("GRID_EMPTY", "grid", f"{r}x{c} has no intersections"))
            else:
                rows, cols = r, c

    def lane_in_grid(k: int) -> bool:
        return rows is not None and 0 <= k < rows * cols

    def on_boundary(k: int, approach: str) -> bool:
        r, c = divmod(k, cols)
        return {"N": r == 0, "S": r == rows - 1, "W": c == 0, "E": c == cols - 1}[approach]

    demand = doc.get("demand")
    if demand is not None and not isinstance(demand, list):
        out.append(Violation("BAD_TYPE", "demand", "must be a list"))
    elif demand is not None:
        for i, d in enumerate(demand):
            where = f"demand[{i}]"
            if not isinstance(d, dict):
                out.append(Violation("BAD_TYPE", where, "must be an object"))
                continue
            for key in sorted(set(d) - {"entry_lane", "lambda"}):
                out.append(Violation("UNKNOWN_KEY", f"{where}.{key}", "not part of the v1 format"))
            lam = d.get("lambda")
            if not _is_num(lam):
                out.append(Violation("BAD_TYPE", f"{where}.lambda", "must be a number"))
            elif lam < 0:
                out.append(Violation("NEGATIVE_RATE", f"{where}.lambda", f"{lam} < 0"))
            entry = d.get("entry_lane")
            if not isinstance(entry, str):
                out.append(Violation("BAD_TYPE", f"{where}.entry_lane", "must be a string"))
                continue
            k_str, _, rest = entry.partition(":")
            try:
                k = int(k_str)
                approach = rest[0]
                if approach not in APPROACHES:
                    raise ValueError
                if rest[1:]:
                    Movement(rest[1:])
            except (ValueError, IndexError):
                out.append(Violation("BAD_LANE_ID", f"{where}.entry_lane", f"cannot parse {entry!r}"))
                continue
            if rows is None:
                continue
            if not lane_in_grid(k):
                out.append(Violation("LANE_DANGLING", f"{where}.entry_lane", f"{entry} outside grid"))
            elif not on_boundary(k, approach):
                out.append(Violation("NOT_ENTRY_LANE", f"{where}.entry_lane",
                                     f"{entry} is not on the network boundary"))

    vehicles = doc.get("vehicles", [])
    if not isinstance(vehicles, list):
        out.append(Violation("BAD_TYPE", "vehicles", "must be a list"))
        vehicles = []
    last_t = None
    for i, v in enumerate(vehicles):
        where = f"vehicles[{i}]"
        if not isinstance(v, dict):
            out.append(Violation("BAD_TYPE", where, "must be an object"))
            continue
        for key in sorted(set(v) - {"entry_time", "route"}):
            out.append(Violation("UNKNOWN_KEY", f"{where}.{key}", "not part of the v1 format"))
        t = v.get("entry_time")
        if not _is_num(t) or t < 0:
            out.append(Violation("BAD_TYPE", f"{where}.entry_time", "must be a number >= 0"))
        else:
            if last_t is not None and t < last_t:
                out.append(Violation("VEHICLES_UNSORTED", f"{where}.entry_time",
                                     "vehicles must be sorted by entry_time"))
            last_t = t
        route = v.get("route")
        if not isinstance(route, list) or not route or not all(isinstance(x, str) for x in route):
            out.append(Violation("BAD_TYPE", f"{where}.route", "must be a non-empty list of lane ids"))
            continue
        out.extend(_check_route(route, rows, cols, f"{where}.route"))

    dyn = doc.get("dynamics", {})
    if not isinstance(dyn, dict):
        out.append(Violation("BAD_TYPE", "dynamics", "must be an object"))
    else:
        for key, val in sorted(dyn.items()):
            if key not in _DYNAMICS_KEYS:
                out.append(Violation("UNKNOWN_KEY", f"dynamics.{key}", "not part of the v1 format"))
                continue
            ok = _is_int(val) if _DYNAMICS_KEYS[key] is int else _is_num(val)
            if not ok:
                out.append(Violation("BAD_TYPE", f"dynamics.{key}", "wrong type"))
            elif key == "turn_probability" and not 0 <= val <= 1:
                out.append(Violation("BAD_DYNAMICS", f"dynamics.{key}", "must lie in [0, 1]"))
            elif key != "turn_probability" and val <= 0:
                out.append(Violation("BAD_DYNAMICS", f"dynamics.{key}", "must be positive"))
    return out


def _check_route(route: list[str], rows: int | None, cols: int | None, where: str) -> list[Violation]:
    parsed = []
    for j, lid in enumerate(route):
        try:
            parsed.append(parse_lane_id(lid))
        except ValueError:
            return [Violation("BAD_LANE_ID", f"{where}[{j}]", f"cannot parse {lid!r}")]
    if rows is None:
        return []
    K = rows * cols
    for j, (k, _, _) in enumerate(parsed):
        if not 0 <= k < K:
            return [Violation("ROUTE_DANGLING", f"{where}[{j}]", f"intersection {k} outside the grid")]
    net = RoadNetwork(rows, cols)
    if not net.is_entry_approach(parsed[0][0], parsed[0][1]):
        return [Violation("ROUTE_NOT_ENTRY", f"{where}[0]", f"{route[0]} is not a boundary lane")]
    for j in range(len(route) - 1):
        if not net.next_lane_ok(route[j], route[j + 1]):
            return [Violation("ROUTE_DISCONTINUOUS", f"{where}[{j + 1}]",
                              f"{route[j]} does not feed {route[j + 1]}")]
    if net.lanes[route[-1]].downstream is not None:
        return [Violation("ROUTE_NO_EXIT", f"{where}[{len(route) - 1}]",
                          f"{route[-1]} does not leave the network")]
    return []


def generate_grid(spec: SyntheticGridSpec) -> ScenarioFile:
    """Build a synthetic scenario; a pure function of ``spec``."""
    if spec.rows < 1 or spec.cols < 1:
        raise ScenarioError(f"grid must be at least 1x1, got {spec.rows}x{spec.cols}")
    if spec.base_lambda < 0:
        raise ScenarioError("base_lambda must be >= 0")
    if spec.demand_profile not in DEMAND_PROFILES:
        raise ScenarioError(f"unknown demand profile {spec.demand_profile!r}")
    rng = np.random.default_rng(spec.seed)
    net = RoadNetwork(spec.rows, spec.cols)
    demand = []
    for node in net.intersections:
        for approach in APPROACHES:
            if not net.is_entry_approach(node.id, approach):
                continue
            lam = spec.base_lambda
            if spec.demand_profile == "peak-directional":
                # vehicles from W head east, from N head south
                lam *= spec.peak_factor if approach in ("W", "N") else 1.0
            # +-10% seeded jitter keeps entries from being perfectly symmetric
            lam *= 1.0 + 0.1 * (2.0 * rng.random() - 1.0)
            demand.append((f"{node.id}:{approach}", round(lam, 6)))
    return ScenarioFile(
        rows=spec.rows,
        cols=spec.cols,
        demand=demand,
        dynamics={"turn_probability": spec.turn_probability},
    )


@dataclass
class LoadedScenario:
    network: RoadNetwork
    overrides: dict[str, float]
    demand: Demand
    scenario: ScenarioFile


def build(scenario: ScenarioFile) -> LoadedScenario:
    violations = validate(scenario)
    if violations:
        raise ScenarioError("; ".join(map(str, violations)), violations)
    dyn = dict(scenario.dynamics)
    network = RoadNetwork(scenario.rows, scenario.cols,
                          capacity_per_segment=dyn.pop("capacity_per_segment", 15))
    demand = Demand(
        rates=tuple((k, float(lam)) for k, lam in scenario.demand),
        vehicles=tuple((float(t), tuple(r)) for t, r in scenario.vehicles),
        turn_probability=float(dyn.pop("turn_probability", 0.1)),
    )
    return LoadedScenario(network, dyn, demand, scenario)


def load_scenario(path: str | Path) -> LoadedScenario:
    """Parse and validate a scenario file. Returns network, config overrides and demand."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}: not valid JSON ({exc})") from exc
    return build(ScenarioFile.from_dict(doc))


def save_scenario(scenario: ScenarioFile, path: str | Path) -> None:
    Path(path).write_text(scenario.dumps())
