"""Scenario data model, infraction predicates and scenario file I/O."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import kernels
from .kernels import wrap_angle

DT = 0.1
SCHEMA_VERSION = 1


class ScenarioError(Exception):
    code = 10


class SchemaVersionError(ScenarioError):
    code = 11


class InvariantError(ScenarioError):
    code = 12


class MalformedFileError(ScenarioError):
    code = 13


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class Pose2:
    x: float
    y: float
    heading: float

    def __post_init__(self):
        object.__setattr__(self, "heading", wrap_angle(self.heading))


@dataclass(frozen=True)
class AgentState:
    pose: Pose2
    speed: float
    length: float
    width: float
    valid: bool = True


@dataclass(frozen=True, eq=False)
class AgentTrack:
    """Logged states of one agent at fixed ``DT``, stored column-wise."""

    x: np.ndarray
    y: np.ndarray
    heading: np.ndarray
    speed: np.ndarray
    validity: np.ndarray
    length: float
    width: float

    def __len__(self) -> int:
        return int(self.x.shape[0])

    def state(self, t: int) -> AgentState:
        return AgentState(
            Pose2(float(self.x[t]), float(self.y[t]), float(self.heading[t])),
            float(self.speed[t]),
            self.length,
            self.width,
            bool(self.validity[t]),
        )

    @property
    def states(self) -> list[AgentState]:
        return [self.state(t) for t in range(len(self))]

    def __eq__(self, other):
        if not isinstance(other, AgentTrack):
            return NotImplemented
        return (
            self.length == other.length
            and self.width == other.width
            and all(
                np.array_equal(getattr(self, k), getattr(other, k))
                for k in ("x", "y", "heading", "speed", "validity")
            )
        )


@dataclass(eq=False)
class RoadGraph:
    lane_centerlines: list[np.ndarray]
    road_edges: list[np.ndarray]
    drivable_areas: list[np.ndarray]

    def __eq__(self, other):
        if not isinstance(other, RoadGraph):
            return NotImplemented
        for a, b in (
            (self.lane_centerlines, other.lane_centerlines),
            (self.road_edges, other.road_edges),
            (self.drivable_areas, other.drivable_areas),
        ):
            if len(a) != len(b) or not all(np.array_equal(p, q) for p, q in zip(a, b)):
                return False
        return True

    def edge_segments(self) -> np.ndarray:
        segs = [np.concatenate([e[:-1], e[1:]], axis=1) for e in self.road_edges]
        return np.concatenate(segs, axis=0) if segs else np.zeros((0, 4))


@dataclass(frozen=True)
class GoalSpec:
    position: tuple[float, float]
    radius: float = 2.0


@dataclass(eq=False)
class Scenario:
    id: str
    road_graph: RoadGraph
    tracks: list[AgentTrack]
    goals: list[GoalSpec]
    controlled: np.ndarray
    init_step: int = 10
    horizon_steps: int = 80
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def n_agents(self) -> int:
        return len(self.tracks)

    @property
    def final_step(self) -> int:
        return self.init_step + self.horizon_steps

    def __eq__(self, other):
        if not isinstance(other, Scenario):
            return NotImplemented
        return (
            self.id == other.id
            and self.init_step == other.init_step
            and self.horizon_steps == other.horizon_steps
            and self.road_graph == other.road_graph
            and self.tracks == other.tracks
            and self.goals == other.goals
            and np.array_equal(self.controlled, other.controlled)
        )

    def stacked(self) -> dict[str, np.ndarray]:
        """Track columns as (A, T) arrays, cached."""
        if "stack" not in self._cache:
            self._cache["stack"] = {
                "x": np.stack([t.x for t in self.tracks]),
                "y": np.stack([t.y for t in self.tracks]),
                "heading": np.stack([t.heading for t in self.tracks]),
                "speed": np.stack([t.speed for t in self.tracks]),
                "valid": np.stack([t.validity for t in self.tracks]).astype(bool),
                "length": np.array([t.length for t in self.tracks]),
                "width": np.array([t.width for t in self.tracks]),
                "goal": np.array([g.position for g in self.goals], dtype=np.float64).reshape(-1, 2),
                "goal_radius": np.array([g.radius for g in self.goals], dtype=np.float64),
            }
        return self._cache["stack"]

    def validate(self) -> None:
        validate_scenario(self)


# ------------------------------------------------------------ predicates

def _check_finite(*vals):
    if not all(math.isfinite(v) for v in vals):
        raise GeometryError("non-finite pose")


def collision_check(a: AgentState, b: AgentState) -> bool:
    """Oriented-box overlap by separating axes. Touching boxes count as overlapping."""
    _check_finite(a.pose.x, a.pose.y, a.pose.heading, b.pose.x, b.pose.y, b.pose.heading)
    m = kernels.obb_overlap_matrix_numpy(
        np.array([a.pose.x, b.pose.x]),
        np.array([a.pose.y, b.pose.y]),
        np.array([a.pose.heading, b.pose.heading]),
        np.array([a.length, b.length]),
        np.array([a.width, b.width]),
        np.array([True, True]),
    )
    return bool(m[0, 1])


def offroad_mask(px, py, rg: RoadGraph) -> np.ndarray:
    """Vectorized offroad test for center points: outside every drivable polygon."""
    if not rg.drivable_areas:
        raise GeometryError("road graph has no drivable polygon")
    px = np.atleast_1d(np.asarray(px, dtype=np.float64))
    py = np.atleast_1d(np.asarray(py, dtype=np.float64))
    inside = np.zeros(px.shape[0], dtype=bool)
    for poly in rg.drivable_areas:
        inside |= kernels.points_in_polygon(px, py, poly)
    return ~inside


def offroad_check(a: AgentState, rg: RoadGraph) -> bool:
    """Center point outside all drivable polygons (even-odd rule, boundary counts as inside)."""
    _check_finite(a.pose.x, a.pose.y)
    return bool(offroad_mask([a.pose.x], [a.pose.y], rg)[0])


def goal_check(a: AgentState, g: GoalSpec) -> bool:
    return math.hypot(a.pose.x - g.position[0], a.pose.y - g.position[1]) <= g.radius


# ------------------------------------------------------------ validation

def validate_scenario(s: Scenario) -> None:
    if s.horizon_steps < 1:
        raise InvariantError(f"horizon_steps must be >= 1, got {s.horizon_steps}")
    if s.init_step < 0:
        raise InvariantError("init_step must be >= 0")
    n = len(s.tracks)
    if n < 1:
        raise InvariantError("scenario has no agents")
    if len(s.goals) != n or len(s.controlled) != n:
        raise InvariantError("goals/controlled must have one entry per agent")
    expect = s.init_step + s.horizon_steps + 1
    rg = s.road_graph
    for poly in rg.lane_centerlines + rg.road_edges:
        if poly.ndim != 2 or poly.shape[0] < 2 or poly.shape[1] != 2:
            raise InvariantError("polylines need >= 2 points of 2 coordinates")
    for poly in rg.drivable_areas:
        if poly.ndim != 2 or poly.shape[0] < 3 or poly.shape[1] != 2:
            raise InvariantError("drivable polygons need >= 3 points")
    for i, tr in enumerate(s.tracks):
        if len(tr) != expect:
            raise InvariantError(f"track {i} has {len(tr)} steps, expected {expect}")
        if not (tr.length >= tr.width > 0):
            raise InvariantError(f"track {i}: need length >= width > 0")
        v = tr.validity.astype(bool)
        cols = (tr.x[v], tr.y[v], tr.heading[v], tr.speed[v])
        if not all(np.all(np.isfinite(c)) for c in cols):
            raise InvariantError(f"track {i}: non-finite valid state")
        if np.any(tr.heading[v] <= -math.pi) or np.any(tr.heading[v] > math.pi):
            raise InvariantError(f"track {i}: heading not normalized")
        if np.any(tr.speed[v] < 0):
            raise InvariantError(f"track {i}: negative speed")
        if s.controlled[i] and not v[s.init_step]:
            raise InvariantError(f"controlled agent {i} invalid at init_step")
    for g in s.goals:
        if not g.radius > 0:
            raise InvariantError("goal radius must be > 0")


# ------------------------------------------------------------------ I/O

def _poly_list(polys):
    return [p.tolist() for p in polys]


def scenario_to_dict(s: Scenario) -> dict:
    tracks = []
    for tr in s.tracks:
        states = [
            {
                "pose": {"x": float(tr.x[t]), "y": float(tr.y[t]), "heading": float(tr.heading[t])},
                "speed": float(tr.speed[t]),
                "length": float(tr.length),
                "width": float(tr.width),
                "valid": bool(tr.validity[t]),
            }
            for t in range(len(tr))
        ]
        tracks.append({"states": states, "validity": [bool(v) for v in tr.validity]})
    return {
        "schema_version": SCHEMA_VERSION,
        "id": s.id,
        "road_graph": {
            "lane_centerlines": _poly_list(s.road_graph.lane_centerlines),
            "road_edges": _poly_list(s.road_graph.road_edges),
            "drivable_areas": _poly_list(s.road_graph.drivable_areas),
        },
        "tracks": tracks,
        "goals": [{"position": list(g.position), "radius": g.radius} for g in s.goals],
        "controlled": [bool(c) for c in s.controlled],
        "init_step": int(s.init_step),
        "horizon_steps": int(s.horizon_steps),
    }


def scenario_from_dict(d: dict) -> Scenario:
    if not isinstance(d, dict):
        raise MalformedFileError("top level must be an object")
    if d.get("schema_version") != SCHEMA_VERSION:
        raise SchemaVersionError(f"unsupported schema_version {d.get('schema_version')!r}")
    try:
        rg = d["road_graph"]
        road = RoadGraph(
            [np.asarray(p, dtype=np.float64) for p in rg["lane_centerlines"]],
            [np.asarray(p, dtype=np.float64) for p in rg["road_edges"]],
            [np.asarray(p, dtype=np.float64) for p in rg["drivable_areas"]],
        )
        tracks = []
        for td in d["tracks"]:
            st = td["states"]
            if not st:
                raise InvariantError("empty track")
            tracks.append(
                AgentTrack(
                    x=np.array([e["pose"]["x"] for e in st], dtype=np.float64),
                    y=np.array([e["pose"]["y"] for e in st], dtype=np.float64),
                    heading=np.array([e["pose"]["heading"] for e in st], dtype=np.float64),
                    speed=np.array([e["speed"] for e in st], dtype=np.float64),
                    validity=np.array(td["validity"], dtype=bool),
                    length=float(st[0]["length"]),
                    width=float(st[0]["width"]),
                )
            )
        goals = [GoalSpec((float(g["position"][0]), float(g["position"][1])), float(g["radius"])) for g in d["goals"]]
        s = Scenario(
            id=str(d["id"]),
            road_graph=road,
            tracks=tracks,
            goals=goals,
            controlled=np.array(d["controlled"], dtype=bool),
            init_step=int(d["init_step"]),
            horizon_steps=int(d["horizon_steps"]),
        )
    except (KeyError, TypeError, ValueError, IndexError) as e:
        raise MalformedFileError(f"malformed scenario: {e!r}") from e
    validate_scenario(s)
    return s


def write_scenario(s: Scenario, path) -> None:
    validate_scenario(s)
    Path(path).write_text(json.dumps(scenario_to_dict(s), separators=(",", ":")))


def read_scenario(path) -> Scenario:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise MalformedFileError(f"{path}: not valid JSON ({e})") from e
    return scenario_from_dict(d)


def scenario_io(path, mode: str, scenario: Scenario | None = None):
    if mode == "read":
        return read_scenario(path)
    if mode == "write":
        if scenario is None:
            raise ValueError("write mode needs a scenario")
        write_scenario(scenario, path)
        return None
    raise ValueError(f"mode must be read or write, got {mode!r}")


def load_scenario_dir(path) -> list[Scenario]:
    """All scenario files in a directory, sorted by name (the run-config echo is skipped)."""
    files = sorted(f for f in Path(path).glob("*.json") if f.name != "run_config.json")
    return [read_scenario(f) for f in files]


def lane_projection(polyline: np.ndarray, px, py):
    """Project points onto a polyline. Returns (arc_length, signed_lateral, tangent_heading, seg_index)."""
    p = np.asarray(polyline, dtype=np.float64)
    a = p[:-1]
    v = p[1:] - p[:-1]
    seglen = np.hypot(v[:, 0], v[:, 1])
    cum = np.concatenate([[0.0], np.cumsum(seglen)])
    px = np.atleast_1d(np.asarray(px, dtype=np.float64))[:, None]
    py = np.atleast_1d(np.asarray(py, dtype=np.float64))[:, None]
    t = ((px - a[:, 0]) * v[:, 0] + (py - a[:, 1]) * v[:, 1]) / (seglen**2)
    t = np.clip(t, 0.0, 1.0)
    qx = a[:, 0] + t * v[:, 0]
    qy = a[:, 1] + t * v[:, 1]
    d2 = (qx - px) ** 2 + (qy - py) ** 2
    k = np.argmin(d2, axis=1)
    rows = np.arange(k.shape[0])
    tk = t[rows, k]
    s = cum[k] + tk * seglen[k]
    # extrapolate past the ends
    first = k == 0
    last = k == v.shape[0] - 1
    ux, uy = v[k, 0] / seglen[k], v[k, 1] / seglen[k]
    rx, ry = px[:, 0] - a[k, 0], py[:, 0] - a[k, 1]
    along = rx * ux + ry * uy
    s = np.where(first & (along < 0), along, s)
    s = np.where(last & (along > seglen[k]), cum[k] + along, s)
    lat = ux * ry - uy * rx
    tangent = np.arctan2(uy, ux)
    return s, lat, tangent, k


def polyline_point_at(polyline: np.ndarray, s) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Position and tangent heading at arc length(s) s, linear extrapolation past the ends."""
    p = np.asarray(polyline, dtype=np.float64)
    v = p[1:] - p[:-1]
    seglen = np.hypot(v[:, 0], v[:, 1])
    cum = np.concatenate([[0.0], np.cumsum(seglen)])
    s = np.asarray(s, dtype=np.float64)
    k = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(seglen) - 1)
    frac = (s - cum[k]) / seglen[k]
    x = p[k, 0] + frac * v[k, 0]
    y = p[k, 1] + frac * v[k, 1]
    return x, y, np.arctan2(v[k, 1], v[k, 0])


def polyline_length(polyline: Sequence) -> float:
    p = np.asarray(polyline, dtype=np.float64)
    return float(np.hypot(*(p[1:] - p[:-1]).T).sum())
