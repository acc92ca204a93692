"""Scenario data model, JSON ingestion/serialization and preprocessing."""

from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from advbmt.errors import ParseError, ScenarioIoError, SchemaError

DT = 0.5
NUM_STEPS = 19
MAX_AGENTS = 32
MAX_SPEED = 60.0

AGENT_KINDS = ("vehicle", "pedestrian", "cyclist")
MAP_KINDS = ("lane", "road_edge", "broken_line", "yellow_line", "crosswalk", "stop_sign")
LIGHT_STATES = ("red", "yellow", "green", "unknown")

AGENT_FEATURE_DIM = 16
SEGMENT_FEATURE_DIM = 7 + len(MAP_KINDS)


def wrap_angle(a: float) -> float:
    """Normalize an angle to (-pi, pi]."""
    r = math.remainder(a, 2.0 * math.pi)
    if r <= -math.pi:
        r += 2.0 * math.pi
    return r


@dataclass(frozen=True)
class AgentState:
    x: float
    y: float
    heading: float
    speed: float
    valid: bool = True

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x, self.y, self.heading, self.speed)


INVALID_STATE = AgentState(0.0, 0.0, 0.0, 0.0, False)


@dataclass(frozen=True)
class AgentTrack:
    id: str
    kind: str
    length: float
    width: float
    height: float
    states: tuple[AgentState, ...]
    is_ego: bool = False

    @property
    def shape(self) -> tuple[float, float]:
        return (self.length, self.width)

    def valid_mask(self) -> np.ndarray:
        return np.array([s.valid for s in self.states], dtype=bool)

    def array(self) -> np.ndarray:
        """States as a ``[T, 4]`` array of (x, y, heading, speed)."""
        return np.array([s.as_tuple() for s in self.states], dtype=np.float64).reshape(-1, 4)


@dataclass(frozen=True)
class MapPolyline:
    kind: str
    points: tuple[tuple[float, float], ...]


@dataclass(frozen=True)
class TrafficLight:
    position: tuple[float, float]
    states: tuple[str, ...]


@dataclass(frozen=True)
class Scenario:
    scenario_id: str
    agents: tuple[AgentTrack, ...]
    map: tuple[MapPolyline, ...] = ()
    traffic_lights: tuple[TrafficLight, ...] = ()
    dt: float = DT
    num_steps: int = NUM_STEPS

    @property
    def ego_index(self) -> int:
        for i, a in enumerate(self.agents):
            if a.is_ego:
                return i
        raise SchemaError("is_ego: no ego agent")

    @property
    def ego(self) -> AgentTrack:
        return self.agents[self.ego_index]

    def agent_by_id(self, agent_id: str) -> AgentTrack | None:
        for a in self.agents:
            if a.id == agent_id:
                return a
        return None


# ---------------------------------------------------------------------------
# validation


def _check_finite(value: float, where: str) -> None:
    if not math.isfinite(value):
        raise SchemaError(f"{where}: non-finite value")


def validate_scenario(s: Scenario) -> None:
    """Raise SchemaError naming the first violated invariant."""
    if s.dt != DT:
        raise SchemaError(f"dt: expected {DT}, got {s.dt}")
    if s.num_steps != NUM_STEPS:
        raise SchemaError(f"num_steps: expected {NUM_STEPS}, got {s.num_steps}")
    if len(s.agents) > MAX_AGENTS + 1:
        raise SchemaError(f"agents: {len(s.agents)} exceeds limit {MAX_AGENTS}")
    n_ego = sum(1 for a in s.agents if a.is_ego)
    if n_ego != 1:
        raise SchemaError(f"is_ego: expected exactly one ego agent, found {n_ego}")
    for i, a in enumerate(s.agents):
        if a.kind not in AGENT_KINDS:
            raise SchemaError(f"agents[{i}].kind: unknown kind {a.kind!r}")
        for name in ("length", "width", "height"):
            v = getattr(a, name)
            _check_finite(v, f"agents[{i}].{name}")
        if a.length <= 0 or a.width <= 0:
            raise SchemaError(f"agents[{i}].length/width: must be positive")
        if len(a.states) != s.num_steps:
            raise SchemaError(f"agents[{i}].states: expected {s.num_steps} entries, got {len(a.states)}")
        for t, st in enumerate(a.states):
            for name in ("x", "y", "heading", "speed"):
                _check_finite(getattr(st, name), f"agents[{i}].states[{t}].{name}")
            if abs(st.speed) > MAX_SPEED:
                raise SchemaError(f"agents[{i}].states[{t}].speed: |speed| > {MAX_SPEED}")
    for i, pl in enumerate(s.map):
        if pl.kind not in MAP_KINDS:
            raise SchemaError(f"map[{i}].kind: unknown kind {pl.kind!r}")
        if len(pl.points) < 2:
            raise SchemaError(f"map[{i}].points: need at least 2 points")
        for k in range(len(pl.points) - 1):
            (x0, y0), (x1, y1) = pl.points[k], pl.points[k + 1]
            if x0 == x1 and y0 == y1:
                raise SchemaError(f"map[{i}].points[{k + 1}]: repeated point")
    for i, tl in enumerate(s.traffic_lights):
        if len(tl.states) != s.num_steps:
            raise SchemaError(f"traffic_lights[{i}].states: expected {s.num_steps} entries")
        for st in tl.states:
            if st not in LIGHT_STATES:
                raise SchemaError(f"traffic_lights[{i}].states: unknown state {st!r}")


# ---------------------------------------------------------------------------
# JSON (de)serialization


def _take(obj: Any, key: str, where: str) -> Any:
    if not isinstance(obj, dict):
        raise ParseError(f"{where}: expected an object")
    if key not in obj:
        raise ParseError(f"{where}.{key}: missing field")
    return obj[key]


def _reject_unknown(obj: dict, allowed: set[str], where: str) -> None:
    extra = sorted(set(obj) - allowed)
    if extra:
        raise ParseError(f"{where}.{extra[0]}: unknown key")


def _num(v: Any, where: str) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ParseError(f"{where}: expected a number")
    return float(v)


def _point(v: Any, where: str) -> tuple[float, float]:
    if not isinstance(v, list) or len(v) != 2:
        raise ParseError(f"{where}: expected [x, y]")
    return (_num(v[0], f"{where}[0]"), _num(v[1], f"{where}[1]"))


def _state_from_dict(d: Any, where: str) -> AgentState:
    if not isinstance(d, dict):
        raise ParseError(f"{where}: expected an object")
    _reject_unknown(d, {"valid", "x", "y", "heading", "speed", "vx", "vy"}, where)
    valid = _take(d, "valid", where)
    if not isinstance(valid, bool):
        raise ParseError(f"{where}.valid: expected a boolean")
    x = _num(_take(d, "x", where), f"{where}.x")
    y = _num(_take(d, "y", where), f"{where}.y")
    heading = _num(_take(d, "heading", where), f"{where}.heading")
    if "speed" in d:
        speed = _num(d["speed"], f"{where}.speed")
    elif "vx" in d and "vy" in d:
        # project a velocity vector onto the heading
        vx = _num(d["vx"], f"{where}.vx")
        vy = _num(d["vy"], f"{where}.vy")
        speed = vx * math.cos(heading) + vy * math.sin(heading)
    else:
        raise ParseError(f"{where}.speed: missing field")
    if not (math.isfinite(heading)):
        raise SchemaError(f"{where}.heading: non-finite value")
    return AgentState(x, y, wrap_angle(heading), speed, valid)


def scenario_from_dict(d: Any) -> Scenario:
    where = "scenario"
    if not isinstance(d, dict):
        raise ParseError(f"{where}: expected an object")
    _reject_unknown(d, {"scenario_id", "dt", "num_steps", "map", "traffic_lights", "agents"}, where)
    sid = _take(d, "scenario_id", where)
    if not isinstance(sid, str):
        raise ParseError("scenario_id: expected a string")
    dt = _num(_take(d, "dt", where), "dt")
    num_steps = _take(d, "num_steps", where)
    if isinstance(num_steps, bool) or not isinstance(num_steps, int):
        raise ParseError("num_steps: expected an integer")

    polylines = []
    raw_map = _take(d, "map", where)
    if not isinstance(raw_map, list):
        raise ParseError("map: expected a list")
    for i, pl in enumerate(raw_map):
        w = f"map[{i}]"
        _reject_unknown(pl if isinstance(pl, dict) else {}, {"kind", "points"}, w)
        kind = _take(pl, "kind", w)
        pts = _take(pl, "points", w)
        if not isinstance(pts, list):
            raise ParseError(f"{w}.points: expected a list")
        polylines.append(MapPolyline(kind, tuple(_point(p, f"{w}.points[{k}]") for k, p in enumerate(pts))))

    lights = []
    raw_lights = _take(d, "traffic_lights", where)
    if not isinstance(raw_lights, list):
        raise ParseError("traffic_lights: expected a list")
    for i, tl in enumerate(raw_lights):
        w = f"traffic_lights[{i}]"
        _reject_unknown(tl if isinstance(tl, dict) else {}, {"position", "states"}, w)
        states = _take(tl, "states", w)
        if not isinstance(states, list):
            raise ParseError(f"{w}.states: expected a list")
        lights.append(TrafficLight(_point(_take(tl, "position", w), f"{w}.position"), tuple(states)))

    agents = []
    raw_agents = _take(d, "agents", where)
    if not isinstance(raw_agents, list):
        raise ParseError("agents: expected a list")
    for i, a in enumerate(raw_agents):
        w = f"agents[{i}]"
        _reject_unknown(
            a if isinstance(a, dict) else {},
            {"id", "kind", "length", "width", "height", "is_ego", "states"},
            w,
        )
        is_ego = _take(a, "is_ego", w)
        if not isinstance(is_ego, bool):
            raise ParseError(f"{w}.is_ego: expected a boolean")
        raw_states = _take(a, "states", w)
        if not isinstance(raw_states, list):
            raise ParseError(f"{w}.states: expected a list")
        agents.append(
            AgentTrack(
                id=str(_take(a, "id", w)),
                kind=_take(a, "kind", w),
                length=_num(_take(a, "length", w), f"{w}.length"),
                width=_num(_take(a, "width", w), f"{w}.width"),
                height=_num(_take(a, "height", w), f"{w}.height"),
                is_ego=is_ego,
                states=tuple(_state_from_dict(st, f"{w}.states[{t}]") for t, st in enumerate(raw_states)),
            )
        )
    s = Scenario(
        scenario_id=sid,
        dt=dt,
        num_steps=num_steps,
        map=tuple(polylines),
        traffic_lights=tuple(lights),
        agents=tuple(agents),
    )
    validate_scenario(s)
    return s


def scenario_to_dict(s: Scenario) -> dict:
    return {
        "scenario_id": s.scenario_id,
        "dt": s.dt,
        "num_steps": s.num_steps,
        "map": [{"kind": pl.kind, "points": [[x, y] for x, y in pl.points]} for pl in s.map],
        "traffic_lights": [
            {"position": list(tl.position), "states": list(tl.states)} for tl in s.traffic_lights
        ],
        "agents": [
            {
                "id": a.id,
                "kind": a.kind,
                "length": a.length,
                "width": a.width,
                "height": a.height,
                "is_ego": a.is_ego,
                "states": [
                    {"valid": st.valid, "x": st.x, "y": st.y, "heading": st.heading, "speed": st.speed}
                    for st in a.states
                ],
            }
            for a in s.agents
        ],
    }


def dumps_scenario(s: Scenario) -> str:
    return json.dumps(scenario_to_dict(s), indent=1) + "\n"


def load_scenario(path: str | os.PathLike) -> Scenario:
    """Read and validate a scenario JSON file."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ScenarioIoError(f"cannot read {path}: {exc}") from exc
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: malformed JSON ({exc})") from exc
    return scenario_from_dict(d)


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    """Write via a sibling temp file and rename, so readers never see a partial file."""
    path = Path(path)
    tmp = None
    try:
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except OSError as exc:
        if tmp is not None and os.path.exists(tmp):
            os.unlink(tmp)
        raise ScenarioIoError(f"cannot write {path}: {exc}") from exc


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def save_scenario(s: Scenario, path: str | os.PathLike) -> None:
    atomic_write_text(path, dumps_scenario(s))


# ---------------------------------------------------------------------------
# preprocessing


@dataclass(frozen=True)
class CenteredScenario:
    """A scenario translated into the map-centred frame with ego at index 0.

    ``agent_order[k]`` is the index in the source scenario of agent ``k``.
    ``segment_features[i]`` has one row per segment of polyline ``i``.
    """

    scenario: Scenario
    center: tuple[float, float]
    agent_order: tuple[int, ...]
    segment_features: tuple[np.ndarray, ...] = field(repr=False)
    agent_features: np.ndarray = field(repr=False)


def map_center(s: Scenario) -> tuple[float, float]:
    pts = [p for pl in s.map for p in pl.points]
    if not pts:
        pts = [(st.x, st.y) for a in s.agents for st in a.states if st.valid]
    if not pts:
        return (0.0, 0.0)
    arr = np.asarray(pts, dtype=np.float64)
    lo, hi = arr.min(axis=0), arr.max(axis=0)
    return (float((lo[0] + hi[0]) / 2.0), float((lo[1] + hi[1]) / 2.0))


def translate_scenario(s: Scenario, dx: float, dy: float) -> Scenario:
    agents = tuple(
        replace(
            a,
            states=tuple(
                replace(st, x=st.x + dx, y=st.y + dy) if st.valid else st for st in a.states
            ),
        )
        for a in s.agents
    )
    polylines = tuple(
        MapPolyline(pl.kind, tuple((x + dx, y + dy) for x, y in pl.points)) for pl in s.map
    )
    lights = tuple(
        TrafficLight((tl.position[0] + dx, tl.position[1] + dy), tl.states) for tl in s.traffic_lights
    )
    return replace(s, agents=agents, map=polylines, traffic_lights=lights)


def segment_features(pl: MapPolyline) -> np.ndarray:
    """Per-segment start, end, unit direction, length and one-hot kind."""
    pts = np.asarray(pl.points, dtype=np.float64)
    start, end = pts[:-1], pts[1:]
    delta = end - start
    length = np.hypot(delta[:, 0], delta[:, 1])
    unit = delta / length[:, None]
    onehot = np.zeros((len(start), len(MAP_KINDS)))
    onehot[:, MAP_KINDS.index(pl.kind)] = 1.0
    return np.concatenate([start, end, unit, length[:, None], onehot], axis=1)


def agent_feature_vector(track: AgentTrack, st: AgentState) -> np.ndarray:
    v = np.zeros(AGENT_FEATURE_DIM)
    if st.valid:
        v[0:5] = (st.x, st.y, math.sin(st.heading), math.cos(st.heading), st.speed)
    v[5:8] = (track.length, track.width, track.height)
    v[8 + AGENT_KINDS.index(track.kind)] = 1.0
    v[11] = 1.0 if st.valid else 0.0
    v[12] = 1.0 if track.is_ego else 0.0
    return v


def order_agents(s: Scenario) -> list[int]:
    """Ego first, others by distance to the ego at step 0 (stable for ties)."""
    ego_i = s.ego_index
    e0 = s.agents[ego_i].states[0]

    def key(i: int) -> tuple[float, int]:
        st = s.agents[i].states[0]
        if not (st.valid and e0.valid):
            return (math.inf, i)
        return (math.hypot(st.x - e0.x, st.y - e0.y), i)

    rest = sorted((i for i in range(len(s.agents)) if i != ego_i), key=key)
    return [ego_i] + rest


def preprocess(s: Scenario) -> CenteredScenario:
    cx, cy = map_center(s)
    moved = translate_scenario(s, -cx, -cy)
    order = order_agents(moved)
    moved = replace(moved, agents=tuple(moved.agents[i] for i in order))
    segs = tuple(segment_features(pl) for pl in moved.map)
    feats = np.stack(
        [np.stack([agent_feature_vector(a, st) for st in a.states]) for a in moved.agents]
    ) if moved.agents else np.zeros((0, s.num_steps, AGENT_FEATURE_DIM))
    return CenteredScenario(
        scenario=moved,
        center=(cx, cy),
        agent_order=tuple(order),
        segment_features=segs,
        agent_features=feats,
    )


def polyline_pose(pl: MapPolyline) -> tuple[float, float, float]:
    """Reference pose of a polyline: its middle point and local direction."""
    pts = np.asarray(pl.points, dtype=np.float64)
    seg = np.diff(pts, axis=0)
    lengths = np.hypot(seg[:, 0], seg[:, 1])
    cum = np.concatenate([[0.0], np.cumsum(lengths)])
    half = cum[-1] / 2.0
    k = int(np.clip(np.searchsorted(cum, half, side="right") - 1, 0, len(seg) - 1))
    frac = (half - cum[k]) / lengths[k]
    p = pts[k] + frac * seg[k]
    return (float(p[0]), float(p[1]), math.atan2(seg[k, 1], seg[k, 0]))


def pairwise_agent_distances(s: Scenario) -> np.ndarray:
    """``[T, N, N]`` center distances (NaN where either agent is invalid)."""
    arr = np.stack([a.array() for a in s.agents])  # N, T, 4
    valid = np.stack([a.valid_mask() for a in s.agents])
    d = np.hypot(
        arr[:, None, :, 0] - arr[None, :, :, 0], arr[:, None, :, 1] - arr[None, :, :, 1]
    ).transpose(2, 0, 1)
    both = (valid[:, None, :] & valid[None, :, :]).transpose(2, 0, 1)
    return np.where(both, d, np.nan)


def with_agents(s: Scenario, agents: Sequence[AgentTrack]) -> Scenario:
    return replace(s, agents=tuple(agents))
