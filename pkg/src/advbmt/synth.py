"""Seeded synthetic traffic scenarios.

Roads are straight or constant-curvature with 2-4 lanes, optionally
two-way.  Agents are driven by a lane-keeping pursuit controller with
intelligent-driver-model speed control and occasional lane changes.  Every
step applies a constant continuous (acceleration, yaw-rate) control through
the same midpoint dynamics as the token space, so all trajectories are
token-representable up to quantization error.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from advbmt.errors import GenerationError
from advbmt.geometry import boxes_overlap_arrays
from advbmt.kinematics import forward_arrays
from advbmt.scenario import (
    DT,
    NUM_STEPS,
    AgentState,
    AgentTrack,
    MapPolyline,
    Scenario,
    TrafficLight,
    wrap_angle,
)

LANE_WIDTH = 3.5
ROAD_LENGTH = 320.0
MAX_ATTEMPTS = 1000

ACCEL_LIMITS = (-8.0, 3.0)
YAW_RATE_LIMIT = 0.6

SHAPES = {
    "vehicle": None,  # sampled per agent
    "cyclist": (1.8, 0.6, 1.7),
    "pedestrian": (0.5, 0.5, 1.8),
}


class ReferenceLine:
    """Constant-curvature road reference line sampled densely for projection."""

    def __init__(self, origin: tuple[float, float], heading: float, curvature: float, length: float):
        self.origin = origin
        self.heading = heading
        self.curvature = curvature
        self.length = length
        self.s = np.arange(0.0, length + 0.25, 0.25)
        self.xy, self.psi = self.at(self.s)

    def at(self, s):
        s = np.asarray(s, float)
        k = self.curvature
        psi = self.heading + k * s
        if abs(k) < 1e-12:
            x = self.origin[0] + s * math.cos(self.heading)
            y = self.origin[1] + s * math.sin(self.heading)
        else:
            x = self.origin[0] + (np.sin(psi) - math.sin(self.heading)) / k
            y = self.origin[1] - (np.cos(psi) - math.cos(self.heading)) / k
        return np.stack([x, y], axis=-1), psi

    def point(self, s, d):
        xy, psi = self.at(s)
        n = np.stack([-np.sin(psi), np.cos(psi)], axis=-1)
        return xy + np.asarray(d, float)[..., None] * n, psi

    def project(self, x: float, y: float) -> tuple[float, float]:
        """Arc length and signed lateral offset (left positive) of a point."""
        d2 = (self.xy[:, 0] - x) ** 2 + (self.xy[:, 1] - y) ** 2
        i = int(np.argmin(d2))
        psi = self.psi[i]
        dx, dy = x - self.xy[i, 0], y - self.xy[i, 1]
        along = dx * math.cos(psi) + dy * math.sin(psi)
        lateral = -dx * math.sin(psi) + dy * math.cos(psi)
        return float(self.s[i] + along), float(lateral)


@dataclass
class _Lane:
    offset: float
    forward: bool  # travels with increasing arc length


@dataclass
class _Agent:
    kind: str
    length: float
    width: float
    height: float
    lane: int
    target_offset: float
    forward: bool
    desired_speed: float
    x: float
    y: float
    heading: float
    speed: float
    change_step: int = -1
    change_to: int = -1


def _build_road(rng: np.random.Generator):
    n_lanes = int(rng.integers(2, 5))
    two_way = bool(rng.random() < 0.5)
    n_back = (n_lanes // 2) if two_way else 0
    lanes = []
    # lanes indexed right to left; backward lanes sit on the left
    for k in range(n_lanes):
        offset = (k - (n_lanes - 1) / 2.0) * LANE_WIDTH
        lanes.append(_Lane(offset, k < n_lanes - n_back))
    curved = bool(rng.random() < 0.5)
    curvature = 0.0
    if curved:
        radius = float(rng.uniform(90.0, 250.0))
        curvature = (1.0 if rng.random() < 0.5 else -1.0) / radius
    origin = (float(rng.uniform(-400, 400)), float(rng.uniform(-400, 400)))
    ref = ReferenceLine(origin, float(rng.uniform(-math.pi, math.pi)), curvature, ROAD_LENGTH)
    return ref, lanes


def _map_polylines(ref: ReferenceLine, lanes: list[_Lane]) -> list[MapPolyline]:
    s = np.arange(0.0, ROAD_LENGTH + 1e-9, 10.0)
    out = []

    def line(kind: str, d: float, forward: bool = True) -> MapPolyline:
        pts, _ = ref.point(s, np.full_like(s, d))
        if not forward:
            pts = pts[::-1]
        return MapPolyline(kind, tuple((float(p[0]), float(p[1])) for p in pts))

    for ln in lanes:
        out.append(line("lane", ln.offset, ln.forward))
    half = LANE_WIDTH / 2.0
    out.append(line("road_edge", lanes[0].offset - half))
    out.append(line("road_edge", lanes[-1].offset + half))
    for a, b in zip(lanes[:-1], lanes[1:]):
        kind = "broken_line" if a.forward == b.forward else "yellow_line"
        out.append(line(kind, (a.offset + b.offset) / 2.0))
    return out


def _spawn(rng: np.random.Generator, ref: ReferenceLine, lanes: list[_Lane], n: int) -> list[_Agent]:
    agents: list[_Agent] = []
    placed: list[tuple[int, float, float]] = []  # lane, s, length
    tries = 0
    while len(agents) < n and tries < 200:
        tries += 1
        r = rng.random()
        kind = "vehicle" if (r < 0.8 or not agents) else ("cyclist" if r < 0.92 else "pedestrian")
        if kind == "vehicle":
            length, width, height = float(rng.uniform(4.2, 5.2)), float(rng.uniform(1.8, 2.1)), 1.6
            v0 = float(rng.uniform(8.0, 16.0))
        else:
            length, width, height = SHAPES[kind]
            v0 = float(rng.uniform(4.0, 6.0)) if kind == "cyclist" else float(rng.uniform(1.0, 1.6))
        if kind == "pedestrian":
            lane_idx = -1  # walks beside the rightmost road edge
            offset = lanes[0].offset - LANE_WIDTH / 2.0 - 1.5
            forward = bool(rng.random() < 0.5)
        else:
            cand = [i for i, ln in enumerate(lanes)] if kind == "vehicle" else [0]
            lane_idx = int(cand[int(rng.integers(len(cand)))])
            offset = lanes[lane_idx].offset
            forward = lanes[lane_idx].forward
        s0 = float(rng.uniform(10.0, 140.0)) if forward else float(rng.uniform(180.0, 310.0))
        v_init = float(rng.uniform(0.6, 1.0)) * v0
        ok = True
        for lane_j, s_j, len_j in placed:
            if lane_j == lane_idx and abs(s_j - s0) < (length + len_j) / 2.0 + 6.0 + 1.2 * v_init:
                ok = False
                break
        if not ok:
            continue
        (p,), (psi,) = ref.point([s0], [offset])
        heading = float(psi) if forward else float(psi) + math.pi
        agents.append(
            _Agent(kind, length, width, height, lane_idx, offset, forward, v0,
                   float(p[0]), float(p[1]), wrap_angle(heading), v_init)
        )
        placed.append((lane_idx, s0, length))
    for ag in agents:
        if ag.kind != "vehicle" or rng.random() >= 0.3:
            continue
        same = [i for i, ln in enumerate(lanes) if ln.forward == ag.forward and abs(i - ag.lane) == 1]
        if same:
            ag.change_to = int(same[int(rng.integers(len(same)))])
            ag.change_step = int(rng.integers(1, 12))
    return agents


def _idm_accel(v: float, v0: float, gap: float | None, dv: float) -> float:
    a_max, b, s0, headway = 1.5, 2.0, 2.0, 1.2
    acc = 1.0 - (v / v0) ** 4
    if gap is not None:
        s_star = s0 + max(0.0, v * headway + v * dv / (2.0 * math.sqrt(a_max * b)))
        acc -= (s_star / max(gap, 0.1)) ** 2
    return a_max * acc


def _simulate(rng: np.random.Generator, ref: ReferenceLine, lanes: list[_Lane], agents: list[_Agent]) -> np.ndarray:
    """Returns ``[N, T, 4]`` states."""
    n = len(agents)
    traj = np.zeros((n, NUM_STEPS, 4))
    for i, ag in enumerate(agents):
        traj[i, 0] = (ag.x, ag.y, ag.heading, ag.speed)
    for t in range(NUM_STEPS - 1):
        proj = [ref.project(ag.x, ag.y) for ag in agents]
        controls = []
        for i, ag in enumerate(agents):
            if ag.change_step == t:
                tgt = lanes[ag.change_to].offset
                clear = all(
                    abs(proj[j][0] - proj[i][0]) > 18.0 or abs(proj[j][1] - tgt) > 2.5
                    for j in range(n) if j != i
                )
                if clear:
                    ag.target_offset = tgt
                    ag.lane = ag.change_to
            s_i, d_i = proj[i]
            sign = 1.0 if ag.forward else -1.0
            # nearest agent ahead sharing the lane (either current or target lateral position)
            gap, dv = None, 0.0
            for j, other in enumerate(agents):
                if j == i or other.forward != ag.forward:
                    continue
                s_j, d_j = proj[j]
                ds = (s_j - s_i) * sign
                lateral_near = abs(d_j - d_i) < 2.6 or abs(d_j - ag.target_offset) < 2.6
                if ds > 0 and lateral_near:
                    g = ds - (ag.length + other.length) / 2.0
                    if gap is None or g < gap:
                        gap, dv = g, ag.speed - other.speed
            a = _idm_accel(ag.speed, ag.desired_speed, gap, dv)
            a = min(max(a, ACCEL_LIMITS[0]), ACCEL_LIMITS[1])
            if ag.speed + a * DT < 0.0:
                a = -ag.speed / DT
            lookahead = max(8.0, 1.6 * ag.speed)
            (p,), _ = ref.point([s_i + sign * lookahead], [ag.target_offset])
            desired = math.atan2(p[1] - ag.y, p[0] - ag.x)
            w = 0.8 * wrap_angle(desired - ag.heading) / DT
            w = min(max(w, -YAW_RATE_LIMIT), YAW_RATE_LIMIT)
            controls.append((a, w))
        for i, (ag, (a, w)) in enumerate(zip(agents, controls)):
            x, y, th, v = forward_arrays(ag.x, ag.y, ag.heading, ag.speed, a, w, DT)
            ag.x, ag.y, ag.heading, ag.speed = float(x), float(y), float(th), float(v)
            traj[i, t + 1] = (ag.x, ag.y, ag.heading, ag.speed)
    return traj


def _any_overlap(traj: np.ndarray, agents: list[_Agent]) -> bool:
    n = len(agents)
    for i in range(n):
        for j in range(i + 1, n):
            a, b = agents[i], agents[j]
            hit = boxes_overlap_arrays(
                traj[i, :, 0], traj[i, :, 1], traj[i, :, 2], a.length, a.width,
                traj[j, :, 0], traj[j, :, 1], traj[j, :, 2], b.length, b.width,
            )
            if hit.any():
                return True
    return False


def synth_scenario(rng: np.random.Generator, scenario_id: str) -> Scenario:
    for _ in range(MAX_ATTEMPTS):
        ref, lanes = _build_road(rng)
        n = int(rng.integers(2, 9))
        agents = _spawn(rng, ref, lanes, n)
        if len(agents) < 2:
            continue
        traj = _simulate(rng, ref, lanes, agents)
        if _any_overlap(traj, agents):
            continue
        vehicles = [i for i, ag in enumerate(agents) if ag.kind == "vehicle"]
        ego = vehicles[int(rng.integers(len(vehicles)))]
        tracks = []
        for i, ag in enumerate(agents):
            states = tuple(
                AgentState(float(r[0]), float(r[1]), wrap_angle(float(r[2])), float(r[3]), True)
                for r in traj[i]
            )
            tracks.append(
                AgentTrack(
                    id=f"agent_{i}", kind=ag.kind, length=round(ag.length, 3),
                    width=round(ag.width, 3), height=ag.height, states=states, is_ego=(i == ego),
                )
            )
        lights = ()
        if rng.random() < 0.5:
            (p,), _ = ref.point([float(rng.uniform(60.0, 260.0))], [lanes[0].offset])
            lights = (TrafficLight((float(p[0]), float(p[1])), ("unknown",) * NUM_STEPS),)
        return Scenario(
            scenario_id=scenario_id,
            agents=tuple(tracks),
            map=tuple(_map_polylines(ref, lanes)),
            traffic_lights=lights,
        )
    raise GenerationError(f"{scenario_id}: no collision-free layout after {MAX_ATTEMPTS} attempts")


def synth_scenarios(count: int, seed: int) -> list[Scenario]:
    """Generate ``count`` scenarios; scenario ``i`` depends only on ``(seed, i)``."""
    if count < 1:
        raise ValueError("count must be >= 1")
    return [
        synth_scenario(np.random.default_rng([seed, i]), f"synth-{seed}-{i:05d}")
        for i in range(count)
    ]
