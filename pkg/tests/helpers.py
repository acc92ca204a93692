"""Small hand-built scenarios shared by the tests."""

from __future__ import annotations

import numpy as np

from advbmt.scenario import AgentState, AgentTrack, MapPolyline, Scenario


def straight_track(agent_id="a", x0=0.0, y0=0.0, heading=0.0, speed=8.0, n=19, dt=0.5,
                   is_ego=False, kind="vehicle", length=4.8, width=2.0) -> AgentTrack:
    c, s = np.cos(heading), np.sin(heading)
    states = tuple(
        AgentState(x0 + c * speed * dt * t, y0 + s * speed * dt * t, heading, speed, True) for t in range(n)
    )
    return AgentTrack(agent_id, kind, length, width, 1.6, states, is_ego)


def simple_scenario(agents=None, polylines=None, sid="unit") -> Scenario:
    if agents is None:
        agents = [straight_track("ego", is_ego=True), straight_track("b", y0=8.0, speed=6.0)]
    if polylines is None:
        polylines = [MapPolyline("lane", ((-10.0, 0.0), (100.0, 0.0)))]
    return Scenario(sid, tuple(agents), tuple(polylines), (), 0.5, 19)
