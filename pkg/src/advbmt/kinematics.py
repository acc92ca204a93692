"""Discrete (acceleration, yaw-rate) motion tokens and midpoint dynamics.

Tokens live on a ``K x K`` grid of control bin centres.  A token is applied
over one step of ``dt`` seconds with midpoint integration; the reverse step
is the exact algebraic inverse, so forward and reverse decoding share one
vocabulary.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np

from advbmt.errors import InvalidStateError
from advbmt.scenario import AgentState, AgentTrack, wrap_angle


class Direction(enum.Enum):
    FORWARD = "forward"
    REVERSE = "reverse"


@dataclass(frozen=True)
class MotionToken:
    id: int
    i_accel: int
    i_yaw: int
    accel: float
    yaw_rate: float


@dataclass(frozen=True)
class TokenSpace:
    a_max: float = 10.0
    omega_max: float = math.pi / 2
    K: int = 33
    dt: float = 0.5

    def __post_init__(self):
        if self.K < 1 or self.K % 2 == 0:
            raise ValueError(f"K must be odd, got {self.K}")

    @property
    def num_tokens(self) -> int:
        return self.K * self.K

    @cached_property
    def accel_bins(self) -> np.ndarray:
        return np.linspace(-self.a_max, self.a_max, self.K)

    @cached_property
    def yaw_bins(self) -> np.ndarray:
        return np.linspace(-self.omega_max, self.omega_max, self.K)

    @cached_property
    def token_controls(self) -> np.ndarray:
        """``[K*K, 2]`` (accel, yaw_rate) for every token id."""
        a = np.repeat(self.accel_bins, self.K)
        w = np.tile(self.yaw_bins, self.K)
        return np.stack([a, w], axis=1)

    @property
    def zero_token_id(self) -> int:
        c = self.K // 2
        return c * self.K + c

    def token(self, token_id: int) -> MotionToken:
        if not 0 <= token_id < self.num_tokens:
            raise ValueError(f"token id {token_id} out of range")
        i_a, i_w = divmod(int(token_id), self.K)
        return MotionToken(token_id, i_a, i_w, float(self.accel_bins[i_a]), float(self.yaw_bins[i_w]))

    def token_from_bins(self, i_accel: int, i_yaw: int) -> MotionToken:
        return self.token(i_accel * self.K + i_yaw)

    def controls(self, token_id: int) -> tuple[float, float]:
        c = self.token_controls[token_id]
        return float(c[0]), float(c[1])

    def yaw_flip_permutation(self) -> np.ndarray:
        """Token ids with the yaw-rate sign flipped."""
        ids = np.arange(self.num_tokens)
        i_a, i_w = np.divmod(ids, self.K)
        return i_a * self.K + (self.K - 1 - i_w)


DEFAULT_TOKEN_SPACE = TokenSpace()


# ---------------------------------------------------------------------------
# dynamics on raw arrays; broadcast over any leading shape


def forward_arrays(x, y, theta, v, a, w, dt):
    v_next = v + a * dt
    mid = theta + w * (dt / 2.0)
    v_bar = (v + v_next) / 2.0
    x_next = x + v_bar * np.cos(mid) * dt
    y_next = y + v_bar * np.sin(mid) * dt
    theta_next = _wrap_array(theta + w * dt)
    return x_next, y_next, theta_next, v_next


def reverse_arrays(x, y, theta, v, a, w, dt):
    v_prev = v - a * dt
    mid = theta - w * (dt / 2.0)
    v_bar = (v + v_prev) / 2.0
    x_prev = x - v_bar * np.cos(mid) * dt
    y_prev = y - v_bar * np.sin(mid) * dt
    theta_prev = _wrap_array(theta - w * dt)
    return x_prev, y_prev, theta_prev, v_prev


def _wrap_array(a):
    r = np.remainder(np.asarray(a, dtype=np.float64) + np.pi, 2.0 * np.pi) - np.pi
    r = np.where(r <= -np.pi, r + 2.0 * np.pi, r)
    return r if r.ndim else float(r)


def step_forward(s: AgentState, z: MotionToken | int, ts: TokenSpace = DEFAULT_TOKEN_SPACE) -> AgentState:
    a, w = _controls(z, ts)
    v_next = s.speed + a * ts.dt
    mid = s.heading + w * ts.dt / 2.0
    v_bar = (s.speed + v_next) / 2.0
    return AgentState(
        s.x + v_bar * math.cos(mid) * ts.dt,
        s.y + v_bar * math.sin(mid) * ts.dt,
        wrap_angle(s.heading + w * ts.dt),
        v_next,
        True,
    )


def step_reverse(s_next: AgentState, z: MotionToken | int, ts: TokenSpace = DEFAULT_TOKEN_SPACE) -> AgentState:
    a, w = _controls(z, ts)
    v_prev = s_next.speed - a * ts.dt
    # heading midpoint taken from the later state; equals theta + w*dt/2 of the earlier one
    mid = s_next.heading - w * ts.dt / 2.0
    v_bar = (s_next.speed + v_prev) / 2.0
    return AgentState(
        s_next.x - v_bar * math.cos(mid) * ts.dt,
        s_next.y - v_bar * math.sin(mid) * ts.dt,
        wrap_angle(s_next.heading - w * ts.dt),
        v_prev,
        True,
    )


def step(s: AgentState, z: MotionToken | int, direction: Direction, ts: TokenSpace = DEFAULT_TOKEN_SPACE) -> AgentState:
    if direction is Direction.FORWARD:
        return step_forward(s, z, ts)
    return step_reverse(s, z, ts)


def _controls(z: MotionToken | int, ts: TokenSpace) -> tuple[float, float]:
    if isinstance(z, MotionToken):
        return z.accel, z.yaw_rate
    return ts.controls(int(z))


# ---------------------------------------------------------------------------
# tokenization


def box_corners(x, y, theta, length, width) -> np.ndarray:
    """Corners of oriented rectangles, shape ``[..., 4, 2]`` (fl, rl, rr, fr)."""
    x, y, theta = np.asarray(x, float), np.asarray(y, float), np.asarray(theta, float)
    c, s = np.cos(theta), np.sin(theta)
    hl, hw = length / 2.0, width / 2.0
    local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
    cx = x[..., None] + local[:, 0] * c[..., None] - local[:, 1] * s[..., None]
    cy = y[..., None] + local[:, 0] * s[..., None] + local[:, 1] * c[..., None]
    return np.stack([cx, cy], axis=-1)


def contour_error(a: AgentState, b: AgentState, shape: tuple[float, float]) -> float:
    """Mean distance between corresponding corners of two footprints."""
    ca = box_corners(a.x, a.y, a.heading, *shape)
    cb = box_corners(b.x, b.y, b.heading, *shape)
    return float(np.mean(np.hypot(*(ca - cb).T)))


def candidate_states(s_from: AgentState, direction: Direction, ts: TokenSpace) -> tuple[np.ndarray, ...]:
    """Successor (or predecessor) of ``s_from`` under every token."""
    ctrl = ts.token_controls
    fn = forward_arrays if direction is Direction.FORWARD else reverse_arrays
    return fn(s_from.x, s_from.y, s_from.heading, s_from.speed, ctrl[:, 0], ctrl[:, 1], ts.dt)


def tokenize_pair(
    s_from: AgentState,
    s_to: AgentState,
    shape: tuple[float, float],
    direction: Direction,
    ts: TokenSpace = DEFAULT_TOKEN_SPACE,
) -> tuple[MotionToken, float]:
    """Exhaustive search for the token whose footprint best matches ``s_to``.

    Ties resolve to the smallest id (``np.argmin`` returns the first minimum).
    """
    x, y, th, _ = candidate_states(s_from, direction, ts)
    cand = box_corners(x, y, th, *shape)  # [K*K, 4, 2]
    target = box_corners(s_to.x, s_to.y, s_to.heading, *shape)
    diff = cand - target
    err = np.mean(np.sqrt(diff[..., 0] ** 2 + diff[..., 1] ** 2), axis=1)
    best = int(np.argmin(err))
    return ts.token(best), float(err[best])


def tokenize_track(
    track: AgentTrack,
    direction: Direction,
    ts: TokenSpace = DEFAULT_TOKEN_SPACE,
    start: int = 0,
    stop: int | None = None,
) -> tuple[list[MotionToken], list[float]]:
    """Rollout tokenization of ``track.states[start:stop]``.

    Each pair is tokenized from the reconstructed (not recorded) previous
    state.  Forward tokens are returned in chronological order; reverse
    tokens start at the last state and walk back in time.
    Returns the tokens and their per-step contour errors.
    """
    states = track.states[start:stop]
    if len(states) < 2:
        return [], []
    for k, st in enumerate(states):
        if not st.valid:
            raise InvalidStateError(start + k)
    seq = list(states) if direction is Direction.FORWARD else list(reversed(states))
    anchor = seq[0]
    tokens, errors = [], []
    for target in seq[1:]:
        z, e = tokenize_pair(anchor, target, track.shape, direction, ts)
        tokens.append(z)
        errors.append(e)
        anchor = step(anchor, z, direction, ts)
    return tokens, errors


def detokenize_track(
    s_anchor: AgentState,
    tokens: Sequence[MotionToken | int],
    direction: Direction,
    ts: TokenSpace = DEFAULT_TOKEN_SPACE,
) -> list[AgentState]:
    """Decode tokens from an anchor; output is always chronological."""
    if len(tokens) == 0:
        raise ValueError("tokens must be non-empty")
    out = [s_anchor]
    for z in tokens:
        out.append(step(out[-1], z, direction, ts))
    if direction is Direction.REVERSE:
        out.reverse()
    return out


def quantization_bound(
    shape: tuple[float, float] = (4.8, 2.0),
    speeds: Sequence[float] = (0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0),
    grid: int = 50,
    ts: TokenSpace = DEFAULT_TOKEN_SPACE,
    direction: Direction = Direction.FORWARD,
) -> float:
    """Brute-force bound on single-step tokenization error.

    Applies every control on a ``grid x grid`` lattice over the full control
    box, from states at each speed in ``speeds``, and returns the worst
    best-token contour error.
    """
    a_vals = np.linspace(-ts.a_max, ts.a_max, grid)
    w_vals = np.linspace(-ts.omega_max, ts.omega_max, grid)
    fn = forward_arrays if direction is Direction.FORWARD else reverse_arrays
    worst = 0.0
    for v in speeds:
        s0 = AgentState(0.0, 0.0, 0.3, v)
        for a in a_vals:
            tx, ty, tth, _ = fn(s0.x, s0.y, s0.heading, s0.speed, a, w_vals, ts.dt)
            for k in range(grid):
                target = AgentState(float(tx[k]), float(ty[k]), float(tth[k]), 0.0)
                _, e = tokenize_pair(s0, target, shape, direction, ts)
                worst = max(worst, e)
    return worst
