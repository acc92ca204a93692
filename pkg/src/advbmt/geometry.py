"""Oriented rectangles and separating-axis tests."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from advbmt.scenario import AgentState, AgentTrack


@dataclass(frozen=True)
class OrientedBox:
    center: tuple[float, float]
    heading: float
    length: float
    width: float

    def __post_init__(self):
        if not (self.length > 0 and self.width > 0):
            raise ValueError("box length and width must be positive")

    @classmethod
    def of(cls, track: AgentTrack, state: AgentState) -> "OrientedBox":
        return cls((state.x, state.y), state.heading, track.length, track.width)

    def axes(self) -> np.ndarray:
        c, s = math.cos(self.heading), math.sin(self.heading)
        return np.array([[c, s], [-s, c]])

    def corners(self) -> np.ndarray:
        ax = self.axes()
        hl, hw = self.length / 2.0, self.width / 2.0
        ctr = np.asarray(self.center)
        return np.array([
            ctr + hl * ax[0] + hw * ax[1],
            ctr - hl * ax[0] + hw * ax[1],
            ctr - hl * ax[0] - hw * ax[1],
            ctr + hl * ax[0] - hw * ax[1],
        ])

    def half_extent(self, axis: np.ndarray) -> float:
        ax = self.axes()
        return abs(axis @ ax[0]) * self.length / 2.0 + abs(axis @ ax[1]) * self.width / 2.0


def separation(a: OrientedBox, b: OrientedBox) -> float:
    """Largest gap between the projections over the four candidate axes.

    Positive when the boxes are disjoint; otherwise minus the penetration
    depth (the smallest push-out distance along an edge normal).
    """
    d = np.asarray(b.center, float) - np.asarray(a.center, float)
    best = -math.inf
    for axis in np.concatenate([a.axes(), b.axes()]):
        gap = abs(d @ axis) - a.half_extent(axis) - b.half_extent(axis)
        best = max(best, gap)
    return float(best)


def box_overlap(a: OrientedBox, b: OrientedBox) -> bool:
    """Closed-set intersection test; touching boundaries count as overlap."""
    return separation(a, b) <= 0.0


def place_in_contact(
    fixed: OrientedBox,
    heading: float,
    length: float,
    width: float,
    direction: tuple[float, float],
    penetration: float = 0.05,
    tol: float = 1e-12,
) -> OrientedBox:
    """Slide a new box from ``fixed.center`` along ``direction`` until contact.

    The separation is convex in the travel distance, so bisection finds the
    unique distance at which it equals ``-penetration``.
    """
    u = np.asarray(direction, float)
    u = u / np.hypot(*u)
    c0 = np.asarray(fixed.center, float)

    def sep(r: float) -> float:
        p = c0 + r * u
        return separation(fixed, OrientedBox((float(p[0]), float(p[1])), heading, length, width))

    lo, hi = 0.0, fixed.length + fixed.width + length + width
    while sep(hi) < -penetration:
        hi *= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if sep(mid) < -penetration:
            lo = mid
        else:
            hi = mid
        if hi - lo < tol:
            break
    p = c0 + 0.5 * (lo + hi) * u
    return OrientedBox((float(p[0]), float(p[1])), heading, length, width)


def boxes_overlap_arrays(
    xa, ya, ha, la, wa, xb, yb, hb, lb, wb
) -> np.ndarray:
    """Vectorized closed-box overlap test for aligned arrays of boxes."""
    xa, ya, ha, xb, yb, hb = (np.asarray(v, float) for v in (xa, ya, ha, xb, yb, hb))
    la, wa, lb, wb = (np.broadcast_to(np.asarray(v, float), xa.shape) for v in (la, wa, lb, wb))
    dx, dy = xb - xa, yb - ya
    ca, sa, cb, sb = np.cos(ha), np.sin(ha), np.cos(hb), np.sin(hb)
    axes = [(ca, sa), (-sa, ca), (cb, sb), (-sb, cb)]
    sep = np.full(xa.shape, -np.inf)
    for ux, uy in axes:
        ext_a = np.abs(ux * ca + uy * sa) * la / 2 + np.abs(-ux * sa + uy * ca) * wa / 2
        ext_b = np.abs(ux * cb + uy * sb) * lb / 2 + np.abs(-ux * sb + uy * cb) * wb / 2
        sep = np.maximum(sep, np.abs(dx * ux + dy * uy) - ext_a - ext_b)
    return sep <= 0.0
