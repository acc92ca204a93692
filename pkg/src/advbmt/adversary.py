"""Adversarial agent insertion: collision sampling, reverse reconstruction, rule filter."""

from __future__ import annotations

import enum
import json
import math
from dataclasses import asdict, dataclass, replace
from typing import Any, Mapping, Sequence

import numpy as np

from advbmt.geometry import OrientedBox, box_overlap, place_in_contact
from advbmt.kinematics import Direction, MotionToken, tokenize_track
from advbmt.model import BmtModel
from advbmt.rollout import rollout
from advbmt.scenario import (
    INVALID_STATE,
    AgentState,
    AgentTrack,
    CenteredScenario,
    Scenario,
    preprocess,
    wrap_angle,
    with_agents,
)

MIN_COLLISION_STEP = 2
SPEED_OFFSET = (-2.0, 6.0)
SPEED_CLAMP = (0.5, 30.0)
CONTACT_PENETRATION = 0.05
ADV_ID = "adv"

# length, width, height
ADV_SHAPES = {
    "vehicle": (4.8, 2.0, 1.5),
    "cyclist": (1.8, 0.6, 1.7),
    "pedestrian": (0.5, 0.5, 1.8),
}

KAPPA_THRESHOLD = 0.8
MIN_PATH_LENGTH = 5.0
MIN_MEAN_SPEED = 1.0
DS_FLOOR = 1e-6
REJECTION_REASONS = ("too_short", "too_slow", "curvature", "early_collision")


class GenerationMode(enum.Enum):
    REPLAY = "replay"
    CLOSED_LOOP_REVERSE = "closed_loop_reverse"
    FORWARD_REFINE = "forward_refine"


@dataclass(frozen=True)
class CollisionSpec:
    t_c: int
    adv_heading: float
    adv_speed: float
    adv_position: tuple[float, float]
    adv_shape: tuple[float, float]
    adv_kind: str = "vehicle"

    def anchor(self) -> AgentState:
        # heading is sampled in [0, 2pi); states keep the (-pi, pi] convention
        return AgentState(self.adv_position[0], self.adv_position[1], wrap_angle(self.adv_heading),
                          self.adv_speed, True)

    def box(self) -> OrientedBox:
        return OrientedBox(self.adv_position, self.adv_heading, *self.adv_shape)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adv_position"] = list(self.adv_position)
        d["adv_shape"] = list(self.adv_shape)
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "CollisionSpec":
        return cls(
            t_c=int(d["t_c"]),
            adv_heading=float(d["adv_heading"]),
            adv_speed=float(d["adv_speed"]),
            adv_position=tuple(float(v) for v in d["adv_position"]),
            adv_shape=tuple(float(v) for v in d["adv_shape"]),
            adv_kind=str(d.get("adv_kind", "vehicle")),
        )


@dataclass(frozen=True)
class AdvResult:
    scenario: Scenario
    spec: CollisionSpec
    mode: GenerationMode
    accepted: bool = True
    rejection_reason: str | None = None
    seed: tuple[int, ...] = ()

    @property
    def adv(self) -> AgentTrack:
        return self.scenario.agents[-1]

    def sidecar(self) -> dict:
        return {
            "spec": self.spec.to_dict(),
            "mode": self.mode.value,
            "accepted": self.accepted,
            "rejection_reason": self.rejection_reason,
            "seed": list(self.seed),
        }


def dumps_sidecar(r: AdvResult) -> str:
    return json.dumps(r.sidecar(), indent=1, sort_keys=True) + "\n"


# ---------------------------------------------------------------------------
# collision sampling


def sample_collision(
    s: Scenario, rng: np.random.Generator, overrides: Mapping[str, Any] | None = None
) -> CollisionSpec:
    """Draw a collision state touching the ego box.

    All random draws happen regardless of ``overrides`` so that overriding
    one field leaves the others unchanged for a given rng state.
    """
    overrides = dict(overrides or {})
    unknown = set(overrides) - set(CollisionSpec.__dataclass_fields__)
    if unknown:
        raise ValueError(f"unknown override fields: {sorted(unknown)}")
    ego = s.ego
    steps = [t for t in range(MIN_COLLISION_STEP, s.num_steps) if ego.states[t].valid]
    if not steps:
        raise ValueError("ego is never valid in the collision window")
    t_c = steps[int(rng.integers(len(steps)))]
    heading = float(rng.uniform(0.0, 2.0 * math.pi))
    offset = float(rng.uniform(*SPEED_OFFSET))

    t_c = int(overrides.get("t_c", t_c))
    if not (MIN_COLLISION_STEP <= t_c < s.num_steps) or not ego.states[t_c].valid:
        raise ValueError(f"t_c={t_c} outside the window or ego invalid there")
    heading = float(overrides.get("adv_heading", heading))
    e = ego.states[t_c]
    speed = float(overrides.get("adv_speed", np.clip(e.speed + offset, *SPEED_CLAMP)))
    kind = overrides.get("adv_kind", "vehicle")
    if kind not in ADV_SHAPES:
        raise ValueError(f"unknown adv_kind {kind!r}")
    shape = tuple(float(v) for v in overrides.get("adv_shape", ADV_SHAPES[kind][:2]))
    if "adv_position" in overrides:
        pos = tuple(float(v) for v in overrides["adv_position"])
    else:
        ego_box = OrientedBox.of(ego, e)
        box = place_in_contact(
            ego_box, heading, shape[0], shape[1], (-math.cos(heading), -math.sin(heading)),
            penetration=CONTACT_PENETRATION,
        )
        pos = box.center
    return CollisionSpec(t_c, heading, speed, pos, shape, kind)


# ---------------------------------------------------------------------------
# reconstruction


def _adv_track(s: Scenario, spec: CollisionSpec) -> AgentTrack:
    taken = {a.id for a in s.agents}
    adv_id, k = ADV_ID, 1
    while adv_id in taken:
        adv_id, k = f"{ADV_ID}_{k}", k + 1
    states = [INVALID_STATE] * s.num_steps
    states[spec.t_c] = spec.anchor()
    height = ADV_SHAPES[spec.adv_kind][2]
    return AgentTrack(adv_id, spec.adv_kind, spec.adv_shape[0], spec.adv_shape[1], height, tuple(states), False)


def _uncenter(st: AgentState, center: tuple[float, float]) -> AgentState:
    return replace(st, x=st.x + center[0], y=st.y + center[1]) if st.valid else INVALID_STATE


def _recorded_tokens(track: AgentTrack, direction: Direction, lo: int, hi: int, cfg) -> list[MotionToken | None]:
    """Rollout tokens of the valid run reachable from the anchor end of [lo, hi].

    Reverse anchors at ``hi`` and walks back; forward anchors at ``lo``.
    The list ends at the first invalid state (the agent leaves the rollout).
    """
    if direction is Direction.REVERSE:
        a = hi
        while a - 1 >= lo and track.states[a - 1].valid:
            a -= 1
        toks, _ = tokenize_track(track, direction, cfg.token_space, start=a, stop=hi + 1)
    else:
        b = lo
        while b + 1 <= hi and track.states[b + 1].valid:
            b += 1
        toks, _ = tokenize_track(track, direction, cfg.token_space, start=lo, stop=b + 1)
    return list(toks) + [None]


def _reverse_pass(
    s: Scenario, spec: CollisionSpec, model: BmtModel, rng: np.random.Generator, force_traffic: bool
) -> tuple[Scenario, list[int]]:
    """Reverse-roll all agents from t_c; returns the augmented scenario and ADV tokens.

    The ego always replays its recorded tokens; other agents replay theirs
    only when ``force_traffic`` is set and are re-predicted otherwise.
    """
    cfg = model.cfg
    t_c = spec.t_c
    adv = _adv_track(s, spec)
    aug = with_agents(s, list(s.agents) + [adv])
    cs: CenteredScenario = preprocess(aug)
    order = cs.agent_order
    adv_k = order.index(len(s.agents))
    centered = cs.scenario.agents
    anchors = [a.states[t_c] for a in centered]
    forced = {}
    for k, a in enumerate(centered):
        if k != adv_k and a.states[t_c].valid and (force_traffic or a.is_ego):
            forced[k] = _recorded_tokens(a, Direction.REVERSE, 0, t_c, cfg)
    res = rollout(model, cs, anchors, Direction.REVERSE, t_c, rng, teacher_forced=forced)

    agents = list(aug.agents)
    adv_states = [_uncenter(st, cs.center) for st in res.states[adv_k]] + [INVALID_STATE] * (s.num_steps - t_c - 1)
    adv_states[t_c] = spec.anchor()
    agents[-1] = replace(adv, states=tuple(adv_states))
    if not force_traffic:
        for k, src in enumerate(order):
            if src == len(s.agents) or not anchors[k].valid or centered[k].is_ego:
                continue
            orig = s.agents[src]
            head = [_uncenter(st, cs.center) for st in res.states[k][:t_c]]
            agents[src] = replace(orig, states=tuple(head) + orig.states[t_c:])
    return with_agents(s, agents), res.tokens[adv_k]


def _forward_refine(s_aug: Scenario, adv_tokens: Sequence[int], model: BmtModel, rng: np.random.Generator,
                    t_c: int) -> Scenario:
    """Forward pass from step 0: ADV and ego forced, other agents re-predicted."""
    cfg = model.cfg
    cs = preprocess(s_aug)
    order = cs.agent_order
    n_orig = len(s_aug.agents) - 1
    centered = cs.scenario.agents
    anchors = [a.states[0] for a in centered]
    steps = s_aug.num_steps - 1
    forced: dict[int, list] = {}
    for k, src in enumerate(order):
        if src == n_orig:
            forced[k] = list(reversed(list(adv_tokens))) + [None]
        elif centered[k].is_ego and anchors[k].valid:
            forced[k] = _recorded_tokens(centered[k], Direction.FORWARD, 0, steps, cfg)
    res = rollout(model, cs, anchors, Direction.FORWARD, steps, rng, teacher_forced=forced)
    agents = list(s_aug.agents)
    for k, src in enumerate(order):
        if not anchors[k].valid or centered[k].is_ego:
            continue
        states = [_uncenter(st, cs.center) for st in res.states[k]]
        if src == n_orig:
            states = states[: t_c + 1] + [INVALID_STATE] * (steps - t_c)
        agents[src] = replace(agents[src], states=tuple(states))
    return with_agents(s_aug, agents)


def build_adversary(
    s: Scenario,
    spec: CollisionSpec,
    mode: GenerationMode,
    model: BmtModel,
    rng: np.random.Generator,
) -> AdvResult:
    """Insert an ADV that reaches ``spec`` at ``spec.t_c``.

    The ADV is reconstructed by reverse rollout and is invalid after t_c.
    The ego is teacher-forced in every mode and keeps its recorded track,
    which keeps the contact at t_c intact.
    """
    if mode is GenerationMode.CLOSED_LOOP_REVERSE:
        aug, _ = _reverse_pass(s, spec, model, rng, force_traffic=False)
    else:
        aug, adv_tokens = _reverse_pass(s, spec, model, rng, force_traffic=True)
        if mode is GenerationMode.FORWARD_REFINE:
            aug = _forward_refine(aug, adv_tokens, model, rng, spec.t_c)
    return AdvResult(aug, spec, mode)


# ---------------------------------------------------------------------------
# rule filter


@dataclass(frozen=True)
class TrackStats:
    path_length: float
    mean_speed: float
    max_curvature: float


def track_stats(track: AgentTrack) -> TrackStats:
    """Path length, mean |speed| and max |dtheta|/ds over consecutive valid steps."""
    pts = [st for st in track.states if st.valid]
    if not pts:
        return TrackStats(0.0, 0.0, 0.0)
    path, kappa = 0.0, 0.0
    for a, b in zip(pts, pts[1:]):
        ds = math.hypot(b.x - a.x, b.y - a.y)
        path += ds
        kappa = max(kappa, abs(wrap_angle(b.heading - a.heading)) / max(ds, DS_FLOOR))
    return TrackStats(path, float(np.mean([abs(st.speed) for st in pts])), kappa)


def filter_adversary(r: AdvResult) -> AdvResult:
    """Apply the plausibility rules in order; only the verdict fields change."""
    adv = r.adv
    st = track_stats(adv)
    reason = None
    if st.path_length < MIN_PATH_LENGTH:
        reason = "too_short"
    elif st.mean_speed < MIN_MEAN_SPEED:
        reason = "too_slow"
    elif st.max_curvature > KAPPA_THRESHOLD:
        reason = "curvature"
    else:
        ego = r.scenario.ego
        for t in range(r.spec.t_c):
            a, e = adv.states[t], ego.states[t]
            if a.valid and e.valid and box_overlap(OrientedBox.of(adv, a), OrientedBox.of(ego, e)):
                reason = "early_collision"
                break
    return replace(r, accepted=reason is None, rejection_reason=reason)


def ego_adv_contact(r: AdvResult) -> bool:
    """Whether the ADV and ego boxes overlap at the collision step."""
    t = r.spec.t_c
    a, e = r.adv.states[t], r.scenario.ego.states[t]
    return a.valid and e.valid and box_overlap(OrientedBox.of(r.adv, a), OrientedBox.of(r.scenario.ego, e))


# ---------------------------------------------------------------------------
# batches


def _rank(r: AdvResult) -> int:
    # a candidate that fails a later rule passed all earlier ones
    return REJECTION_REASONS.index(r.rejection_reason) if r.rejection_reason else len(REJECTION_REASONS)


def generate_batch(
    s: Scenario,
    num_modes: int,
    mode: GenerationMode,
    model: BmtModel,
    seed: int | Sequence[int] | np.random.Generator,
    max_resamples: int = 20,
    overrides: Mapping[str, Any] | None = None,
) -> list[AdvResult]:
    """``num_modes`` filtered candidates, resampling rejected slots.

    Attempt ``j`` of slot ``i`` uses ``default_rng([*seed, i, j])``, so each
    result is reproducible from the seed recorded on it.  A slot that runs
    out of resamples keeps its best rejected candidate (the one that passed
    the most rules, earliest on ties).
    """
    if num_modes < 1:
        raise ValueError("num_modes must be >= 1")
    if max_resamples < 0:
        raise ValueError("max_resamples must be >= 0")
    if isinstance(seed, np.random.Generator):
        base = (int(seed.integers(2**32)),)
    elif isinstance(seed, (int, np.integer)):
        base = (int(seed),)
    else:
        base = tuple(int(v) for v in seed)
    out = []
    for i in range(num_modes):
        best = None
        for j in range(max_resamples + 1):
            tag = base + (i, j)
            rng = np.random.default_rng(list(tag))
            spec = sample_collision(s, rng, overrides)
            r = filter_adversary(build_adversary(s, spec, mode, model, rng))
            r = replace(r, seed=tag)
            if r.accepted:
                best = r
                break
            if best is None or _rank(r) > _rank(best):
                best = r
        out.append(best)
    return out
