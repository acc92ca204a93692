"""Nucleus sampling and autoregressive bidirectional rollout."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from advbmt.kinematics import Direction, MotionToken, step
from advbmt.model import (
    MOTION_FEATURE_DIM,
    SPECIAL_MOTION,
    SPECIAL_PAD,
    SPECIAL_START,
    BmtModel,
    SceneEmbedding,
    TokenBatch,
    motion_features,
    scene_batch,
)
from advbmt.scenario import AGENT_KINDS, INVALID_STATE, AgentState, AgentTrack, CenteredScenario


def encode_scene(cs: CenteredScenario, model: BmtModel) -> SceneEmbedding:
    """One embedding per map polyline and traffic light of ``cs``."""
    return model.encode(scene_batch([cs], model.cfg))


def decode_step(history: TokenBatch, scene: SceneEmbedding, model: BmtModel) -> np.ndarray:
    """Next-token logits ``[B, N, vocab]`` for the last position of ``history``."""
    return model.decode(history, scene)[:, -1]


def nucleus(probs: np.ndarray, top_p: float) -> np.ndarray:
    """Ids of the smallest probability-sorted prefix with mass >= ``top_p``."""
    order = np.argsort(-probs, kind="stable")
    cum = np.cumsum(probs[order])
    k = int(np.searchsorted(cum, top_p, side="left"))
    return order[: min(k, len(order) - 1) + 1]


def sample_tokens(
    logits_row: np.ndarray,
    top_p: float,
    temperature: float,
    rng: np.random.Generator,
    pad_id: int | None = None,
) -> int:
    """Draw one token id by temperature-scaled nucleus sampling.

    ``top_p <= 0`` or ``temperature <= 0`` selects the arg-max.
    """
    z = np.asarray(logits_row, dtype=np.float64).copy()
    if pad_id is not None and pad_id < len(z):
        z[pad_id] = -np.inf
    if top_p <= 0.0 or temperature <= 0.0:
        return int(np.argmax(z))
    z = z / temperature
    z -= z.max()
    p = np.exp(z)
    p /= p.sum()
    keep = nucleus(p, top_p)
    q = p[keep] / p[keep].sum()
    u = rng.random()
    i = int(np.searchsorted(np.cumsum(q), u, side="right"))
    return int(keep[min(i, len(keep) - 1)])


@dataclass
class RolloutResult:
    states: list[list[AgentState]]   # per agent, chronological, steps + 1 entries
    tokens: list[list[int]]          # per agent, in generation order


class _History:
    """Growing decoder input grid for a single scenario."""

    def __init__(self, agents: Sequence[AgentTrack], direction: Direction, model: BmtModel, capacity: int):
        cfg = model.cfg
        N = len(agents)
        T = capacity
        self.cfg, self.ts = cfg, cfg.token_space
        self.tokens = np.full((1, T, N), cfg.pad_token, dtype=np.int64)
        self.special = np.full((1, T, N), SPECIAL_PAD, dtype=np.int64)
        self.valid = np.zeros((1, T, N), dtype=bool)
        self.poses = np.zeros((1, T, N, 3))
        self.motion = np.zeros((1, T, N, MOTION_FEATURE_DIM))
        self.reverse = np.full((1, T, N), direction is Direction.REVERSE)
        self.kinds = np.array([[AGENT_KINDS.index(a.kind) for a in agents]], dtype=np.int64)
        self.shapes = np.array([[[a.length, a.width, a.height] for a in agents]], dtype=float) / 5.0
        self.agent_ids = np.arange(N, dtype=np.int64)[None]

    def put(self, k: int, n: int, st: AgentState, prev_token: int | None) -> None:
        if prev_token is None:
            self.tokens[0, k, n], self.special[0, k, n] = self.cfg.start_token, SPECIAL_START
            acc = yaw = 0.0
        else:
            self.tokens[0, k, n], self.special[0, k, n] = prev_token, SPECIAL_MOTION
            acc, yaw = self.ts.controls(prev_token)
        self.valid[0, k, n] = True
        self.poses[0, k, n] = (st.x, st.y, st.heading)
        self.motion[0, k, n] = motion_features(st.x, st.y, st.heading, st.speed, acc, yaw, self.ts)

    def batch(self, length: int) -> TokenBatch:
        sl = slice(0, length)
        return TokenBatch(
            tokens=self.tokens[:, sl], special=self.special[:, sl], valid=self.valid[:, sl],
            poses=self.poses[:, sl], motion=self.motion[:, sl], reverse=self.reverse[:, sl],
            kinds=self.kinds, shapes=self.shapes, agent_ids=self.agent_ids,
        )


def rollout(
    model: BmtModel,
    scene: CenteredScenario,
    anchors: Sequence[AgentState],
    direction: Direction,
    steps: int,
    rng: np.random.Generator,
    teacher_forced: Mapping[int, Sequence[MotionToken | int | None]] | None = None,
    agents: Sequence[AgentTrack] | None = None,
    top_p: float | None = None,
    temperature: float | None = None,
    scene_embedding: SceneEmbedding | None = None,
) -> RolloutResult:
    """Autoregressively decode ``steps`` tokens for every agent.

    Agents whose anchor is invalid are left out of attention and return
    invalid states.  Agents in ``teacher_forced`` replay their given tokens
    (``None`` ends the agent's track) yet still take part in attention.
    Output states are chronological for both directions.
    """
    cfg = model.cfg
    ts = cfg.token_space
    agents = list(scene.scenario.agents if agents is None else agents)
    teacher_forced = dict(teacher_forced or {})
    top_p = cfg.top_p if top_p is None else top_p
    temperature = cfg.temperature if temperature is None else temperature
    N = len(agents)
    if len(anchors) != N:
        raise ValueError(f"{len(anchors)} anchors for {N} agents")
    if steps < 0 or steps > scene.scenario.num_steps - 1:
        raise ValueError(f"steps must be in [0, {scene.scenario.num_steps - 1}]")

    seqs: list[list[AgentState]] = [[a] for a in anchors]
    toks: list[list[int]] = [[] for _ in range(N)]
    alive = [a.valid for a in anchors]
    if steps > 0:
        if scene_embedding is None:
            scene_embedding = encode_scene(scene, model)
        hist = _History(agents, direction, model, steps)
        for n in range(N):
            if alive[n]:
                hist.put(0, n, anchors[n], None)
        n_motion = cfg.num_motion_tokens
        for k in range(steps):
            need_model = any(alive[n] and n not in teacher_forced for n in range(N))
            logits = decode_step(hist.batch(k + 1), scene_embedding, model)[0] if need_model else None
            for n in range(N):
                if not alive[n]:
                    seqs[n].append(INVALID_STATE)
                    continue
                if n in teacher_forced:
                    forced = teacher_forced[n]
                    z = forced[k] if k < len(forced) else None
                    if z is None:
                        alive[n] = False
                        seqs[n].append(INVALID_STATE)
                        continue
                    z = int(getattr(z, "id", z))
                else:
                    z = sample_tokens(logits[n, :n_motion], top_p, temperature, rng)
                nxt = step(seqs[n][-1], z, direction, ts)
                toks[n].append(z)
                seqs[n].append(nxt)
                if k + 1 < steps:
                    hist.put(k + 1, n, nxt, z)
    if direction is Direction.REVERSE:
        for s in seqs:
            s.reverse()
    return RolloutResult(seqs, toks)
