"""Bidirectional motion transformer (desk scale, NumPy).

Scene encoder: polyline MLP with mean pooling plus traffic-light embedding,
then self-attention layers with Fourier relation embeddings.  Motion
decoder: per-(agent, step) input tokens, blocks of agent-to-time (causal),
agent-to-agent and agent-to-scene relation attention, and a two-layer GELU
prediction head over the motion-token vocabulary plus START/END/PAD.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from advbmt import nn
from advbmt.errors import CapacityError, ShapeError
from advbmt.kinematics import DEFAULT_TOKEN_SPACE, Direction, TokenSpace
from advbmt.scenario import (
    AGENT_KINDS,
    LIGHT_STATES,
    MAX_AGENTS,
    SEGMENT_FEATURE_DIM,
    CenteredScenario,
    polyline_pose,
)

NUM_SPECIAL = 3
SPECIAL_MOTION, SPECIAL_START, SPECIAL_END, SPECIAL_PAD = 0, 1, 2, 3
MAX_POLYLINES = 256
POS_SCALE = 50.0
REL_DIM = 6
MOTION_FEATURE_DIM = 7
LIGHT_FEATURE_DIM = 2 + len(LIGHT_STATES)


@dataclass
class BmtConfig:
    hidden_dim: int = 64
    num_encoder_layers: int = 2
    num_decoder_blocks: int = 2
    num_heads: int = 4
    fourier_bands: int = 16
    fourier_scale: float = 1.0
    top_p: float = 0.95
    temperature: float = 1.0
    learning_rate: float = 3e-4
    weight_decay: float = 0.01
    seed: int = 0
    token_k: int = 33
    ffn_mult: int = 4
    max_polylines: int = MAX_POLYLINES

    def __post_init__(self):
        if self.hidden_dim % self.num_heads:
            raise ValueError("hidden_dim must be divisible by num_heads")
        if self.token_k % 2 == 0:
            raise ValueError("token_k must be odd")

    @property
    def token_space(self) -> TokenSpace:
        if self.token_k == DEFAULT_TOKEN_SPACE.K:
            return DEFAULT_TOKEN_SPACE
        return TokenSpace(K=self.token_k)

    @property
    def num_motion_tokens(self) -> int:
        return self.token_k * self.token_k

    @property
    def vocab_size(self) -> int:
        return self.num_motion_tokens + NUM_SPECIAL

    @property
    def start_token(self) -> int:
        return self.num_motion_tokens

    @property
    def end_token(self) -> int:
        return self.num_motion_tokens + 1

    @property
    def pad_token(self) -> int:
        return self.num_motion_tokens + 2

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BmtConfig":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in d.items() if k in known})


# ---------------------------------------------------------------------------
# batches


@dataclass
class SceneBatch:
    """Padded map/light elements for a batch of scenarios."""

    seg_feats: np.ndarray      # B S P F
    seg_mask: np.ndarray       # B S P
    is_light: np.ndarray       # B S
    light_feats: np.ndarray    # B S LF
    poses: np.ndarray          # B S 3
    mask: np.ndarray           # B S

    @property
    def num_elements(self) -> int:
        return self.mask.shape[1]


@dataclass
class TokenBatch:
    """Decoder inputs and targets on a ``[B, T, N]`` grid."""

    tokens: np.ndarray         # B T N  previous token fed at each position
    special: np.ndarray        # B T N  special-token type of the input
    valid: np.ndarray          # B T N  position holds a real agent state
    poses: np.ndarray          # B T N 3  (x, y, heading) of the current state
    motion: np.ndarray         # B T N 7  continuous motion features
    reverse: np.ndarray        # B T N  direction flag (True = reverse)
    kinds: np.ndarray          # B N
    shapes: np.ndarray         # B N 3
    agent_ids: np.ndarray      # B N
    targets: np.ndarray | None = None   # B T N
    mask: np.ndarray | None = None      # B T N  loss mask

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.tokens.shape

    def check(self) -> None:
        B, T, N = self.tokens.shape
        grids = {"special": self.special, "valid": self.valid, "reverse": self.reverse}
        if self.targets is not None:
            grids["targets"] = self.targets
        if self.mask is not None:
            grids["mask"] = self.mask
        for name, g in grids.items():
            if g.shape != (B, T, N):
                raise ShapeError(f"{name}: expected {(B, T, N)}, got {g.shape}")
        if self.poses.shape != (B, T, N, 3) or self.motion.shape != (B, T, N, MOTION_FEATURE_DIM):
            raise ShapeError("poses/motion: inconsistent with token grid")
        if self.kinds.shape != (B, N) or self.shapes.shape != (B, N, 3) or self.agent_ids.shape != (B, N):
            raise ShapeError("agent attributes: inconsistent with token grid")


def motion_features(x, y, heading, speed, accel, yaw_rate, ts: TokenSpace) -> np.ndarray:
    return np.stack(
        [
            np.asarray(x) / POS_SCALE,
            np.asarray(y) / POS_SCALE,
            np.cos(heading),
            np.sin(heading),
            np.asarray(speed) / 10.0,
            np.asarray(accel) / ts.a_max,
            np.asarray(yaw_rate) / ts.omega_max,
        ],
        axis=-1,
    )


def scene_batch(scenes: Sequence[CenteredScenario], cfg: BmtConfig) -> SceneBatch:
    B = len(scenes)
    counts = []
    for cs in scenes:
        n = len(cs.scenario.map) + len(cs.scenario.traffic_lights)
        if len(cs.scenario.map) > cfg.max_polylines:
            raise CapacityError(f"{len(cs.scenario.map)} polylines exceeds limit {cfg.max_polylines}")
        counts.append(n)
    S = max(counts) if counts else 0
    P = max((f.shape[0] for cs in scenes for f in cs.segment_features), default=1)
    seg = np.zeros((B, S, P, SEGMENT_FEATURE_DIM))
    seg_mask = np.zeros((B, S, P), dtype=bool)
    is_light = np.zeros((B, S), dtype=bool)
    lf = np.zeros((B, S, LIGHT_FEATURE_DIM))
    poses = np.zeros((B, S, 3))
    mask = np.zeros((B, S), dtype=bool)
    for b, cs in enumerate(scenes):
        for i, (pl, f) in enumerate(zip(cs.scenario.map, cs.segment_features)):
            g = f.copy()
            g[:, 0:4] /= POS_SCALE
            g[:, 6] /= 10.0
            seg[b, i, : len(g)] = g
            seg_mask[b, i, : len(g)] = True
            poses[b, i] = polyline_pose(pl)
            mask[b, i] = True
        off = len(cs.scenario.map)
        for j, tl in enumerate(cs.scenario.traffic_lights):
            k = off + j
            is_light[b, k] = True
            frac = np.array([tl.states.count(s) for s in LIGHT_STATES], float) / max(len(tl.states), 1)
            lf[b, k] = np.concatenate([np.asarray(tl.position) / POS_SCALE, frac])
            poses[b, k] = (tl.position[0], tl.position[1], 0.0)
            mask[b, k] = True
    return SceneBatch(seg, seg_mask, is_light, lf, poses, mask)


def relation_features(pq: np.ndarray, pk: np.ndarray, dt_steps: np.ndarray | float = 0.0) -> np.ndarray:
    """Edge features of key poses seen from query poses.

    ``pq`` ``[..., Lq, 1, 3]`` and ``pk`` ``[..., 1, Lk, 3]`` broadcast to the
    edge grid; output ``[..., Lq, Lk, 6]``: key offset in the query frame,
    sin/cos of relative heading, distance and time offset.
    """
    dx = pk[..., 0] - pq[..., 0]
    dy = pk[..., 1] - pq[..., 1]
    c, s = np.cos(pq[..., 2]), np.sin(pq[..., 2])
    lx = c * dx + s * dy
    ly = -s * dx + c * dy
    dth = pk[..., 2] - pq[..., 2]
    dist = np.hypot(dx, dy)
    dts = np.broadcast_to(np.asarray(dt_steps, float), dist.shape)
    return np.stack(
        [lx / POS_SCALE, ly / POS_SCALE, np.sin(dth), np.cos(dth), dist / POS_SCALE, dts / 10.0],
        axis=-1,
    )


# ---------------------------------------------------------------------------
# model


@dataclass
class SceneEmbedding:
    tokens: np.ndarray   # B S D
    poses: np.ndarray    # B S 3
    mask: np.ndarray     # B S


class _EncoderLayer:
    def __init__(self, name: str, d: int, heads: int, ffn: int):
        self.ln1 = nn.LayerNorm(f"{name}.ln1", d)
        self.attn = nn.RelationAttention(f"{name}.attn", d, heads)
        self.ln2 = nn.LayerNorm(f"{name}.ln2", d)
        self.ffn = nn.Mlp(f"{name}.ffn", d, ffn, d)

    def init(self, params, rng, out_scale):
        self.ln1.init(params, rng)
        self.attn.init(params, rng, out_scale)
        self.ln2.init(params, rng)
        self.ffn.init(params, rng, out_scale)


class _DecoderBlock:
    def __init__(self, name: str, d: int, heads: int, ffn: int):
        self.ln_t = nn.LayerNorm(f"{name}.ln_a2t", d)
        self.a2t = nn.RelationAttention(f"{name}.a2t", d, heads)
        self.ln_a = nn.LayerNorm(f"{name}.ln_a2a", d)
        self.a2a = nn.RelationAttention(f"{name}.a2a", d, heads)
        self.ln_s = nn.LayerNorm(f"{name}.ln_a2s", d)
        self.a2s = nn.RelationAttention(f"{name}.a2s", d, heads)
        self.ln_f = nn.LayerNorm(f"{name}.ln_ffn", d)
        self.ffn = nn.Mlp(f"{name}.ffn", d, ffn, d)

    def init(self, params, rng, out_scale):
        for ln in (self.ln_t, self.ln_a, self.ln_s, self.ln_f):
            ln.init(params, rng)
        for at in (self.a2t, self.a2a, self.a2s):
            at.init(params, rng, out_scale)
        self.ffn.init(params, rng, out_scale)


class BmtModel:
    """Parameters plus the layer graph.  ``params`` are trainable arrays,
    ``buffers`` hold the fixed Fourier frequency matrices."""

    def __init__(self, cfg: BmtConfig, params: dict | None = None, buffers: dict | None = None,
                 dtype=np.float32):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        d, h, ffn, bands = cfg.hidden_dim, cfg.num_heads, cfg.ffn_mult * cfg.hidden_dim, cfg.fourier_bands
        # scene encoder
        self.poly_mlp = nn.Mlp("enc.polyline", SEGMENT_FEATURE_DIM, d, d)
        self.light_emb = nn.Linear("enc.light", LIGHT_FEATURE_DIM, d)
        self.scene_rel = nn.FourierEncoder("enc.rel", REL_DIM, bands, d)
        self.enc_layers = [_EncoderLayer(f"enc.layer{i}", d, h, ffn) for i in range(cfg.num_encoder_layers)]
        self.enc_norm = nn.LayerNorm("enc.out_norm", d)
        # decoder input embeddings
        self.tok_emb = nn.Embedding("dec.motion_token", cfg.vocab_size, d)
        self.special_emb = nn.Embedding("dec.special", 4, d)
        self.type_emb = nn.Embedding("dec.agent_type", len(AGENT_KINDS), d)
        self.id_emb = nn.Embedding("dec.agent_id", MAX_AGENTS + 1, d)
        self.dir_emb = nn.Embedding("dec.direction", 2, d)
        self.shape_emb = nn.Linear("dec.agent_shape", 3, d)
        self.motion_emb = nn.FourierEncoder("dec.motion_feature", MOTION_FEATURE_DIM, bands, d)
        # relations
        self.a2a_rel = nn.FourierEncoder("dec.rel_a2a", REL_DIM, bands, d)
        self.a2t_rel = nn.FourierEncoder("dec.rel_a2t", REL_DIM, bands, d)
        self.a2s_rel = nn.FourierEncoder("dec.rel_a2s", REL_DIM, bands, d)
        self.blocks = [_DecoderBlock(f"dec.block{i}", d, h, ffn) for i in range(cfg.num_decoder_blocks)]
        self.head_norm = nn.LayerNorm("dec.head_norm", d)
        self.head = nn.Mlp("dec.head", d, d, cfg.vocab_size)

        if params is None:
            params, buffers = self._init_params()
        self.params = {k: np.asarray(v, dtype=self.dtype) for k, v in params.items()}
        self.buffers = {k: np.asarray(v, dtype=self.dtype) for k, v in buffers.items()}

    def _init_params(self):
        cfg = self.cfg
        rng = np.random.default_rng([cfg.seed, 1])
        params: dict = {}
        buffers: dict = {}
        out_scale = 0.5
        self.poly_mlp.init(params, rng)
        self.light_emb.init(params, rng)
        self.scene_rel.init(params, buffers, rng, cfg.fourier_scale)
        for layer in self.enc_layers:
            layer.init(params, rng, out_scale)
        self.enc_norm.init(params, rng)
        for emb in (self.tok_emb, self.special_emb, self.type_emb, self.id_emb, self.dir_emb):
            emb.init(params, rng)
        self.shape_emb.init(params, rng)
        self.motion_emb.init(params, buffers, rng, cfg.fourier_scale)
        for rel in (self.a2a_rel, self.a2t_rel, self.a2s_rel):
            rel.init(params, buffers, rng, cfg.fourier_scale)
        for blk in self.blocks:
            blk.init(params, rng, out_scale)
        self.head_norm.init(params, rng)
        self.head.init(params, rng, out_scale=0.1)
        return params, buffers

    @property
    def num_parameters(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def astype(self, dtype) -> "BmtModel":
        return type(self)(self.cfg, self.params, self.buffers, dtype=dtype)

    # -- scene ---------------------------------------------------------------

    def encode(self, sb: SceneBatch) -> SceneEmbedding:
        p, f = self.params, self.dtype
        B, S = sb.mask.shape
        d = self.cfg.hidden_dim
        self._sb = sb
        if S == 0:
            self._scene_empty = True
            return SceneEmbedding(np.zeros((B, 0, d), f), sb.poses, sb.mask)
        self._scene_empty = False
        seg = self.poly_mlp.forward(p, sb.seg_feats.astype(f))        # B S P D
        w = sb.seg_mask.astype(f)
        cnt = np.maximum(w.sum(axis=2, keepdims=True), 1.0)           # B S 1
        self._pool = (w, cnt)
        pooled = (seg * w[..., None]).sum(axis=2) / cnt
        light = self.light_emb.forward(p, sb.light_feats.astype(f))
        isl = sb.is_light[..., None].astype(f)
        x = pooled * (1 - isl) + light * isl
        self._isl = isl
        rel = self.scene_rel.forward(p, self.buffers, relation_features(
            sb.poses[:, :, None, :], sb.poses[:, None, :, :]).astype(f))   # B S S D
        self._scene_relv = rel
        mask = sb.mask[:, :, None] & sb.mask[:, None, :]
        mask = mask | np.eye(S, dtype=bool)[None]
        for layer in self.enc_layers:
            h = layer.ln1.forward(p, x)
            x = x + layer.attn.forward(p, h, h, rel, mask)
            x = x + layer.ffn.forward(p, layer.ln2.forward(p, x))
        out = self.enc_norm.forward(p, x)
        return SceneEmbedding(out, sb.poses, sb.mask)

    def encode_backward(self, grads: dict, d_out: np.ndarray) -> None:
        p = self.params
        if self._scene_empty:
            return
        dx = self.enc_norm.backward(p, grads, d_out)
        d_rel = np.zeros_like(self._scene_relv)
        for layer in reversed(self.enc_layers):
            dx = dx + layer.ln2.backward(p, grads, layer.ffn.backward(p, grads, dx))
            dq, dkv, dr = layer.attn.backward(p, grads, dx)
            d_rel += dr
            dx = dx + layer.ln1.backward(p, grads, dq + dkv)
        self.scene_rel.backward(p, grads, d_rel)
        isl = self._isl
        self.light_emb.backward(p, grads, dx * isl, need_dx=False)
        w, cnt = self._pool
        d_pooled = dx * (1 - isl)
        d_seg = (d_pooled / cnt)[:, :, None, :] * w[..., None]
        self.poly_mlp.backward(p, grads, d_seg, need_dx=False)

    # -- decoder -------------------------------------------------------------

    def decode(self, tb: TokenBatch, scene: SceneEmbedding) -> np.ndarray:
        """Logits ``[B, T, N, vocab]`` for every position."""
        tb.check()
        p, bf, f = self.params, self.buffers, self.dtype
        B, T, N = tb.dims
        if scene.tokens.shape[0] != B:
            raise ShapeError(f"scene batch {scene.tokens.shape[0]} != token batch {B}")
        d = self.cfg.hidden_dim
        x = (
            self.tok_emb.forward(p, tb.tokens)
            + self.special_emb.forward(p, tb.special)
            + self.dir_emb.forward(p, tb.reverse.astype(np.int64))
            + self.motion_emb.forward(p, bf, tb.motion.astype(f))
            + (self.type_emb.forward(p, tb.kinds)
               + self.id_emb.forward(p, tb.agent_ids)
               + self.shape_emb.forward(p, tb.shapes.astype(f)))[:, None]
        )  # B T N D

        valid = tb.valid
        poses = tb.poses
        # agent-to-time: groups (b, n), sequence over t, causal
        pt = poses.transpose(0, 2, 1, 3)                                     # B N T 3
        steps = np.arange(T, dtype=float)
        rel_t = relation_features(pt[:, :, :, None, :], pt[:, :, None, :, :],
                                  (steps[None, :] - steps[:, None]))         # B N T T 6
        r_t = self.a2t_rel.forward(p, bf, rel_t.reshape(B * N, T, T, REL_DIM).astype(f))
        vt = valid.transpose(0, 2, 1).reshape(B * N, T)
        causal = np.tril(np.ones((T, T), dtype=bool))
        m_t = (causal[None] & vt[:, None, :]) | np.eye(T, dtype=bool)[None]
        # agent-to-agent: groups (b, t), sequence over n
        rel_a = relation_features(poses[:, :, :, None, :], poses[:, :, None, :, :])  # B T N N 6
        r_a = self.a2a_rel.forward(p, bf, rel_a.reshape(B * T, N, N, REL_DIM).astype(f))
        va = valid.reshape(B * T, N)
        m_a = va[:, None, :] | np.eye(N, dtype=bool)[None]
        # agent-to-scene: groups b, queries (t, n)
        S = scene.tokens.shape[1]
        if S:
            rel_s = relation_features(poses.reshape(B, T * N, 1, 3), scene.poses[:, None, :, :])
            r_s = self.a2s_rel.forward(p, bf, rel_s.astype(f))              # B TN S D
            m_s = np.broadcast_to(scene.mask[:, None, :], (B, T * N, S))
        else:
            r_s = m_s = None

        self._dec = dict(B=B, T=T, N=N, S=S, r_t=r_t, r_a=r_a, r_s=r_s)
        for blk in self.blocks:
            h = blk.ln_t.forward(p, x).transpose(0, 2, 1, 3).reshape(B * N, T, d)
            x = x + blk.a2t.forward(p, h, h, r_t, m_t).reshape(B, N, T, d).transpose(0, 2, 1, 3)
            h = blk.ln_a.forward(p, x).reshape(B * T, N, d)
            x = x + blk.a2a.forward(p, h, h, r_a, m_a).reshape(B, T, N, d)
            if S:
                h = blk.ln_s.forward(p, x).reshape(B, T * N, d)
                x = x + blk.a2s.forward(p, h, scene.tokens, r_s, m_s).reshape(B, T, N, d)
            x = x + blk.ffn.forward(p, blk.ln_f.forward(p, x))
        return self.head.forward(p, self.head_norm.forward(p, x))

    def decode_backward(self, grads: dict, d_logits: np.ndarray) -> np.ndarray | None:
        """Backpropagate decoder; returns gradient w.r.t. scene tokens."""
        p = self.params
        c = self._dec
        B, T, N, S = c["B"], c["T"], c["N"], c["S"]
        d = self.cfg.hidden_dim
        dx = self.head_norm.backward(p, grads, self.head.backward(p, grads, d_logits))
        dr_t = np.zeros_like(c["r_t"])
        dr_a = np.zeros_like(c["r_a"])
        dr_s = np.zeros_like(c["r_s"]) if S else None
        d_scene = None
        for blk in reversed(self.blocks):
            dx = dx + blk.ln_f.backward(p, grads, blk.ffn.backward(p, grads, dx))
            if S:
                dq, dkv, dr = blk.a2s.backward(p, grads, dx.reshape(B, T * N, d))
                dr_s += dr
                d_scene = dkv if d_scene is None else d_scene + dkv
                dx = dx + blk.ln_s.backward(p, grads, dq.reshape(B, T, N, d))
            dq, dkv, dr = blk.a2a.backward(p, grads, dx.reshape(B * T, N, d))
            dr_a += dr
            dx = dx + blk.ln_a.backward(p, grads, (dq + dkv).reshape(B, T, N, d))
            dg = dx.transpose(0, 2, 1, 3).reshape(B * N, T, d)
            dq, dkv, dr = blk.a2t.backward(p, grads, dg)
            dr_t += dr
            dh = (dq + dkv).reshape(B, N, T, d).transpose(0, 2, 1, 3)
            dx = dx + blk.ln_t.backward(p, grads, dh)
        self.a2t_rel.backward(p, grads, dr_t)
        self.a2a_rel.backward(p, grads, dr_a)
        if S:
            self.a2s_rel.backward(p, grads, dr_s)
        self.tok_emb.backward(p, grads, dx)
        self.special_emb.backward(p, grads, dx)
        self.dir_emb.backward(p, grads, dx)
        self.motion_emb.backward(p, grads, dx)
        dagent = dx.sum(axis=1)
        self.type_emb.backward(p, grads, dagent)
        self.id_emb.backward(p, grads, dagent)
        self.shape_emb.backward(p, grads, dagent, need_dx=False)
        self._dec = None
        return d_scene

    def forward(self, sb: SceneBatch, tb: TokenBatch) -> np.ndarray:
        scene = self.encode(sb)
        return self.decode(tb, scene)

    def backward(self, d_logits: np.ndarray) -> dict:
        grads: dict = {}
        d_scene = self.decode_backward(grads, d_logits.astype(self.dtype, copy=False))
        if d_scene is not None:
            self.encode_backward(grads, d_scene)
        for k, v in self.params.items():
            if k not in grads:
                grads[k] = np.zeros_like(v)
        return grads
