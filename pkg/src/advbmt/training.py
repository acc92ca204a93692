"""Token datasets, masked cross-entropy, AdamW training and gradient checks."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from advbmt.errors import DivergenceError, GradCheckFailure, MaskError
from advbmt.kinematics import Direction, TokenSpace, detokenize_track, tokenize_track
from advbmt.model import (
    MOTION_FEATURE_DIM,
    SPECIAL_MOTION,
    SPECIAL_PAD,
    SPECIAL_START,
    BmtConfig,
    BmtModel,
    SceneBatch,
    TokenBatch,
    motion_features,
    scene_batch,
)
from advbmt.scenario import AGENT_KINDS, CenteredScenario, Scenario, preprocess

log = logging.getLogger(__name__)

PERPLEXITY_EPS = 1e-8


# ---------------------------------------------------------------------------
# dataset construction


@dataclass
class AgentSequence:
    """One agent's decoder inputs and targets over ``T`` positions."""

    tokens: np.ndarray
    special: np.ndarray
    valid: np.ndarray
    poses: np.ndarray
    motion: np.ndarray
    targets: np.ndarray
    mask: np.ndarray
    contour_errors: np.ndarray


def _valid_runs(valid: Sequence[bool]) -> list[tuple[int, int]]:
    runs, start = [], None
    for i, v in enumerate(valid):
        if v and start is None:
            start = i
        if not v and start is not None:
            runs.append((start, i))
            start = None
    if start is not None:
        runs.append((start, len(valid)))
    return runs


def agent_sequence(track, direction: Direction, cfg: BmtConfig) -> AgentSequence:
    """Rollout-tokenize ``track`` and lay it out on decoder positions.

    Position ``k`` holds the reconstructed state at time ``k`` (forward) or
    ``T - k`` (reverse), the token that produced it, and the token that
    leads to the next position as target.
    """
    ts = cfg.token_space
    n_states = len(track.states)
    T = n_states - 1
    tokens = np.full(T, cfg.pad_token, dtype=np.int64)
    special = np.full(T, SPECIAL_PAD, dtype=np.int64)
    valid = np.zeros(T, dtype=bool)
    poses = np.zeros((T, 3))
    motion = np.zeros((T, MOTION_FEATURE_DIM))
    targets = np.full(T, cfg.pad_token, dtype=np.int64)
    mask = np.zeros(T, dtype=bool)
    errors = np.zeros(T)

    order = list(range(n_states)) if direction is Direction.FORWARD else list(range(n_states - 1, -1, -1))
    seq_valid = [track.states[i].valid for i in order]
    for a, b in _valid_runs(seq_valid):
        # a..b-1 are sequence indices; map back to chronological slice
        if direction is Direction.FORWARD:
            lo, hi = order[a], order[b - 1] + 1
        else:
            lo, hi = order[b - 1], order[a] + 1
        anchor = track.states[order[a]]
        if b - a >= 2:
            toks, errs = tokenize_track(track, direction, ts, start=lo, stop=hi)
            recon = detokenize_track(anchor, toks, direction, ts)
            if direction is Direction.REVERSE:
                recon = recon[::-1]
        else:
            toks, errs, recon = [], [], [anchor]
        for j, k in enumerate(range(a, min(b, T))):
            st = recon[j]
            valid[k] = True
            poses[k] = (st.x, st.y, st.heading)
            if j == 0:
                tokens[k], special[k] = cfg.start_token, SPECIAL_START
                acc = yaw = 0.0
            else:
                tokens[k], special[k] = toks[j - 1].id, SPECIAL_MOTION
                acc, yaw = toks[j - 1].accel, toks[j - 1].yaw_rate
            motion[k] = motion_features(st.x, st.y, st.heading, st.speed, acc, yaw, ts)
            if j < len(toks):
                targets[k] = toks[j].id
                mask[k] = True
                errors[k] = errs[j]
            else:
                targets[k] = cfg.end_token
    return AgentSequence(tokens, special, valid, poses, motion, targets, mask, errors)


@dataclass
class Example:
    scene: CenteredScenario
    direction: Direction
    agents: list[AgentSequence]
    kinds: np.ndarray
    shapes: np.ndarray


def build_example(cs: CenteredScenario, direction: Direction, cfg: BmtConfig) -> Example:
    s = cs.scenario
    seqs = [agent_sequence(a, direction, cfg) for a in s.agents]
    kinds = np.array([AGENT_KINDS.index(a.kind) for a in s.agents], dtype=np.int64)
    shapes = np.array([[a.length, a.width, a.height] for a in s.agents], dtype=float) / 5.0
    return Example(cs, direction, seqs, kinds, shapes)


def collate(examples: Sequence[Example], cfg: BmtConfig) -> tuple[SceneBatch, TokenBatch]:
    B = len(examples)
    T = len(examples[0].agents[0].tokens)
    N = max(len(e.agents) for e in examples)
    tb = TokenBatch(
        tokens=np.full((B, T, N), cfg.pad_token, dtype=np.int64),
        special=np.full((B, T, N), SPECIAL_PAD, dtype=np.int64),
        valid=np.zeros((B, T, N), dtype=bool),
        poses=np.zeros((B, T, N, 3)),
        motion=np.zeros((B, T, N, MOTION_FEATURE_DIM)),
        reverse=np.zeros((B, T, N), dtype=bool),
        kinds=np.zeros((B, N), dtype=np.int64),
        shapes=np.zeros((B, N, 3)),
        agent_ids=np.tile(np.arange(N, dtype=np.int64), (B, 1)),
        targets=np.full((B, T, N), cfg.pad_token, dtype=np.int64),
        mask=np.zeros((B, T, N), dtype=bool),
    )
    for b, e in enumerate(examples):
        for n, a in enumerate(e.agents):
            tb.tokens[b, :, n] = a.tokens
            tb.special[b, :, n] = a.special
            tb.valid[b, :, n] = a.valid
            tb.poses[b, :, n] = a.poses
            tb.motion[b, :, n] = a.motion
            tb.targets[b, :, n] = a.targets
            tb.mask[b, :, n] = a.mask
        tb.reverse[b] = e.direction is Direction.REVERSE
        tb.kinds[b, : len(e.kinds)] = e.kinds
        tb.shapes[b, : len(e.kinds)] = e.shapes
    return scene_batch([e.scene for e in examples], cfg), tb


# ---------------------------------------------------------------------------
# loss


@dataclass
class LossDiagnostics:
    accuracy_fwd: float
    accuracy_rev: float
    entropy_fwd: float
    entropy_rev: float
    perplexity: float
    clusters: int
    clusters_gt: int
    num_tokens: int


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def usage_perplexity(tokens: np.ndarray, vocab_size: int) -> tuple[float, int]:
    """Perplexity and distinct count of the empirical token-usage distribution."""
    if tokens.size == 0:
        return 1.0, 0
    p_bar = np.bincount(tokens.reshape(-1), minlength=vocab_size) / tokens.size
    return float(np.exp(-np.sum(p_bar * np.log(p_bar + PERPLEXITY_EPS)))), int(np.count_nonzero(p_bar))


def token_loss(logits: np.ndarray, batch: TokenBatch, weight: float = 1.0) -> tuple[float, LossDiagnostics, np.ndarray]:
    """Masked mean cross-entropy in nats/token.

    Returns the loss, diagnostics, and the gradient of ``weight * loss``
    with respect to ``logits``.
    """
    m = batch.mask
    if logits.shape[:3] != m.shape:
        raise MaskError(f"logits {logits.shape[:3]} do not match mask {m.shape}")
    total = int(m.sum())
    if total == 0:
        raise MaskError("loss mask selects no tokens")
    sel_logits = logits[m].astype(np.float64)
    tgt = batch.targets[m]
    logp = _log_softmax(sel_logits)
    nll = -logp[np.arange(total), tgt]
    loss = float(nll.sum() / total)

    probs = np.exp(logp)
    d_sel = probs.copy()
    d_sel[np.arange(total), tgt] -= 1.0
    d_sel *= weight / total
    d_logits = np.zeros(logits.shape, dtype=logits.dtype)
    d_logits[m] = d_sel

    pred = sel_logits.argmax(axis=-1)
    correct = pred == tgt
    ent = -(probs * logp).sum(axis=-1)
    rev = batch.reverse[m]

    def _split(x: np.ndarray, sel: np.ndarray) -> float:
        return float(x[sel].mean()) if sel.any() else float("nan")

    ppl, clusters = usage_perplexity(pred, logits.shape[-1])
    _, clusters_gt = usage_perplexity(tgt, logits.shape[-1])
    diag = LossDiagnostics(
        accuracy_fwd=_split(correct, ~rev),
        accuracy_rev=_split(correct, rev),
        entropy_fwd=_split(ent, ~rev),
        entropy_rev=_split(ent, rev),
        perplexity=ppl,
        clusters=clusters,
        clusters_gt=clusters_gt,
        num_tokens=total,
    )
    return loss, diag, d_logits


def loss_and_grads(model: BmtModel, sb: SceneBatch, tb: TokenBatch, weight: float = 1.0):
    logits = model.forward(sb, tb)
    loss, diag, d_logits = token_loss(logits, tb, weight)
    grads = model.backward(d_logits)
    return loss, diag, grads


# ---------------------------------------------------------------------------
# optimizer


class AdamW:
    def __init__(self, params: dict, lr: float, weight_decay: float,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.lr, self.wd, self.b1, self.b2, self.eps = lr, weight_decay, betas[0], betas[1], eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in params.items():
            g = grads[k]
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            if p.ndim >= 2 and self.wd:
                p *= 1.0 - lr * self.wd
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_grads(grads: dict, max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if norm > max_norm:
        s = max_norm / norm
        for g in grads.values():
            g *= s
    return norm


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainLogRow:
    step: int
    loss: float
    accuracy_fwd: float
    accuracy_rev: float
    perplexity: float
    clusters: int


@dataclass
class TrainResult:
    model: BmtModel
    log: list[TrainLogRow] = field(default_factory=list)
    final_loss: float = float("nan")
    final_diag: LossDiagnostics | None = None
    steps: int = 0


@dataclass
class TrainSettings:
    steps: int = 2000
    batch_size: int = 8
    forward_fraction: float = 0.4
    log_every: int = 100
    stop_loss: float | None = None
    clip_norm: float = 1.0
    warmup: int = 50


class Dataset:
    """Pre-tokenized forward and reverse examples for each scenario."""

    def __init__(self, scenarios: Sequence[Scenario], cfg: BmtConfig):
        self.cfg = cfg
        self.scenes = [preprocess(s) for s in scenarios]
        self.fwd = [build_example(cs, Direction.FORWARD, cfg) for cs in self.scenes]
        self.rev = [build_example(cs, Direction.REVERSE, cfg) for cs in self.scenes]
        self._cache: dict = {}

    def __len__(self) -> int:
        return len(self.scenes)

    def batch(self, idx: Sequence[int], direction: Direction):
        key = (tuple(idx), direction)
        if key not in self._cache:
            pool = self.fwd if direction is Direction.FORWARD else self.rev
            if len(self._cache) > 64:
                self._cache.clear()
            self._cache[key] = collate([pool[i] for i in idx], self.cfg)
        return self._cache[key]

    def full_batches(self, batch_size: int):
        idx = list(range(len(self)))
        for d in Direction:
            for i in range(0, len(idx), batch_size):
                yield self.batch(idx[i: i + batch_size], d)


def evaluate_loss(model: BmtModel, data: Dataset, batch_size: int = 8) -> tuple[float, LossDiagnostics]:
    """Token-weighted loss and diagnostics over both directions of ``data``."""
    tot_loss, tot_n = 0.0, 0
    preds, tgts, correct_f, correct_r, n_f, n_r = [], [], 0, 0, 0, 0
    ent_f = ent_r = 0.0
    for sb, tb in data.full_batches(batch_size):
        logits = model.forward(sb, tb)
        loss, diag, _ = token_loss(logits, tb)
        n = diag.num_tokens
        tot_loss += loss * n
        tot_n += n
        sel = logits[tb.mask].argmax(axis=-1)
        preds.append(sel)
        tgts.append(tb.targets[tb.mask])
        rev = bool(tb.reverse.any())
        if rev:
            correct_r += diag.accuracy_rev * n
            ent_r += diag.entropy_rev * n
            n_r += n
        else:
            correct_f += diag.accuracy_fwd * n
            ent_f += diag.entropy_fwd * n
            n_f += n
    vocab = model.cfg.vocab_size
    ppl, clusters = usage_perplexity(np.concatenate(preds), vocab)
    _, clusters_gt = usage_perplexity(np.concatenate(tgts), vocab)
    nan = float("nan")
    diag = LossDiagnostics(
        accuracy_fwd=correct_f / n_f if n_f else nan,
        accuracy_rev=correct_r / n_r if n_r else nan,
        entropy_fwd=ent_f / n_f if n_f else nan,
        entropy_rev=ent_r / n_r if n_r else nan,
        perplexity=ppl,
        clusters=clusters,
        clusters_gt=clusters_gt,
        num_tokens=tot_n,
    )
    return tot_loss / tot_n, diag


def train(
    data: Sequence[Scenario] | Dataset,
    cfg: BmtConfig,
    settings: TrainSettings | None = None,
    model: BmtModel | None = None,
    callback: Callable[[TrainLogRow], None] | None = None,
) -> TrainResult:
    """Two-phase AdamW training: forward-only, then 50/50 mixed directions.

    With ``settings.stop_loss`` set, training stops at the first log
    interval whose full-dataset loss is at or below it.
    """
    settings = settings or TrainSettings()
    ds = data if isinstance(data, Dataset) else Dataset(data, cfg)
    if len(ds) == 0:
        raise ValueError("training needs at least one scenario")
    model = model or BmtModel(cfg)
    opt = AdamW(model.params, cfg.learning_rate, cfg.weight_decay)
    rng = np.random.default_rng([cfg.seed, 2])
    result = TrainResult(model)
    phase1 = int(settings.steps * settings.forward_fraction)
    n = len(ds)
    bs = min(settings.batch_size, n)
    for step in range(1, settings.steps + 1):
        if bs == n:
            idx = list(range(n))
        else:
            idx = sorted(rng.choice(n, size=bs, replace=False).tolist())
        if step <= phase1:
            direction = Direction.FORWARD
        else:
            direction = Direction.REVERSE if rng.random() < 0.5 else Direction.FORWARD
        sb, tb = ds.batch(idx, direction)
        loss, diag, grads = loss_and_grads(model, sb, tb)
        if not math.isfinite(loss):
            raise DivergenceError(f"non-finite loss at step {step}")
        clip_grads(grads, settings.clip_norm)
        lr = cfg.learning_rate * min(1.0, step / max(settings.warmup, 1))
        opt.step(model.params, grads, lr)
        for v in model.params.values():
            if not np.all(np.isfinite(v)):
                raise DivergenceError(f"non-finite parameter after step {step}")
        if step % settings.log_every == 0 or step == settings.steps:
            full, fdiag = evaluate_loss(model, ds, settings.batch_size)
            row = TrainLogRow(step, full, fdiag.accuracy_fwd, fdiag.accuracy_rev, fdiag.perplexity, fdiag.clusters)
            result.log.append(row)
            result.final_loss, result.final_diag, result.steps = full, fdiag, step
            log.info("step %d loss %.4f acc_fwd %.3f acc_rev %.3f", step, full, fdiag.accuracy_fwd, fdiag.accuracy_rev)
            if callback:
                callback(row)
            if settings.stop_loss is not None and full <= settings.stop_loss and step > phase1:
                break
    return result


# ---------------------------------------------------------------------------
# gradient check

GRAD_CHECK_CONFIG = BmtConfig(
    hidden_dim=8, num_encoder_layers=1, num_decoder_blocks=1, num_heads=2,
    fourier_bands=4, token_k=5, ffn_mult=2, seed=0,
)


@dataclass
class GradCheckReport:
    num_checked: int
    max_rel_error: float
    worst: list[tuple[str, tuple, float, float, float]]  # name, index, analytic, numeric, rel
    passed: bool
    num_parameters: int


def grad_check_batch(cfg: BmtConfig, seed: int = 0, num_scenarios: int = 2):
    """A small random batch (mixed directions) for gradient checking."""
    from advbmt.synth import synth_scenarios

    scen = synth_scenarios(num_scenarios, seed)
    ds = Dataset(scen, cfg)
    ex = [ds.fwd[0]] + [ds.rev[i] for i in range(1, num_scenarios)]
    return collate(ex, cfg)


def relative_error(a: float, n: float, floor: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), floor)


def grad_check(
    cfg: BmtConfig = GRAD_CHECK_CONFIG,
    tolerance: float = 1e-4,
    num_params: int = 200,
    h: float = 1e-4,
    abs_floor: float = 1e-7,
    seed: int = 0,
    model: BmtModel | None = None,
    batch: tuple[SceneBatch, TokenBatch] | None = None,
    raise_on_failure: bool = True,
) -> GradCheckReport:
    """Central finite differences against the analytic gradient, in float64."""
    model = (model or BmtModel(cfg)).astype(np.float64)
    if model.num_parameters > 10_000:
        raise ValueError(f"grad check needs <= 10000 parameters, model has {model.num_parameters}")
    sb, tb = batch or grad_check_batch(cfg, seed)
    _, _, grads = loss_and_grads(model, sb, tb)

    def f() -> float:
        return token_loss(model.forward(sb, tb), tb)[0]

    rng = np.random.default_rng([seed, 3])
    names = sorted(model.params)
    sizes = np.array([model.params[k].size for k in names], dtype=float)
    picks = []
    # every tensor at least once, the rest proportional to size
    for k in names:
        picks.append((k, int(rng.integers(model.params[k].size))))
    while len(picks) < num_params:
        k = names[int(rng.choice(len(names), p=sizes / sizes.sum()))]
        picks.append((k, int(rng.integers(model.params[k].size))))
    results = []
    for k, flat in picks:
        arr = model.params[k]
        idx = np.unravel_index(flat, arr.shape)
        orig = arr[idx]
        arr[idx] = orig + h
        fp = f()
        arr[idx] = orig - h
        fm = f()
        arr[idx] = orig
        num = (fp - fm) / (2 * h)
        ana = float(grads[k][idx])
        results.append((k, tuple(int(i) for i in idx), ana, num, relative_error(ana, num, abs_floor)))
    results.sort(key=lambda r: -r[4])
    max_rel = results[0][4] if results else 0.0
    report = GradCheckReport(len(results), max_rel, results[:10], max_rel <= tolerance, model.num_parameters)
    if not report.passed and raise_on_failure:
        bad = [f"{r[0]}{list(r[1])} rel={r[4]:.2e}" for r in results if r[4] > tolerance]
        raise GradCheckFailure(bad)
    return report
