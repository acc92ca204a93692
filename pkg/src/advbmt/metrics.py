"""Collision checks, TTC, displacement and diversity metrics, JSD and corpus reports."""

from __future__ import annotations

import csv
import io
import math
from collections import defaultdict
from dataclasses import dataclass, field, fields
from itertools import combinations
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from advbmt.errors import AlignmentError, BinningError, MissingPairError
from advbmt.geometry import boxes_overlap_arrays
from advbmt.scenario import Scenario, load_scenario

TTC_CAP = 10.0


# ---------------------------------------------------------------------------
# collisions


@dataclass
class CollisionReport:
    pairs: list[list[tuple[int, int]]]     # per step, overlapping agent index pairs (i < j)
    involved: np.ndarray                    # per agent, overlapped at least once

    @property
    def agent_rate(self) -> float:
        return float(self.involved.mean()) if self.involved.size else 0.0

    def pair_steps(self, i: int, j: int) -> list[int]:
        key = (min(i, j), max(i, j))
        return [t for t, ps in enumerate(self.pairs) if key in ps]


def check_collisions(s: Scenario) -> CollisionReport:
    """Closed-box overlap for every valid agent pair at every step."""
    n = len(s.agents)
    pairs: list[list[tuple[int, int]]] = [[] for _ in range(s.num_steps)]
    involved = np.zeros(n, dtype=bool)
    if n < 2:
        return CollisionReport(pairs, involved)
    arr = np.stack([a.array() for a in s.agents])          # N T 4
    valid = np.stack([a.valid_mask() for a in s.agents])   # N T
    length = np.array([a.length for a in s.agents])
    width = np.array([a.width for a in s.agents])
    ii, jj = np.triu_indices(n, k=1)
    for t in range(s.num_steps):
        both = valid[ii, t] & valid[jj, t]
        if not both.any():
            continue
        i, j = ii[both], jj[both]
        hit = boxes_overlap_arrays(
            arr[i, t, 0], arr[i, t, 1], arr[i, t, 2], length[i], width[i],
            arr[j, t, 0], arr[j, t, 1], arr[j, t, 2], length[j], width[j],
        )
        for a, b in zip(i[hit].tolist(), j[hit].tolist()):
            pairs[t].append((a, b))
            involved[a] = involved[b] = True
    return CollisionReport(pairs, involved)


# ---------------------------------------------------------------------------
# time to collision


def disc_ttc(p: np.ndarray, v: np.ndarray, radius: float | np.ndarray) -> np.ndarray:
    """First time at which ``|p + v t| = radius`` for t >= 0, capped at 10 s.

    ``p`` and ``v`` are relative positions and velocities ``[..., 2]``.
    Already-touching discs give 0; pairs that never reach contact give NaN.
    """
    p, v = np.asarray(p, float), np.asarray(v, float)
    a = (v * v).sum(-1)
    b = 2.0 * (p * v).sum(-1)
    c = (p * p).sum(-1) - np.asarray(radius, float) ** 2
    disc = b * b - 4.0 * a * c
    with np.errstate(divide="ignore", invalid="ignore"):
        root = (-b - np.sqrt(np.maximum(disc, 0.0))) / (2.0 * a)
    approach = (a > 0) & (disc >= 0) & (root > 0)
    out = np.where(approach, np.minimum(root, TTC_CAP), np.nan)
    return np.where(c <= 0, 0.0, out)


def _velocity(heading, speed) -> np.ndarray:
    return np.stack([speed * np.cos(heading), speed * np.sin(heading)], axis=-1)


def ttc(s: Scenario, agent_i: int, step: int) -> float | None:
    """Minimum constant-velocity disc TTC between ``agent_i`` and any other agent."""
    a = s.agents[agent_i]
    st = a.states[step]
    if not st.valid:
        raise ValueError(f"agent {agent_i} is invalid at step {step}")
    others = [b for j, b in enumerate(s.agents) if j != agent_i and b.states[step].valid]
    if not others:
        return None
    ob = np.array([b.states[step].as_tuple() for b in others])
    r = math.hypot(a.length, a.width) / 2.0 + np.array([math.hypot(b.length, b.width) / 2.0 for b in others])
    p = ob[:, :2] - np.array([st.x, st.y])
    v = _velocity(ob[:, 2], ob[:, 3]) - _velocity(st.heading, st.speed)
    t = disc_ttc(p, v, r)
    return None if np.all(np.isnan(t)) else float(np.nanmin(t))


def scenario_ttcs(s: Scenario) -> np.ndarray:
    """TTC of every valid agent at every step (NaN-free, no-approach dropped)."""
    if len(s.agents) < 2:
        return np.zeros(0)
    arr = np.stack([a.array() for a in s.agents])
    valid = np.stack([a.valid_mask() for a in s.agents])
    rad = np.array([math.hypot(a.length, a.width) / 2.0 for a in s.agents])
    out = []
    for t in range(s.num_steps):
        idx = np.flatnonzero(valid[:, t])
        if len(idx) < 2:
            continue
        x = arr[idx, t]
        vel = _velocity(x[:, 2], x[:, 3])
        p = x[None, :, :2] - x[:, None, :2]
        v = vel[None] - vel[:, None]
        tt = disc_ttc(p, v, rad[idx][:, None] + rad[idx][None])
        np.fill_diagonal(tt, np.nan)
        ok = ~np.all(np.isnan(tt), axis=1)
        out.extend(np.nanmin(tt[ok], axis=1).tolist())
    return np.asarray(out)


# ---------------------------------------------------------------------------
# displacement and diversity


@dataclass(frozen=True)
class DisplacementMetrics:
    sfde_min: float
    sfde_avg: float
    sade_min: float
    sade_avg: float


def _mode_valid(preds: np.ndarray, valid: np.ndarray | None) -> np.ndarray:
    if valid is None:
        return np.ones(preds.shape[:-1], dtype=bool)
    valid = np.asarray(valid, bool)
    return np.broadcast_to(valid, preds.shape[:-1])


def displacement_metrics(
    preds: np.ndarray,
    gt: np.ndarray,
    pred_valid: np.ndarray | None = None,
    gt_valid: np.ndarray | None = None,
) -> DisplacementMetrics:
    """Scenario-level final/average displacement errors over M modes.

    ``preds`` is ``[M, A, T, 2]`` and ``gt`` is ``[A, T, 2]``.  Per mode,
    SFDE averages each agent's error at its last jointly valid step and SADE
    averages each agent's mean error over its jointly valid steps.
    """
    preds, gt = np.asarray(preds, float), np.asarray(gt, float)
    if preds.ndim != 4 or gt.ndim != 3 or preds.shape[1:] != gt.shape or preds.shape[-1] != 2:
        raise AlignmentError(f"prediction shape {preds.shape} does not align with ground truth {gt.shape}")
    if preds.shape[0] < 1:
        raise AlignmentError("need at least one mode")
    ok = _mode_valid(preds, pred_valid) & _mode_valid(gt, gt_valid)[None]
    err = np.linalg.norm(preds - gt[None], axis=-1)
    sfde, sade = [], []
    for m in range(preds.shape[0]):
        f, a = [], []
        for i in range(gt.shape[0]):
            steps = np.flatnonzero(ok[m, i])
            if len(steps) == 0:
                continue
            f.append(err[m, i, steps[-1]])
            a.append(err[m, i, steps].mean())
        if not f:
            raise AlignmentError(f"mode {m} shares no valid step with the ground truth")
        sfde.append(float(np.mean(f)))
        sade.append(float(np.mean(a)))
    return DisplacementMetrics(min(sfde), float(np.mean(sfde)), min(sade), float(np.mean(sade)))


@dataclass(frozen=True)
class DiversityMetrics:
    fdd: float
    sdd: float
    add: float


def mean_pairwise_distance(points: np.ndarray) -> float:
    pts = np.asarray(points, float)
    if len(pts) < 2:
        return 0.0
    d = [np.hypot(*(pts[i] - pts[j])) for i, j in combinations(range(len(pts)), 2)]
    return float(np.mean(d))


def diversity_metrics(preds: np.ndarray, valid: np.ndarray | None = None) -> DiversityMetrics:
    """Mean pairwise spread across modes at the first, last and every step.

    Only steps at which every mode is valid count; agents without such a
    step are skipped.  A single mode gives zeros.
    """
    preds = np.asarray(preds, float)
    M, A = preds.shape[:2]
    if M < 2:
        return DiversityMetrics(0.0, 0.0, 0.0)
    ok = _mode_valid(preds, valid).all(axis=0)   # A T
    fdd, sdd, add = [], [], []
    for i in range(A):
        steps = np.flatnonzero(ok[i])
        if len(steps) == 0:
            continue
        spread = [mean_pairwise_distance(preds[:, i, t]) for t in steps]
        sdd.append(spread[0])
        fdd.append(spread[-1])
        add.append(float(np.mean(spread)))
    if not fdd:
        return DiversityMetrics(0.0, 0.0, 0.0)
    return DiversityMetrics(float(np.mean(fdd)), float(np.mean(sdd)), float(np.mean(add)))


# ---------------------------------------------------------------------------
# histograms and JSD


@dataclass
class Histogram:
    lo: float
    hi: float
    num_bins: int
    counts: np.ndarray = field(default=None)

    def __post_init__(self):
        if not (self.hi > self.lo) or self.num_bins < 1:
            raise BinningError(f"bad binning [{self.lo}, {self.hi}] x {self.num_bins}")
        if self.counts is None:
            self.counts = np.zeros(self.num_bins, dtype=np.int64)
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.shape != (self.num_bins,):
            raise BinningError("counts length does not match num_bins")

    def add(self, values: Iterable[float]) -> "Histogram":
        """Tally values; out-of-range values land in the edge bins."""
        v = np.asarray(list(values) if not isinstance(values, np.ndarray) else values, float).ravel()
        v = v[np.isfinite(v)]
        idx = np.floor((v - self.lo) / (self.hi - self.lo) * self.num_bins).astype(np.int64)
        np.add.at(self.counts, np.clip(idx, 0, self.num_bins - 1), 1)
        return self

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def probs(self) -> np.ndarray:
        n = self.total
        return self.counts / n if n else np.zeros(self.num_bins)

    def same_binning(self, other: "Histogram") -> bool:
        return (self.lo, self.hi, self.num_bins) == (other.lo, other.hi, other.num_bins)

    def edges(self) -> np.ndarray:
        return np.linspace(self.lo, self.hi, self.num_bins + 1)


def _kl2(p: np.ndarray, m: np.ndarray) -> float:
    nz = p > 0
    return float(np.sum(p[nz] * np.log2(p[nz] / m[nz])))


def jsd_probs(p: np.ndarray, q: np.ndarray) -> float:
    p, q = np.asarray(p, float), np.asarray(q, float)
    if p.shape != q.shape:
        raise BinningError(f"probability vectors differ in length: {p.shape} vs {q.shape}")
    m = 0.5 * (p + q)
    return float(np.clip(0.5 * _kl2(p, m) + 0.5 * _kl2(q, m), 0.0, 1.0))


def jsd(p: Histogram, q: Histogram) -> float:
    """Base-2 Jensen-Shannon divergence of two normalized histograms.

    Two empty histograms are identical (0); one empty histogram against a
    non-empty one is maximally different (1).
    """
    if not p.same_binning(q):
        raise BinningError(f"histogram binnings differ: ({p.lo}, {p.hi}, {p.num_bins}) vs ({q.lo}, {q.hi}, {q.num_bins})")
    if p.total == 0 or q.total == 0:
        return 0.0 if p.total == q.total else 1.0
    return jsd_probs(p.probs(), q.probs())


# ---------------------------------------------------------------------------
# corpus evaluation


@dataclass(frozen=True)
class BinsConfig:
    velocity: tuple[float, float, int] = (0.0, 30.0, 30)
    accel: tuple[float, float, int] = (-10.0, 10.0, 40)
    ttc: tuple[float, float, int] = (0.0, TTC_CAP, 20)


@dataclass
class CorpusHistograms:
    velocity: Histogram
    accel: Histogram
    ttc: Histogram

    @classmethod
    def empty(cls, bins: BinsConfig) -> "CorpusHistograms":
        return cls(Histogram(*bins.velocity), Histogram(*bins.accel), Histogram(*bins.ttc))

    def add_scenario(self, s: Scenario) -> None:
        for a in s.agents:
            arr, ok = a.array(), a.valid_mask()
            self.velocity.add(np.abs(arr[ok, 3]))
            both = ok[1:] & ok[:-1]
            self.accel.add((np.diff(arr[:, 3]) / s.dt)[both])
        self.ttc.add(scenario_ttcs(s))


# Table-style column order first, then the extra columns.
REPORT_COLUMNS = (
    "fdd", "add", "jsd_velocity", "jsd_accel", "jsd_ttc", "attack_success",
    "agent_coll_min", "adv_traffic_coll", "sdd", "sfde_avg", "sfde_min", "sade_avg", "sade_min",
    "agent_coll_avg", "num_scenarios", "seed",
)


@dataclass
class EvalReport:
    fdd: float
    add: float
    jsd_velocity: float
    jsd_accel: float
    jsd_ttc: float
    attack_success: float
    agent_coll_min: float
    adv_traffic_coll: float
    sdd: float
    sfde_avg: float
    sfde_min: float
    sade_avg: float
    sade_min: float
    agent_coll_avg: float
    num_scenarios: int
    seed: int | None = None
    histograms: dict = field(default=None, repr=False, compare=False)

    def row(self) -> list[str]:
        out = []
        for name in REPORT_COLUMNS:
            v = getattr(self, name)
            if v is None:
                out.append("")
            elif isinstance(v, float):
                out.append(f"{v:.6f}")
            else:
                out.append(str(v))
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        w.writerow(self.row())
        return buf.getvalue()


def find_adv(pred: Scenario, gt: Scenario) -> int | None:
    """Index of the single agent present in ``pred`` but not in ``gt``."""
    gt_ids = {a.id for a in gt.agents}
    extra = [i for i, a in enumerate(pred.agents) if a.id not in gt_ids]
    return extra[-1] if extra else None


def _positions(s: Scenario, ids: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
    by_id = {a.id: a for a in s.agents}
    pos = np.stack([by_id[i].array()[:, :2] for i in ids])
    ok = np.stack([by_id[i].valid_mask() for i in ids])
    return pos, ok


NON_SCENARIO_FILES = ("manifest.json", "run_config.json")


def is_scenario_file(path: Path) -> bool:
    return path.suffix == ".json" and not path.name.endswith(".sidecar.json") and path.name not in NON_SCENARIO_FILES


def load_corpus(directory: str | Path) -> dict[str, list[tuple[str, Scenario]]]:
    """Scenario files of a directory grouped by scenario id (sorted by file name).

    Sidecars, manifests and other non-scenario JSON files are skipped.
    """
    groups: dict[str, list[tuple[str, Scenario]]] = defaultdict(list)
    for path in sorted(Path(directory).glob("*.json")):
        if not is_scenario_file(path):
            continue
        s = load_scenario(path)
        groups[s.scenario_id].append((path.name, s))
    return dict(groups)


def evaluate_groups(
    preds: dict[str, list[Scenario]],
    gts: dict[str, Scenario],
    bins: BinsConfig | None = None,
    seed: int | None = None,
) -> EvalReport:
    """Aggregate every metric over scenario ids present in both corpora."""
    bins = bins or BinsConfig()
    ids = sorted(set(preds) & set(gts))
    if not ids:
        raise MissingPairError("prediction and ground-truth corpora share no scenario id")
    unpaired = sorted(set(gts) ^ set(preds))
    if unpaired:
        raise MissingPairError(f"scenario ids without a partner: {', '.join(unpaired[:5])}")
    h_pred, h_gt = CorpusHistograms.empty(bins), CorpusHistograms.empty(bins)
    disp, div, coll_avg, coll_min = [], [], [], []
    n_files = n_attack = n_adv_traffic = 0
    for sid in ids:
        gt = gts[sid]
        modes = preds[sid]
        h_gt.add_scenario(gt)
        rates = []
        for p in modes:
            h_pred.add_scenario(p)
            rep = check_collisions(p)
            rates.append(rep.agent_rate)
            n_files += 1
            adv = find_adv(p, gt)
            if adv is not None:
                ego = p.ego_index
                hits = [pair for step in rep.pairs for pair in step if adv in pair]
                n_attack += any(ego in pair for pair in hits)
                n_adv_traffic += any(ego not in pair for pair in hits)
        coll_avg.append(float(np.mean(rates)))
        coll_min.append(float(np.min(rates)))

        shared = [a.id for a in gt.agents if all(p.agent_by_id(a.id) is not None for p in modes)]
        if shared:
            g_pos, g_ok = _positions(gt, shared)
            mp = [_positions(p, shared) for p in modes]
            disp.append(displacement_metrics(
                np.stack([m[0] for m in mp]), g_pos, np.stack([m[1] for m in mp]), g_ok
            ))
        every = [a.id for a in modes[0].agents if all(p.agent_by_id(a.id) is not None for p in modes)]
        mp = [_positions(p, every) for p in modes]
        div.append(diversity_metrics(np.stack([m[0] for m in mp]), np.stack([m[1] for m in mp])))

    def mean(vals) -> float:
        vals = list(vals)
        return float(np.mean(vals)) if vals else 0.0

    return EvalReport(
        fdd=mean(d.fdd for d in div),
        add=mean(d.add for d in div),
        jsd_velocity=jsd(h_pred.velocity, h_gt.velocity),
        jsd_accel=jsd(h_pred.accel, h_gt.accel),
        jsd_ttc=jsd(h_pred.ttc, h_gt.ttc),
        attack_success=n_attack / n_files,
        agent_coll_min=mean(coll_min),
        adv_traffic_coll=n_adv_traffic / n_files,
        sdd=mean(d.sdd for d in div),
        sfde_avg=mean(d.sfde_avg for d in disp),
        sfde_min=mean(d.sfde_min for d in disp),
        sade_avg=mean(d.sade_avg for d in disp),
        sade_min=mean(d.sade_min for d in disp),
        agent_coll_avg=mean(coll_avg),
        num_scenarios=len(ids),
        seed=seed,
        histograms={"pred": h_pred, "gt": h_gt},
    )


def evaluate(pred_dir: str | Path, gt_dir: str | Path, bins: BinsConfig | None = None,
             seed: int | None = None) -> EvalReport:
    """Evaluate a directory of generated scenarios against their sources.

    Several prediction files may share one scenario id; each is a mode.
    """
    preds = {k: [s for _, s in v] for k, v in load_corpus(pred_dir).items()}
    gts = {}
    for k, v in load_corpus(gt_dir).items():
        gts[k] = v[0][1]
    return evaluate_groups(preds, gts, bins, seed)


def report_fields() -> tuple[str, ...]:
    return tuple(f.name for f in fields(EvalReport) if f.name != "histograms")
