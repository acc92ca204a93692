"""End-to-end acceptance gate: one verdict line per criterion."""

from __future__ import annotations

import json
import math
import time

import numpy as np
import pytest

from advbmt.adversary import (
    AdvResult,
    CollisionSpec,
    GenerationMode,
    ego_adv_contact,
    filter_adversary,
    generate_batch,
    track_stats,
)
from advbmt.cli import main
from advbmt.kinematics import (
    DEFAULT_TOKEN_SPACE as TS,
    Direction,
    detokenize_track,
    step_forward,
    step_reverse,
    tokenize_pair,
    tokenize_track,
)
from advbmt.metrics import disc_ttc, displacement_metrics, jsd_probs
from advbmt.model import BmtConfig
from advbmt.rollout import rollout
from advbmt.scenario import INVALID_STATE, AgentState, AgentTrack, dumps_scenario, preprocess, with_agents
from advbmt.synth import synth_scenarios
from advbmt.training import TrainSettings, grad_check, train
from helpers import straight_track

OVERFIT_SETTINGS = TrainSettings(steps=2000, batch_size=8, forward_fraction=0.25, log_every=100, stop_loss=0.05)


def random_states(rng, n):
    return [
        AgentState(*rng.uniform(-200, 200, 2), rng.uniform(-math.pi, math.pi), rng.uniform(-30, 30))
        for _ in range(n)
    ]


def test_criterion_01_exact_inverse(verdict):
    rng = np.random.default_rng(2024)
    states = random_states(rng, 10_000)
    tokens = rng.integers(0, TS.num_tokens, 10_000).tolist()
    t0 = time.perf_counter()
    worst = 0.0
    for s, z in zip(states, tokens):
        for out in (step_forward(step_reverse(s, z), z), step_reverse(step_forward(s, z), z)):
            worst = max(worst, abs(out.x - s.x), abs(out.y - s.y), abs(out.speed - s.speed),
                        abs(math.remainder(out.heading - s.heading, 2 * math.pi)))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-9 and elapsed < 1.0
    verdict(1, ok, f"max field error {worst:.2e} (<= 1e-9), {elapsed:.3f} s (< 1 s)")
    assert ok


def test_criterion_02_tokenizer_recovery(verdict):
    rng = np.random.default_rng(7)
    states = random_states(rng, 1000)
    tokens = rng.integers(0, TS.num_tokens, 1000).tolist()
    t0 = time.perf_counter()
    hits = sum(tokenize_pair(s, step_forward(s, z), (4.8, 2.0), Direction.FORWARD)[0].id == z
               for s, z in zip(states, tokens))
    elapsed = time.perf_counter() - t0
    ok = hits == 1000 and elapsed < 30.0
    verdict(2, ok, f"{hits}/1000 tokens recovered, {elapsed:.2f} s (< 30 s)")
    assert ok


def test_criterion_03_round_trip_drift(verdict, b_step):
    tracks = []
    seed = 100
    while len(tracks) < 100:
        for s in synth_scenarios(10, seed):
            tracks += [a for a in s.agents if all(a.valid_mask())]
        seed += 1
    tracks = tracks[:100]
    drift = {d: 0.0 for d in Direction}
    contour = {d: 0.0 for d in Direction}
    for a in tracks:
        for d in Direction:
            toks, errs = tokenize_track(a, d)
            anchor = a.states[0] if d is Direction.FORWARD else a.states[-1]
            rec = detokenize_track(anchor, toks, d)
            far, true = (rec[-1], a.states[-1]) if d is Direction.FORWARD else (rec[0], a.states[0])
            drift[d] = max(drift[d], math.hypot(far.x - true.x, far.y - true.y))
            contour[d] = max(contour[d], max(errs))
    ok = all(drift[d] <= 0.5 and contour[d] <= b_step for d in Direction)
    verdict(3, ok, "B_step {:.4f} m; forward drift {:.3f} m contour {:.4f} m; reverse drift {:.3f} m contour {:.4f} m".format(
        b_step, drift[Direction.FORWARD], contour[Direction.FORWARD], drift[Direction.REVERSE], contour[Direction.REVERSE]))
    assert ok


def test_criterion_04_gradient_check(verdict):
    t0 = time.perf_counter()
    rep = grad_check(raise_on_failure=False)
    elapsed = time.perf_counter() - t0
    ok = rep.passed and rep.num_checked >= 200 and elapsed < 120
    verdict(4, ok, f"{rep.num_checked} parameters, max relative error {rep.max_rel_error:.2e} (<= 1e-4), "
                   f"{rep.num_parameters} weights, {elapsed:.1f} s")
    assert ok


@pytest.fixture(scope="module")
def overfit(synth8):
    t0 = time.perf_counter()
    result = train(synth8, BmtConfig(), OVERFIT_SETTINGS)
    return result, time.perf_counter() - t0


def greedy_sade(model, s, direction):
    cs = preprocess(s)
    agents = cs.scenario.agents
    pick = 0 if direction is Direction.FORWARD else -1
    anchors = [a.states[pick] for a in agents]
    res = rollout(model, cs, anchors, direction, s.num_steps - 1, np.random.default_rng(0), top_p=0.0)
    keep = [i for i, a in enumerate(agents) if a.states[pick].valid]
    pred = np.array([[[st.x, st.y] for st in res.states[i]] for i in keep])
    pv = np.array([[st.valid for st in res.states[i]] for i in keep])
    gt = np.array([a.array()[:, :2] for a in (agents[i] for i in keep)])
    gv = np.array([agents[i].valid_mask() for i in keep])
    return displacement_metrics(pred[None], gt, pv[None], gv).sade_avg


@pytest.mark.slow
def test_criterion_05_overfit(verdict, overfit, synth8):
    result, elapsed = overfit
    sade = {d: greedy_sade(result.model, synth8[0], d) for d in Direction}
    ok = result.final_loss <= 0.05 and result.steps <= 20_000 and max(sade.values()) <= 0.5 and elapsed < 1800
    verdict(5, ok, f"loss {result.final_loss:.4f} nats/token at step {result.steps} in {elapsed:.0f} s; "
                   f"greedy SADE forward {sade[Direction.FORWARD]:.3f} m reverse {sade[Direction.REVERSE]:.3f} m")
    assert ok


@pytest.fixture(scope="module")
def attack_batches(overfit):
    model = overfit[0].model
    scenarios = synth_scenarios(50, 11)
    return scenarios, [generate_batch(s, 6, GenerationMode.REPLAY, model, [11, i], max_resamples=0)
                       for i, s in enumerate(scenarios)]


@pytest.mark.slow
def test_criterion_06_attack_success(verdict, attack_batches):
    _, batches = attack_batches
    results = [r for b in batches for r in b]
    hits = sum(ego_adv_contact(r) for r in results)
    ok = len(results) == 300 and hits == 300
    verdict(6, ok, f"ego-ADV overlap at t_c {hits}/{len(results)} before filtering (attack success {hits / len(results):.2f})")
    assert ok


def _planted(states, t_c):
    ego = straight_track("ego", speed=0.0, is_ego=True)
    from helpers import simple_scenario

    s = simple_scenario(agents=[ego])
    full = list(states) + [INVALID_STATE] * (19 - len(states))
    adv = AgentTrack("adv", "vehicle", 4.8, 2.0, 1.5, tuple(full), False)
    st = full[t_c]
    spec = CollisionSpec(t_c, st.heading, st.speed, (st.x, st.y), (4.8, 2.0))
    return AdvResult(with_agents(s, [ego, adv]), spec, GenerationMode.REPLAY)


def test_criterion_07_filter(verdict):
    pre = [AgentState(-40.0 + 4.0 * t, 30.0, 0.0, 8.0) for t in range(6)]
    turn = AgentState(pre[-1].x + 1.5, 30.0, math.pi / 2, 8.0)
    bent = filter_adversary(_planted(pre + [turn], 6))
    kappa = track_stats(bent.adv).max_curvature
    straight = filter_adversary(_planted([AgentState(-45.0 + 4.0 * t, 30.0, 0.0, 8.0) for t in range(11)], 10))
    arcs = []
    for radius in (2.0, 5.0, 20.0):
        w = 1.0 / radius
        pts = tuple(AgentState(radius * math.sin(w * 0.5 * t), radius * (1 - math.cos(w * 0.5 * t)), w * 0.5 * t, 1.0)
                    for t in range(19))
        k = track_stats(AgentTrack("arc", "vehicle", 4.8, 2.0, 1.5, pts)).max_curvature
        arcs.append(abs(k * radius - 1.0))
    ok = (bent.rejection_reason == "curvature" and abs(kappa - math.pi / 3) < 1e-9
          and straight.accepted and max(arcs) <= 0.05)
    verdict(7, ok, f"planted turn kappa {kappa:.3f} -> {bent.rejection_reason}; straight 40 m -> "
                   f"{'accepted' if straight.accepted else straight.rejection_reason}; arc 1/R error {max(arcs):.2%}")
    assert ok


@pytest.mark.slow
def test_criterion_08_replay_fidelity(verdict, attack_batches):
    scenarios, batches = attack_batches
    same = 0
    for s, batch in zip(scenarios, batches):
        want = dumps_scenario(s)
        same += all(dumps_scenario(with_agents(r.scenario, list(r.scenario.agents[:-1]))) == want for r in batch)
    ok = same == len(scenarios) == 50
    verdict(8, ok, f"non-ADV tracks byte-identical in {same}/{len(scenarios)} scenarios")
    assert ok


def test_criterion_09_metric_oracles(verdict):
    j = (jsd_probs([0.3, 0.7], [0.3, 0.7]), jsd_probs([1, 0], [0, 1]), jsd_probs([0.5, 0.5], [1, 0]))
    gt = np.random.default_rng(0).normal(size=(1, 19, 2))
    m = displacement_metrics((gt + [3.0, 4.0])[None], gt)
    rng = np.random.default_rng(9)
    dt, bad, hit = 1e-3, 0, 0
    times = np.arange(0, 10 + dt, dt)
    for _ in range(500):
        p = rng.uniform(-30, 30, 2)
        v = rng.uniform(-15, 15, 2) if rng.random() < 0.5 else -p / 4 + rng.normal(0, 0.3, 2)
        r = rng.uniform(1.0, 5.0)
        if math.hypot(*p) <= r:
            continue
        got = float(disc_ttc(p, v, r))
        inside = np.flatnonzero(np.hypot(p[0] + v[0] * times, p[1] + v[1] * times) <= r)
        if len(inside):
            hit += 1
            bad += abs(got - times[inside[0]]) > dt + 1e-12
        else:
            bad += not (math.isnan(got) or got == 10.0)
    ok = (j[0] == 0.0 and abs(j[1] - 1) < 1e-12 and abs(j[2] - 0.3113) <= 1e-4
          and m.sfde_avg == pytest.approx(5.0, abs=1e-12) and m.sade_avg == pytest.approx(5.0, abs=1e-12) and bad == 0)
    verdict(9, ok, f"JSD {j[0]:.4f}/{j[1]:.4f}/{j[2]:.4f}; SFDE {m.sfde_avg:.6f} SADE {m.sade_avg:.6f}; "
                   f"TTC mismatches {bad} ({hit} contacts among 500 pairs)")
    assert ok


def test_criterion_10_cli_determinism(verdict, tmp_path, monkeypatch):
    # identical command lines (relative paths) run from two working directories
    tiny = {"hidden_dim": 16, "num_heads": 2, "num_encoder_layers": 1, "num_decoder_blocks": 1,
            "fourier_bands": 4, "ffn_mult": 2, "steps": 6, "batch_size": 2, "log_every": 3}
    for run in ("a", "b"):
        (tmp_path / run).mkdir()
        monkeypatch.chdir(tmp_path / run)
        (tmp_path / run / "tiny.json").write_text(json.dumps(tiny))
        codes = [
            main(["synth", "--num", "3", "--seed", "5", "--out", "data"]),
            main(["train", "--data", "data", "--config", "tiny.json", "--seed", "5", "--out", "train"]),
            main(["generate", "--checkpoint", "train/model.ckpt", "--data", "data",
                  "--num-modes", "3", "--seed", "5", "--out", "gen"]),
            main(["evaluate", "--pred", "gen", "--gt", "data", "--seed", "5", "--out", "eval"]),
        ]
        assert codes == [0, 0, 0, 0]
    outcome = {}
    for step in ("data", "train", "gen", "eval"):
        a = {p.name: p.read_bytes() for p in sorted((tmp_path / "a" / step).iterdir())}
        b = {p.name: p.read_bytes() for p in sorted((tmp_path / "b" / step).iterdir())}
        outcome[step] = a == b and len(a) > 0
    ok = all(outcome.values())
    verdict(10, ok, "byte-identical reruns: " + ", ".join(f"{k} {'yes' if v else 'NO'}" for k, v in outcome.items()))
    assert ok
