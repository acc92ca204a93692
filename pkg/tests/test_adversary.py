from __future__ import annotations

import json
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from advbmt.adversary import (
    ADV_SHAPES,
    AdvResult,
    CollisionSpec,
    GenerationMode,
    build_adversary,
    dumps_sidecar,
    ego_adv_contact,
    filter_adversary,
    generate_batch,
    sample_collision,
    track_stats,
)
from advbmt.geometry import OrientedBox, separation
from advbmt.model import BmtConfig, BmtModel
from advbmt.scenario import INVALID_STATE, AgentState, AgentTrack, dumps_scenario, with_agents
from helpers import simple_scenario, straight_track

SMALL = BmtConfig(hidden_dim=16, num_heads=2, num_encoder_layers=1, num_decoder_blocks=1,
                  fourier_bands=4, ffn_mult=2, seed=1)


@pytest.fixture(scope="module")
def model():
    return BmtModel(SMALL)


def parked_ego_scenario():
    ego = straight_track("ego", speed=0.0, is_ego=True)
    return simple_scenario(agents=[ego, straight_track("b", y0=8.0, speed=6.0)])


# ---------------------------------------------------------------------------
# collision sampling


def test_head_on_contact_position():
    s = parked_ego_scenario()
    spec = sample_collision(s, np.random.default_rng(0), {"adv_heading": math.pi, "t_c": 5})
    assert spec.adv_position[0] == pytest.approx(4.75, abs=1e-9)
    assert spec.adv_position[1] == pytest.approx(0.0, abs=1e-9)
    assert spec.adv_shape == (4.8, 2.0)


def test_sampling_ranges():
    s = simple_scenario()
    for i in range(200):
        spec = sample_collision(s, np.random.default_rng(i))
        assert 2 <= spec.t_c <= 18
        assert 0.0 <= spec.adv_heading < 2 * math.pi
        ego_v = s.ego.states[spec.t_c].speed
        assert max(0.5, ego_v - 2) - 1e-12 <= spec.adv_speed <= min(30.0, ego_v + 6) + 1e-12


def test_sampling_deterministic():
    s = simple_scenario()
    assert sample_collision(s, np.random.default_rng(3)) == sample_collision(s, np.random.default_rng(3))


def test_override_keeps_other_draws():
    s = simple_scenario()
    a = sample_collision(s, np.random.default_rng(4))
    b = sample_collision(s, np.random.default_rng(4), {"adv_heading": 1.0})
    assert (a.t_c, a.adv_speed) == (b.t_c, b.adv_speed)
    assert b.adv_heading == 1.0


def test_bad_overrides():
    s = simple_scenario()
    with pytest.raises(ValueError):
        sample_collision(s, np.random.default_rng(0), {"colour": "red"})
    with pytest.raises(ValueError):
        sample_collision(s, np.random.default_rng(0), {"t_c": 1})
    with pytest.raises(ValueError):
        sample_collision(s, np.random.default_rng(0), {"adv_kind": "truck"})


@pytest.mark.parametrize("kind", sorted(ADV_SHAPES))
def test_kind_sets_shape(kind):
    spec = sample_collision(simple_scenario(), np.random.default_rng(0), {"adv_kind": kind})
    assert spec.adv_shape == ADV_SHAPES[kind][:2]


@given(st.integers(0, 2**32 - 1))
def test_contact_guarantee_for_any_spec(seed):
    s = simple_scenario()
    spec = sample_collision(s, np.random.default_rng(seed))
    ego_box = OrientedBox.of(s.ego, s.ego.states[spec.t_c])
    assert separation(ego_box, spec.box()) == pytest.approx(-0.05, abs=1e-8)


def test_spec_dict_round_trip():
    spec = sample_collision(simple_scenario(), np.random.default_rng(5))
    assert CollisionSpec.from_dict(json.loads(json.dumps(spec.to_dict()))) == spec


# ---------------------------------------------------------------------------
# reconstruction


@pytest.mark.parametrize("mode", list(GenerationMode))
def test_every_mode_anchors_and_touches(model, synth_small, mode):
    s = synth_small[0]
    spec = sample_collision(s, np.random.default_rng(1))
    r = build_adversary(s, spec, mode, model, np.random.default_rng(2))
    adv = r.adv
    assert adv.id == "adv" and adv.kind == "vehicle"
    assert len(r.scenario.agents) == len(s.agents) + 1
    got = adv.states[spec.t_c]
    want = spec.anchor()
    assert max(abs(u - v) for u, v in zip(got.as_tuple(), want.as_tuple())) <= 1e-9
    assert ego_adv_contact(r)
    assert all(not st.valid for st in adv.states[spec.t_c + 1:])
    assert all(st.valid for st in adv.states[: spec.t_c + 1])
    # the ego keeps its recorded track in every mode
    assert r.scenario.ego == s.ego


def test_replay_leaves_traffic_untouched(model, synth_small):
    s = synth_small[1]
    spec = sample_collision(s, np.random.default_rng(7))
    r = build_adversary(s, spec, GenerationMode.REPLAY, model, np.random.default_rng(8))
    assert r.scenario.agents[:-1] == s.agents
    assert dumps_scenario(with_agents(r.scenario, list(r.scenario.agents[:-1]))) == dumps_scenario(s)


def test_forward_refine_keeps_replay_adv(model, synth_small):
    s = synth_small[2]
    spec = sample_collision(s, np.random.default_rng(9))
    rep = build_adversary(s, spec, GenerationMode.REPLAY, model, np.random.default_rng(10))
    ref = build_adversary(s, spec, GenerationMode.FORWARD_REFINE, model, np.random.default_rng(10))
    a = np.array([st.as_tuple() for st in rep.adv.states if st.valid])
    b = np.array([st.as_tuple() for st in ref.adv.states if st.valid])
    assert a.shape == b.shape
    assert np.max(np.abs(a - b)) <= 1e-9


def test_closed_loop_repredicts_traffic_before_impact(model, synth_small):
    s = synth_small[0]
    spec = sample_collision(s, np.random.default_rng(1), {"t_c": 10})
    r = build_adversary(s, spec, GenerationMode.CLOSED_LOOP_REVERSE, model, np.random.default_rng(2))
    changed = [a.states[:10] != b.states[:10] for a, b in zip(r.scenario.agents, s.agents) if not a.is_ego]
    assert any(changed)
    # from t_c on the recorded states stay
    assert all(a.states[10:] == b.states[10:] for a, b in zip(r.scenario.agents, s.agents))


def test_adv_id_is_unique(model):
    s = simple_scenario(agents=[straight_track("ego", is_ego=True), straight_track("adv", y0=8.0)])
    spec = sample_collision(s, np.random.default_rng(0))
    r = build_adversary(s, spec, GenerationMode.REPLAY, model, np.random.default_rng(0))
    assert r.adv.id == "adv_1"


# ---------------------------------------------------------------------------
# filter


def adv_result(states, t_c=None, scenario=None):
    s = scenario or parked_ego_scenario()
    t_c = len(states) - 1 if t_c is None else t_c
    full = list(states) + [INVALID_STATE] * (19 - len(states))
    adv = AgentTrack("adv", "vehicle", 4.8, 2.0, 1.5, tuple(full), False)
    spec = CollisionSpec(t_c, full[t_c].heading, full[t_c].speed, (full[t_c].x, full[t_c].y), (4.8, 2.0))
    return AdvResult(with_agents(s, list(s.agents) + [adv]), spec, GenerationMode.REPLAY)


def test_straight_track_accepted():
    # 40 m at 8 m/s, far from the ego until the end
    states = [AgentState(-45.0 + 4.0 * t, 30.0, 0.0, 8.0) for t in range(11)]
    r = filter_adversary(adv_result(states))
    assert r.accepted and r.rejection_reason is None
    st_ = track_stats(r.adv)
    assert st_.path_length == pytest.approx(40.0)
    assert st_.max_curvature == 0.0


def test_sharp_turn_rejected_for_curvature():
    pre = [AgentState(-40.0 + 4.0 * t, 30.0, 0.0, 8.0) for t in range(6)]
    last = pre[-1]
    turn = AgentState(last.x + 1.5, last.y, math.pi / 2, 8.0)
    r = filter_adversary(adv_result(pre + [turn]))
    assert track_stats(r.adv).max_curvature == pytest.approx((math.pi / 2) / 1.5)
    assert r.rejection_reason == "curvature" and not r.accepted


def test_short_track_rejected():
    states = [AgentState(30.0 + 0.5 * t, 30.0, 0.0, 8.0) for t in range(7)]
    assert filter_adversary(adv_result(states)).rejection_reason == "too_short"


def test_slow_track_rejected():
    states = [AgentState(30.0 + 2.0 * t, 30.0, 0.0, 0.5) for t in range(7)]
    assert filter_adversary(adv_result(states)).rejection_reason == "too_slow"


def test_early_collision_rejected():
    # drives through the parked ego before the nominal collision step
    states = [AgentState(-20.0 + 4.0 * t, 0.0, 0.0, 8.0) for t in range(12)]
    r = filter_adversary(adv_result(states))
    assert r.rejection_reason == "early_collision"


def test_rule_order_reports_first_failure():
    # too short and sharply turning: too_short wins
    states = [AgentState(30.0, 30.0, 0.0, 0.1), AgentState(30.5, 30.0, 1.5, 0.1)]
    assert filter_adversary(adv_result(states)).rejection_reason == "too_short"


def test_filter_never_mutates_tracks():
    states = [AgentState(30.0 + 0.5 * t, 30.0, 0.0, 8.0) for t in range(7)]
    r = adv_result(states)
    f = filter_adversary(r)
    assert f.scenario is r.scenario and f.spec is r.spec


@pytest.mark.parametrize("radius", [2.0, 5.0, 20.0])
def test_curvature_of_circle_arc(radius):
    v, dt = 1.0, 0.5
    w = v / radius
    states = []
    for t in range(19):
        th = w * dt * t
        states.append(AgentState(radius * math.sin(th), radius * (1 - math.cos(th)), th, v))
    track = AgentTrack("arc", "vehicle", 4.8, 2.0, 1.5, tuple(states))
    assert track_stats(track).max_curvature == pytest.approx(1.0 / radius, rel=0.05)


# ---------------------------------------------------------------------------
# batches


def test_batch_determinism_and_seeds(model, synth_small):
    s = synth_small[0]
    a = generate_batch(s, 6, GenerationMode.REPLAY, model, 42, max_resamples=2)
    b = generate_batch(s, 6, GenerationMode.REPLAY, model, 42, max_resamples=2)
    assert len(a) == 6
    assert [dumps_scenario(r.scenario) for r in a] == [dumps_scenario(r.scenario) for r in b]
    assert [r.seed for r in a] == [r.seed for r in b]
    assert len({r.seed for r in a}) == 6
    assert all(ego_adv_contact(r) for r in a)


def test_zero_resamples_returns_first_candidate(model, synth_small):
    s = synth_small[0]
    rs = generate_batch(s, 4, GenerationMode.REPLAY, model, 3, max_resamples=0)
    assert [r.seed for r in rs] == [(3, i, 0) for i in range(4)]
    for i, r in enumerate(rs):
        rng = np.random.default_rng([3, i, 0])
        spec = sample_collision(s, rng)
        assert spec == r.spec


def test_batch_argument_checks(model, synth_small):
    with pytest.raises(ValueError):
        generate_batch(synth_small[0], 0, GenerationMode.REPLAY, model, 0)
    with pytest.raises(ValueError):
        generate_batch(synth_small[0], 1, GenerationMode.REPLAY, model, 0, max_resamples=-1)


def test_sidecar_fields(model, synth_small):
    r = generate_batch(synth_small[0], 1, GenerationMode.FORWARD_REFINE, model, [1, 2], max_resamples=0)[0]
    d = json.loads(dumps_sidecar(r))
    assert set(d) == {"spec", "mode", "accepted", "rejection_reason", "seed"}
    assert d["mode"] == "forward_refine" and d["seed"] == [1, 2, 0, 0]
    assert CollisionSpec.from_dict(d["spec"]) == r.spec
