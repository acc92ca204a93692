from __future__ import annotations

import math
from dataclasses import replace

import numpy as np
import pytest

from advbmt.errors import CapacityError, ShapeError
from advbmt.kinematics import DEFAULT_TOKEN_SPACE as TS
from advbmt.kinematics import Direction, step_forward
from advbmt.model import BmtConfig, BmtModel, scene_batch
from advbmt.nn import Gelu
from advbmt.rollout import _History, decode_step, encode_scene
from advbmt.scenario import AgentState, MapPolyline, preprocess, translate_scenario
from advbmt.training import Dataset, collate, loss_and_grads, token_loss
from helpers import simple_scenario, straight_track


@pytest.fixture(scope="module")
def model():
    return BmtModel(BmtConfig())


@pytest.fixture(scope="module")
def data(synth_small):
    return Dataset(synth_small, BmtConfig())


def test_vocabulary_layout():
    cfg = BmtConfig()
    assert cfg.vocab_size == 1092
    assert (cfg.start_token, cfg.end_token, cfg.pad_token) == (1089, 1090, 1091)


def test_parameter_count_is_desk_scale(model):
    assert 100_000 < model.num_parameters < 1_000_000


def test_single_agent_single_step_shape(model):
    s = simple_scenario(agents=[straight_track("ego", is_ego=True)])
    cs = preprocess(s)
    hist = _History(cs.scenario.agents, Direction.FORWARD, model, 1)
    hist.put(0, 0, cs.scenario.agents[0].states[0], None)
    logits = decode_step(hist.batch(1), encode_scene(cs, model), model)
    assert logits.shape == (1, 1, 1092)
    assert np.all(np.isfinite(logits))


def test_gelu_matches_tanh_form():
    x = np.linspace(-4, 4, 101)
    ref = 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x ** 3)))
    assert np.allclose(Gelu().forward(x), ref, atol=1e-12)


# ---------------------------------------------------------------------------
# causality and masking


def _perturb_after(tb, t, rng):
    tb2 = replace(tb, tokens=tb.tokens.copy(), motion=tb.motion.copy(), poses=tb.poses.copy())
    tb2.tokens[:, t:] = rng.integers(0, 1089, size=tb2.tokens[:, t:].shape)
    tb2.motion[:, t:] += rng.normal(size=tb2.motion[:, t:].shape)
    tb2.poses[:, t:] += rng.normal(size=tb2.poses[:, t:].shape)
    return tb2


@pytest.mark.parametrize("t", [1, 7, 17])
def test_temporal_causality(model, data, t):
    rng = np.random.default_rng(t)
    for d in Direction:
        sb, tb = data.batch([0, 1], d)
        base = model.forward(sb, tb)
        other = model.forward(sb, _perturb_after(tb, t, rng))
        assert np.array_equal(base[:, :t], other[:, :t])
        assert not np.array_equal(base[:, t:], other[:, t:])


def test_masked_targets_do_not_change_loss(model, data):
    sb, tb = data.batch([0, 1, 2], Direction.FORWARD)
    logits = model.forward(sb, tb)
    loss, _, _ = token_loss(logits, tb)
    targets = tb.targets.copy()
    rng = np.random.default_rng(0)
    targets[~tb.mask] = rng.integers(0, 1092, size=int((~tb.mask).sum()))
    assert token_loss(logits, replace(tb, targets=targets))[0] == loss


def test_invalid_positions_do_not_change_loss(model, data):
    sb, tb = data.batch([0, 1, 2], Direction.REVERSE)
    assert (~tb.valid).any()
    loss = token_loss(model.forward(sb, tb), tb)[0]
    rng = np.random.default_rng(1)
    inv = ~tb.valid
    tb2 = replace(tb, tokens=tb.tokens.copy(), motion=tb.motion.copy(), poses=tb.poses.copy())
    tb2.tokens[inv] = rng.integers(0, 1089, size=int(inv.sum()))
    tb2.motion[inv] = rng.normal(size=tb2.motion[inv].shape)
    tb2.poses[inv] = rng.normal(size=tb2.poses[inv].shape)
    assert token_loss(model.forward(sb, tb2), tb2)[0] == loss


def test_direction_flag_changes_logits_after_training_step(data):
    from advbmt.training import AdamW

    m = BmtModel(BmtConfig(seed=3))
    sb, tb = data.batch([0], Direction.FORWARD)
    _, _, grads = loss_and_grads(m, sb, tb)
    AdamW(m.params, 1e-3, 0.0).step(m.params, grads)
    flipped = replace(tb, reverse=~tb.reverse)
    assert np.max(np.abs(m.forward(sb, tb) - m.forward(sb, flipped))) > 0


def test_inconsistent_batch_raises_shape_error(model, data):
    sb, tb = data.batch([0], Direction.FORWARD)
    with pytest.raises(ShapeError):
        model.forward(sb, replace(tb, valid=tb.valid[:, :-1]))
    sb2, _ = data.batch([0, 1], Direction.FORWARD)
    with pytest.raises(ShapeError):
        model.forward(sb2, tb)


# ---------------------------------------------------------------------------
# scene encoder


def test_empty_map_gives_empty_embedding(model):
    cs = preprocess(simple_scenario(polylines=[]))
    emb = encode_scene(cs, model)
    assert emb.tokens.shape == (1, 0, 64)
    # the decoder still runs without scene attention
    hist = _History(cs.scenario.agents, Direction.FORWARD, model, 1)
    for n, a in enumerate(cs.scenario.agents):
        hist.put(0, n, a.states[0], None)
    assert decode_step(hist.batch(1), emb, model).shape == (1, 2, 1092)


def test_polyline_capacity():
    cfg = BmtConfig(max_polylines=2)
    polys = [MapPolyline("lane", ((0.0, float(i)), (10.0, float(i)))) for i in range(3)]
    with pytest.raises(CapacityError):
        scene_batch([preprocess(simple_scenario(polylines=polys))], cfg)


def test_encoder_permutation_equivariant(model, synth_small):
    s = synth_small[0]
    perm = np.random.default_rng(0).permutation(len(s.map))
    s2 = replace(s, map=tuple(s.map[i] for i in perm))
    a = encode_scene(preprocess(s), model).tokens[0]
    b = encode_scene(preprocess(s2), model).tokens[0]
    assert np.max(np.abs(a[perm] - b)) <= 1e-5


def test_encoder_translation_invariant(model, synth_small):
    s = synth_small[1]
    a = encode_scene(preprocess(s), model).tokens
    b = encode_scene(preprocess(translate_scenario(s, 100.0, 100.0)), model).tokens
    assert np.max(np.abs(a - b)) <= 1e-5


def test_encoding_is_deterministic(model, synth_small):
    cs = preprocess(synth_small[2])
    assert np.array_equal(encode_scene(cs, model).tokens, encode_scene(cs, model).tokens)


def test_same_seed_same_parameters():
    a, b = BmtModel(BmtConfig(seed=4)), BmtModel(BmtConfig(seed=4))
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    c = BmtModel(BmtConfig(seed=5))
    assert any(not np.array_equal(a.params[k], c.params[k]) for k in a.params)


# ---------------------------------------------------------------------------
# mirror symmetry of the token vocabulary


def test_yaw_flip_mirrors_dynamics():
    # reflecting about the x-axis maps (x, y, th) -> (x, -y, -th); the flipped
    # token must reproduce the reflected successor exactly
    perm = TS.yaw_flip_permutation()
    rng = np.random.default_rng(0)
    for _ in range(200):
        s = AgentState(*rng.uniform(-20, 20, 2), rng.uniform(-3, 3), rng.uniform(0, 20))
        z = int(rng.integers(TS.num_tokens))
        a = step_forward(s, z)
        b = step_forward(AgentState(s.x, -s.y, -s.heading, s.speed), int(perm[z]))
        assert (b.x, b.speed) == pytest.approx((a.x, a.speed), abs=1e-12)
        assert (b.y, b.heading) == pytest.approx((-a.y, -a.heading), abs=1e-12)


def test_collate_pads_agents(synth_small):
    cfg = BmtConfig()
    ds = Dataset(synth_small, cfg)
    sb, tb = collate([ds.fwd[0], ds.fwd[1]], cfg)
    n0 = len(ds.fwd[0].agents)
    n1 = len(ds.fwd[1].agents)
    assert tb.dims == (2, 18, max(n0, n1))
    small = 0 if n0 < n1 else 1
    assert not tb.valid[small, :, min(n0, n1):].any()
