from __future__ import annotations

import math
from dataclasses import replace

import numpy as np
import pytest

from advbmt.errors import DivergenceError, GradCheckFailure, MaskError
from advbmt.kinematics import Direction
from advbmt.model import BmtConfig, BmtModel
from advbmt.training import (
    GRAD_CHECK_CONFIG,
    AdamW,
    Dataset,
    TrainSettings,
    _valid_runs,
    agent_sequence,
    clip_grads,
    grad_check,
    grad_check_batch,
    loss_and_grads,
    token_loss,
    train,
    usage_perplexity,
)
from helpers import straight_track

TINY = replace(GRAD_CHECK_CONFIG, learning_rate=1e-3)


@pytest.fixture(scope="module")
def batch(synth_small):
    return Dataset(synth_small, BmtConfig()).batch([0, 1], Direction.FORWARD)


def test_uniform_logits_give_log_vocab(batch):
    _, tb = batch
    logits = np.zeros(tb.dims + (1092,))
    loss, diag, _ = token_loss(logits, tb)
    assert loss == pytest.approx(math.log(1092), abs=1e-12)
    assert loss == pytest.approx(6.996, abs=1e-3)
    assert diag.entropy_fwd == pytest.approx(math.log(1092))


def test_one_hot_logits(batch):
    _, tb = batch
    logits = np.zeros(tb.dims + (1092,))
    np.put_along_axis(logits, tb.targets[..., None], 50.0, axis=-1)
    loss, diag, _ = token_loss(logits, tb)
    assert loss <= 1e-3
    assert diag.accuracy_fwd == 1.0
    assert math.isnan(diag.accuracy_rev)


def test_degenerate_predictions(batch):
    _, tb = batch
    logits = np.zeros(tb.dims + (1092,))
    logits[..., 544] = 5.0
    _, diag, _ = token_loss(logits, tb)
    assert diag.clusters == 1
    assert diag.perplexity == pytest.approx(1.0, abs=1e-6)


def test_usage_perplexity_uniform():
    ppl, clusters = usage_perplexity(np.arange(10).repeat(3), 20)
    assert clusters == 10
    assert ppl == pytest.approx(10.0, rel=1e-6)


def test_empty_mask_raises(batch):
    _, tb = batch
    with pytest.raises(MaskError):
        token_loss(np.zeros(tb.dims + (1092,)), replace(tb, mask=np.zeros_like(tb.mask)))
    with pytest.raises(MaskError):
        token_loss(np.zeros((1, 1, 1, 1092)), tb)


def test_loss_gradient_is_softmax_minus_onehot(batch):
    _, tb = batch
    rng = np.random.default_rng(0)
    logits = rng.normal(size=tb.dims + (1092,))
    _, _, d = token_loss(logits, tb)
    n = tb.mask.sum()
    p = np.exp(logits - logits.max(-1, keepdims=True))
    p /= p.sum(-1, keepdims=True)
    ref = p.copy()
    np.put_along_axis(ref, tb.targets[..., None], np.take_along_axis(p, tb.targets[..., None], -1) - 1, -1)
    ref = np.where(tb.mask[..., None], ref / n, 0.0)
    assert np.allclose(d, ref, atol=1e-15)


# ---------------------------------------------------------------------------
# sequence layout


def test_valid_runs():
    assert _valid_runs([True, True, False, True]) == [(0, 2), (3, 4)]
    assert _valid_runs([False, False]) == []
    assert _valid_runs([True] * 3) == [(0, 3)]


def test_agent_sequence_layout():
    cfg = BmtConfig()
    track = straight_track()
    for d in Direction:
        seq = agent_sequence(track, d, cfg)
        assert seq.tokens[0] == cfg.start_token
        assert np.all(seq.tokens[1:] == 544)
        assert np.all(seq.targets == 544) and seq.mask.all()
        assert seq.valid.all()
    fwd = agent_sequence(track, Direction.FORWARD, cfg)
    rev = agent_sequence(track, Direction.REVERSE, cfg)
    assert fwd.poses[0, 0] == pytest.approx(0.0)
    assert rev.poses[0, 0] == pytest.approx(track.states[-1].x)


# ---------------------------------------------------------------------------
# gradients


def test_grad_check_passes():
    rep = grad_check()
    assert rep.passed
    assert rep.num_checked >= 200
    assert rep.num_parameters <= 10_000
    assert rep.max_rel_error <= 1e-4
    assert len(rep.worst) == 10


def test_grad_check_reports_offenders():
    m = BmtModel(GRAD_CHECK_CONFIG).astype(np.float64)
    sb, tb = grad_check_batch(GRAD_CHECK_CONFIG)

    class Broken(BmtModel):
        def backward(self, d):
            g = super().backward(d)
            g["dec.head.fc2.b"] = g["dec.head.fc2.b"] * 2 + 1.0
            return g

    broken = Broken(GRAD_CHECK_CONFIG, m.params, m.buffers, dtype=np.float64)
    with pytest.raises(GradCheckFailure) as info:
        grad_check(model=broken, batch=(sb, tb), num_params=60)
    assert any("dec.head" in o for o in info.value.offenders)


def test_doubled_loss_doubles_gradients():
    m = BmtModel(GRAD_CHECK_CONFIG).astype(np.float64)
    sb, tb = grad_check_batch(GRAD_CHECK_CONFIG)
    _, _, g1 = loss_and_grads(m, sb, tb)
    _, _, g2 = loss_and_grads(m, sb, tb, weight=2.0)
    for k in g1:
        assert np.array_equal(g2[k], 2.0 * g1[k])


def test_zero_head_weight_gradient_pattern():
    m = BmtModel(GRAD_CHECK_CONFIG).astype(np.float64)
    m.params["dec.head.fc2.W"][:] = 0.0
    sb, tb = grad_check_batch(GRAD_CHECK_CONFIG)
    _, _, g = loss_and_grads(m, sb, tb)
    # logits are bias-only, so nothing upstream of the last layer gets gradient
    assert not np.any(g["dec.head.fc1.W"])
    assert not np.any(g["dec.motion_token.W"])
    assert np.any(g["dec.head.fc2.W"]) and np.any(g["dec.head.fc2.b"])
    rep = grad_check(model=m, batch=(sb, tb), num_params=200)
    assert rep.passed


def test_clip_grads():
    g = {"a": np.array([3.0, 4.0])}
    assert clip_grads(g, 1.0) == pytest.approx(5.0)
    assert np.allclose(g["a"], [0.6, 0.8])
    g = {"a": np.array([0.3, 0.4])}
    clip_grads(g, 1.0)
    assert np.allclose(g["a"], [0.3, 0.4])


def test_adamw_first_step_is_sign_times_lr():
    p = {"w": np.ones((2, 2)), "b": np.zeros(2)}
    opt = AdamW(p, lr=0.1, weight_decay=0.0)
    opt.step(p, {"w": np.array([[1.0, -2.0], [3.0, -4.0]]), "b": np.array([0.5, -0.5])})
    assert np.allclose(p["w"], [[0.9, 1.1], [0.9, 1.1]], atol=1e-6)
    assert np.allclose(p["b"], [-0.1, 0.1], atol=1e-6)


def test_adamw_decays_matrices_only():
    p = {"w": np.ones((2, 2)), "b": np.ones(2)}
    opt = AdamW(p, lr=0.1, weight_decay=0.5)
    opt.step(p, {"w": np.zeros((2, 2)), "b": np.zeros(2)})
    assert np.allclose(p["w"], 0.95) and np.allclose(p["b"], 1.0)


# ---------------------------------------------------------------------------
# training loop


def test_training_is_deterministic(synth_small):
    s = TrainSettings(steps=6, batch_size=2, log_every=3, forward_fraction=0.5)
    a = train(synth_small, TINY, s)
    b = train(synth_small, TINY, s)
    assert abs(a.final_loss - b.final_loss) <= 1e-9
    assert [r.step for r in a.log] == [3, 6]


def test_training_reduces_loss(synth_small):
    s = TrainSettings(steps=40, batch_size=3, log_every=40, forward_fraction=0.5, warmup=1)
    ds = Dataset(synth_small, TINY)
    from advbmt.training import evaluate_loss

    before = evaluate_loss(BmtModel(TINY), ds)[0]
    after = train(ds, TINY, s).final_loss
    assert after < before


def test_divergence_detected(synth_small):
    m = BmtModel(TINY)
    m.params["dec.head.fc2.b"][0] = np.nan
    with pytest.raises(DivergenceError):
        train(synth_small, TINY, TrainSettings(steps=2, batch_size=2), model=m)


def test_empty_dataset_rejected():
    with pytest.raises(ValueError):
        train([], TINY, TrainSettings(steps=1))
