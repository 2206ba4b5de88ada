import math

import numpy as np
import pytest

from mixmem import tensor as T
from mixmem.brain import BrainModel, BrainModelConfig
from mixmem.errors import DimensionError, LabelError
from mixmem.losses import (Stage1Batch, Stage1Weights, action_loss, clip_loss,
                           cls_loss, info_nce, stage1_loss, stage1_terms)


def rows(seed, shape):
    return T.Rng(seed).normal(shape)


def test_weights_validate():
    with pytest.raises(DimensionError):
        Stage1Weights(tau=0.0).validate()
    with pytest.raises(DimensionError):
        Stage1Weights(focal_mix=1.5).validate()
    assert Stage1Weights().validate().tau == 0.07


def test_info_nce_single_pair_is_zero():
    loss = info_nce(np.array([[0.3, 0.7]]), np.array([[-1.0, 2.0]]), 0.07)
    assert float(loss.data) == 0.0


def test_info_nce_equal_similarities_ln2():
    a = np.array([[1.0, 0.0], [1.0, 0.0]])
    loss = info_nce(a, a, 0.07)
    assert abs(float(loss.data) - math.log(2.0)) < 1e-5


def test_info_nce_orthogonal_pairs_tau007():
    a = np.array([[1.0, 0.0], [0.0, 1.0]])
    loss = info_nce(a, a, 0.07)
    expect = math.log1p(math.exp(-1.0 / 0.07))
    assert abs(float(loss.data) - expect) < 1e-9
    assert abs(expect - 6.2e-7) < 1e-8


def test_info_nce_nonnegative():
    for seed in range(20):
        a, t = rows(seed, (5, 7)), rows(seed + 100, (5, 7))
        assert float(info_nce(a, t, 0.07).data) >= 0.0


def test_info_nce_anchor_rescale_invariant():
    a, t = rows(0, (4, 6)), rows(1, (4, 6))
    base = float(info_nce(a, t, 0.07).data)
    a2 = a.copy()
    a2[2] *= 37.5
    assert abs(float(info_nce(a2, t, 0.07).data) - base) < 1e-7


def test_info_nce_symmetric_averages_directions():
    a, t = rows(2, (4, 6)), rows(3, (4, 6))
    sym = float(info_nce(a, t, 0.07, symmetric=True).data)
    fwd = float(info_nce(a, t, 0.07).data)
    bwd = float(info_nce(t, a, 0.07).data)
    assert abs(sym - 0.5 * (fwd + bwd)) < 1e-12


def test_info_nce_bad_inputs():
    with pytest.raises(DimensionError):
        info_nce(np.zeros((0, 4)), np.zeros((0, 4)), 0.07)
    with pytest.raises(DimensionError):
        info_nce(np.zeros((2, 4)), np.zeros((2, 5)), 0.07)
    with pytest.raises(DimensionError):
        info_nce(np.zeros(4), np.zeros(4), 0.07)


def test_clip_loss_perfect_single():
    f = np.array([[0.6, -0.8]])
    assert float(clip_loss(f, f, f, 0.07).data) == 0.0


def test_clip_loss_uniform_two():
    f = np.array([[1.0, 0.0], [1.0, 0.0]])
    loss = clip_loss(f, f, f, 0.07)
    assert abs(float(loss.data) - 2.0 * math.log(2.0)) < 1e-5


def test_clip_loss_compositional():
    f, img, txt = rows(4, (4, 8)), rows(5, (4, 8)), rows(6, (4, 8))
    total = float(clip_loss(f, img, txt, 0.07).data)
    parts = float(info_nce(f, img, 0.07).data) + float(info_nce(f, txt, 0.07).data)
    assert abs(total - parts) < 1e-12


def test_action_loss_delegates():
    f, act = rows(7, (3, 5)), rows(8, (3, 5))
    assert float(action_loss(f, act, 0.07).data) == float(info_nce(f, act, 0.07).data)


def test_cls_loss_perfect_prediction():
    logits = np.array([[40.0, -40.0], [-40.0, 40.0]])
    labels = np.array([[1, 0], [0, 1]])
    assert float(cls_loss(logits, labels).data) < 1e-6


def test_cls_loss_gamma_zero_is_bce():
    rng = T.Rng(9)
    for _ in range(100):
        logits = rng.normal((4, 6), 2.0)
        labels = (rng.uniform((4, 6)) < 0.5).astype(np.float64)
        got = float(cls_loss(logits, labels, gamma=0.0, focal_mix=1.0).data)
        p = np.clip(1.0 / (1.0 + np.exp(-logits)), 1e-7, 1.0 - 1e-7)
        bce = -(labels * np.log(p) + (1.0 - labels) * np.log(1.0 - p)).mean()
        assert abs(got - bce) < 1e-6


def test_cls_loss_single_positive_focal():
    loss = cls_loss(np.array([[0.0]]), np.array([[1]]), gamma=2.0, focal_mix=1.0)
    assert abs(float(loss.data) - 0.25 * math.log(2.0)) < 1e-6


def test_cls_loss_float32_saturated_logits_stay_finite():
    logits = T.Tensor(np.array([[40.0, -40.0]]), dtype=np.float32)
    loss = cls_loss(logits, np.array([[0, 1]]))
    assert np.isfinite(loss.data)
    assert float(loss.data) > 1.0


def test_cls_loss_rejects_bad_labels():
    with pytest.raises(LabelError):
        cls_loss(np.zeros((2, 3)), np.full((2, 3), 0.5))
    with pytest.raises(LabelError):
        cls_loss(np.zeros((2, 3)), np.full((2, 3), 2.0))
    with pytest.raises(DimensionError):
        cls_loss(np.zeros((2, 3)), np.zeros((2, 4)))


def _tiny_model(seed=30):
    cfg = BrainModelConfig(n_voxels=12, n_layers=1, d_model=6, n_tokens=3,
                           d_clip=6, d_act=4, n_classes=3, mlp_ratio=2)
    return BrainModel(cfg, T.Rng(seed))


def _tiny_batch(seed=40, B=3):
    rng = T.Rng(seed)
    labels = (rng.uniform((B, 3)) < 0.4).astype(np.float64)
    labels[:, 0] = 1.0
    return Stage1Batch(signals=T.Tensor(rng.normal((B, 12))),
                       frames=T.Tensor(rng.normal((B, 2, 6))),
                       text=T.Tensor(rng.normal((B, 6))),
                       action=T.Tensor(rng.normal((B, 4))),
                       labels=labels)


def test_stage1_zero_lambdas_equal_clip():
    model, batch = _tiny_model(), _tiny_batch()
    w = Stage1Weights(lambda_action=0.0, lambda_cls=0.0)
    total, _ = stage1_loss(batch, model, w)
    enc = model.encode_batch(batch.signals)
    expect = clip_loss(enc.global_token, model.consolidate_frames(batch.frames),
                       batch.text, w.tau)
    assert float(total.data) == float(expect.data)


def test_stage1_degenerate_batch_near_zero():
    model = _tiny_model()
    model.class_head.weight.data[:] = 0.0
    model.class_head.bias.data[:] = np.array([30.0, -30.0, 30.0], dtype=np.float32)
    rng = T.Rng(41)
    batch = Stage1Batch(signals=T.Tensor(rng.normal((1, 12))),
                        frames=T.Tensor(rng.normal((1, 2, 6))),
                        text=T.Tensor(rng.normal((1, 6))),
                        action=T.Tensor(rng.normal((1, 4))),
                        labels=np.array([[1.0, 0.0, 1.0]]))
    total, _ = stage1_loss(batch, model, Stage1Weights())
    assert float(total.data) < 1e-5


def test_stage1_compositional_oracle():
    model, batch = _tiny_model(31), _tiny_batch(42)
    w = Stage1Weights()
    total, breakdown = stage1_loss(batch, model, w)
    l_clip, l_action, l_cls = stage1_terms(model, batch, w)
    expect = float(l_clip.data) + 0.1 * float(l_action.data) + 10.0 * float(l_cls.data)
    assert abs(float(total.data) - expect) < 1e-9
    assert abs(breakdown["clip"] - float(l_clip.data)) < 1e-12
    assert abs(breakdown["action"] - float(l_action.data)) < 1e-12
    assert abs(breakdown["cls"] - float(l_cls.data)) < 1e-12


def test_stage1_grad_flows_to_all_params():
    model, batch = _tiny_model(32), _tiny_batch(43)
    w = Stage1Weights()
    params = [p for _, p in model.named_parameters()]
    err = T.grad_check(lambda: stage1_loss(batch, model, w)[0], params)
    assert err < 1e-3
