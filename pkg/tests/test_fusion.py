import math

import numpy as np
import pytest

from mixmem import tensor as T
from mixmem.errors import DimensionError, PoolError
from mixmem.fusion import FusionParams, attend_memories, fuse


def make_params(seed=0, d_model=4, d_clip=4, d_act=4, alpha=1.0):
    return FusionParams.create(d_model, d_clip, d_act, T.Rng(seed), alpha=alpha)


def test_gates_start_exactly_zero():
    p = make_params()
    assert np.all(p.gate_fmri.weight.data == 0.0)
    assert np.all(p.gate_fmri.bias.data == 0.0)
    assert np.all(p.gate_txt.weight.data == 0.0)
    assert np.all(p.gate_txt.bias.data == 0.0)


def test_attend_zero_value_projections():
    p = make_params(1)
    p.attn_img.wv.data[:] = 0.0
    p.attn_act.wv.data[:] = 0.0
    rng = T.Rng(2)
    out = attend_memories(rng.normal((3, 4)), rng.normal((2, 4)),
                          rng.normal((2, 4)), p)
    assert np.all(out.data == 0.0)


def test_attend_single_memory_broadcasts_value():
    p = make_params(3)
    rng = T.Rng(4)
    f_e = rng.normal((3, 4)).astype(np.float32)
    img = rng.normal((1, 4)).astype(np.float32)
    act = rng.normal((1, 4)).astype(np.float32)
    out = attend_memories(f_e, img, act, p)
    v = (img @ p.attn_img.wv.data) + (act @ p.attn_act.wv.data)
    for row in out.data:
        assert np.allclose(row, v[0], atol=1e-6)


def test_attend_hand_example():
    p = make_params(5, d_model=2, d_clip=2, d_act=2)
    for attn in (p.attn_img, p.attn_act):
        attn.wq.data[:] = np.eye(2, dtype=np.float32)
        attn.wk.data[:] = np.eye(2, dtype=np.float32)
        attn.wv.data[:] = np.eye(2, dtype=np.float32)
    f_e = np.array([[1.0, 0.0]], np.float32)
    img = np.array([[1.0, 0.0], [0.0, 1.0]], np.float32)
    act = np.array([[0.0, 1.0], [1.0, 1.0]], np.float32)
    s = 1.0 / math.sqrt(2.0)
    w_hi = math.exp(s) / (math.exp(s) + 1.0)
    expect_img = np.array([w_hi, 1.0 - w_hi])
    expect_act = (1.0 - w_hi) * np.array([0.0, 1.0]) + w_hi * np.array([1.0, 1.0])
    out = attend_memories(f_e, img, act, p)
    assert np.allclose(out.data[0], expect_img + expect_act, atol=1e-5)


def test_attend_duplicate_rows_invariant():
    p = make_params(6)
    rng = T.Rng(7)
    f_e = rng.normal((3, 4))
    img, act = rng.normal((2, 4)), rng.normal((2, 4))
    base = attend_memories(f_e, img, act, p)
    doubled = attend_memories(f_e, np.repeat(img, 2, axis=0),
                              np.repeat(act, 2, axis=0), p)
    assert np.allclose(base.data, doubled.data, atol=1e-5)


def test_attend_empty_memories():
    p = make_params(8)
    with pytest.raises(PoolError):
        attend_memories(np.ones((2, 4)), np.zeros((0, 4)), np.ones((1, 4)), p)


def test_fuse_zero_init_identity_bitwise():
    p = make_params(9, d_model=6, d_clip=5)
    rng = T.Rng(10)
    for _ in range(20):
        f_hat = rng.normal((3, 6)).astype(np.float32)
        text = rng.normal((5,)).astype(np.float32)
        tokens = fuse(f_hat, text, p).tokens.data
        assert tokens.shape == (3, 5)
        for row in tokens:
            assert row.tobytes() == text.tobytes()


def test_fuse_alpha_zero_ignores_tokens():
    p = make_params(11, alpha=0.0)
    rng = T.Rng(12)
    p.gate_fmri.weight.data[:] = rng.normal((4, 4)).astype(np.float32)
    p.gate_txt.weight.data[:] = rng.normal((4, 4)).astype(np.float32)
    text = rng.normal((4,)).astype(np.float32)
    a = fuse(rng.normal((3, 4)).astype(np.float32), text, p).tokens.data
    b = fuse(rng.normal((3, 4)).astype(np.float32), text, p).tokens.data
    z_t = text @ p.gate_txt.weight.data + text
    assert np.allclose(a, b, atol=1e-7)
    for row in a:
        assert np.allclose(row, z_t, atol=1e-6)


def test_fuse_hand_example():
    p = make_params(13, d_model=3, d_clip=3)
    rng = T.Rng(14)
    wf = rng.normal((3, 3)).astype(np.float32)
    wt = rng.normal((3, 3)).astype(np.float32)
    p.gate_fmri.weight.data[:] = wf
    p.gate_fmri.bias.data[:] = np.array([0.1, -0.2, 0.3], np.float32)
    p.gate_txt.weight.data[:] = wt
    f_hat = rng.normal((2, 3)).astype(np.float32)
    text = rng.normal((3,)).astype(np.float32)
    out = fuse(f_hat, text, p).tokens.data

    x = f_hat.astype(np.float64)
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    ln = (x - mu) / np.sqrt(var + 1e-5)
    z_f = ln @ wf + np.array([0.1, -0.2, 0.3])
    z_t = text @ wt + text
    assert np.allclose(out, z_t[None, :] + 1.0 * z_f, atol=1e-5)


def test_fuse_alpha_continuity():
    eps = 1e-3
    rng = T.Rng(15)
    p0 = make_params(16, alpha=0.0)
    p_eps = make_params(16, alpha=eps)
    gate = rng.normal((4, 4)).astype(np.float32)
    p0.gate_fmri.weight.data[:] = gate
    p_eps.gate_fmri.weight.data[:] = gate
    f_hat = rng.normal((3, 4)).astype(np.float32)
    text = rng.normal((4,)).astype(np.float32)
    a = fuse(f_hat, text, p_eps).tokens.data
    b = fuse(f_hat, text, p0).tokens.data
    x = f_hat.astype(np.float64)
    ln = (x - x.mean(-1, keepdims=True)) / np.sqrt(x.var(-1, keepdims=True) + 1e-5)
    z_f = ln @ gate
    assert np.linalg.norm(a - b) <= eps * np.linalg.norm(z_f) + 1e-6


def test_fuse_batched_matches_loop():
    p = make_params(17, d_model=5, d_clip=4)
    rng = T.Rng(18)
    f_hat = rng.normal((3, 2, 5)).astype(np.float32)
    text = rng.normal((3, 4)).astype(np.float32)
    p.gate_fmri.weight.data[:] = rng.normal((5, 4)).astype(np.float32)
    batch = fuse(f_hat, text, p).tokens.data
    assert batch.shape == (3, 2, 4)
    for i in range(3):
        single = fuse(f_hat[i], text[i], p).tokens.data
        assert np.allclose(batch[i], single, atol=1e-6)


def test_fuse_shape_mismatch():
    p = make_params(19)
    with pytest.raises(DimensionError):
        fuse(np.ones((2, 4)), np.ones((2, 4)), p)


def test_one_step_opens_the_gate():
    p = make_params(20)
    rng = T.Rng(21)
    f_e = T.Tensor(rng.normal((3, 4)), dtype=np.float32)
    img = T.Tensor(rng.normal((2, 4)), dtype=np.float32)
    act = T.Tensor(rng.normal((2, 4)), dtype=np.float32)
    text = T.Tensor(rng.normal((4,)), dtype=np.float32)
    loss = T.tmean(T.square(fuse(attend_memories(f_e, img, act, p), text, p).tokens))
    loss.backward()
    g = p.gate_fmri.weight.grad
    assert g is not None and np.any(g != 0.0)
    p.gate_fmri.weight.data -= 0.1 * g
    assert np.any(p.gate_fmri.weight.data != 0.0)


def test_gradients_through_fusion():
    p = make_params(22, d_model=3, d_clip=3, d_act=3)
    rng = T.Rng(23)
    p.gate_fmri.weight.data[:] = 0.1 * rng.normal((3, 3)).astype(np.float32)
    p.gate_txt.weight.data[:] = 0.1 * rng.normal((3, 3)).astype(np.float32)
    f_e = T.Tensor(rng.normal((2, 3)), dtype=np.float32)
    img = T.Tensor(rng.normal((2, 3)), dtype=np.float32)
    act = T.Tensor(rng.normal((2, 3)), dtype=np.float32)
    text = T.Tensor(rng.normal((3,)), dtype=np.float32)

    def loss_fn():
        cond = fuse(attend_memories(f_e, img, act, p), text, p)
        return T.tmean(T.square(cond.tokens))

    err = T.grad_check(loss_fn, [q for _, q in p.named_parameters()])
    assert err < 1e-3
