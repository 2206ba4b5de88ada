import numpy as np
import pytest

from mixmem import tensor as T
from mixmem.brain import BrainModel, BrainModelConfig
from mixmem.errors import DimensionError


def tiny_cfg(**kw):
    base = dict(n_voxels=16, n_layers=1, d_model=8, n_tokens=4, d_clip=8,
                d_act=4, n_classes=3, mlp_ratio=2)
    base.update(kw)
    return BrainModelConfig(**base)


def test_config_rejects_nonpositive():
    with pytest.raises(DimensionError):
        BrainModelConfig(n_voxels=0).validate()
    with pytest.raises(DimensionError):
        BrainModelConfig(d_model=6, n_heads=4).validate()


def test_encode_zero_signal_shapes_finite():
    model = BrainModel(BrainModelConfig(), T.Rng(0))
    enc = model.encode(np.zeros(256, dtype=np.float32))
    assert enc.global_token.shape == (64,)
    assert enc.embedding.shape == (8, 32)
    assert np.all(np.isfinite(enc.global_token.data))
    assert np.all(np.isfinite(enc.embedding.data))


def test_encode_deterministic_bitwise():
    model = BrainModel(tiny_cfg(), T.Rng(1))
    sig = T.Rng(2).normal((16,)).astype(np.float32)
    a, b = model.encode(sig), model.encode(sig)
    assert a.global_token.data.tobytes() == b.global_token.data.tobytes()
    assert a.embedding.data.tobytes() == b.embedding.data.tobytes()


def test_encode_length_mismatch():
    model = BrainModel(tiny_cfg(), T.Rng(1))
    with pytest.raises(DimensionError):
        model.encode(np.zeros(17, dtype=np.float32))
    with pytest.raises(DimensionError):
        model.encode_batch(np.zeros((2, 15), dtype=np.float32))


def test_encode_single_voxel_sensitivity():
    model = BrainModel(tiny_cfg(), T.Rng(3))
    sig = T.Rng(4).normal((16,)).astype(np.float32)
    bumped = sig.copy()
    bumped[7] += 1.0
    a, b = model.encode(sig), model.encode(bumped)
    assert not np.array_equal(a.global_token.data, b.global_token.data)
    assert not np.array_equal(a.embedding.data, b.embedding.data)


def test_encode_permutation_sensitive():
    for seed in range(5):
        model = BrainModel(tiny_cfg(), T.Rng(seed))
        rng = T.Rng(100 + seed)
        sig = rng.normal((16,)).astype(np.float32)
        perm = rng.permutation(16)
        if np.array_equal(perm, np.arange(16)):
            perm = np.roll(perm, 1)
        a, b = model.encode(sig), model.encode(sig[perm])
        assert not np.array_equal(a.global_token.data, b.global_token.data)


def test_encode_batch_matches_single():
    model = BrainModel(tiny_cfg(), T.Rng(5))
    sigs = T.Rng(6).normal((3, 16)).astype(np.float32)
    batch = model.encode_batch(sigs)
    for i in range(3):
        one = model.encode(sigs[i])
        assert np.allclose(one.global_token.data, batch.global_token.data[i], atol=1e-6)
        assert np.allclose(one.embedding.data, batch.embedding.data[i], atol=1e-6)


def test_encode_pads_uneven_voxels():
    model = BrainModel(tiny_cfg(n_voxels=14), T.Rng(7))
    enc = model.encode(np.ones(14, dtype=np.float32))
    assert enc.embedding.shape == (4, 8)


def test_consolidate_single_frame_identity_head():
    model = BrainModel(tiny_cfg(), T.Rng(8))
    v = np.arange(8, dtype=np.float32)
    out = model.consolidate_frames(v.reshape(1, 8))
    assert np.allclose(out.data, v, atol=1e-7)


def test_consolidate_constant_frames_idempotent():
    model = BrainModel(tiny_cfg(), T.Rng(9))
    v = T.Rng(10).normal((8,)).astype(np.float32)
    one = model.consolidate_frames(v.reshape(1, 8))
    many = model.consolidate_frames(np.tile(v, (5, 1)))
    assert np.allclose(one.data, many.data, atol=1e-6)


def test_consolidate_hand_mean():
    model = BrainModel(tiny_cfg(d_clip=2), T.Rng(11))
    frames = np.array([[1.0, 0.0], [0.0, 1.0]], dtype=np.float32)
    out = model.consolidate_frames(frames)
    assert np.allclose(out.data, [0.5, 0.5], atol=1e-7)


def test_consolidate_empty_raises():
    model = BrainModel(tiny_cfg(), T.Rng(12))
    with pytest.raises(DimensionError):
        model.consolidate_frames(np.zeros((0, 8), dtype=np.float32))


def test_consolidate_batched():
    model = BrainModel(tiny_cfg(), T.Rng(13))
    frames = T.Rng(14).normal((2, 3, 8)).astype(np.float32)
    batched = model.consolidate_frames(frames)
    assert batched.shape == (2, 8)
    for i in range(2):
        assert np.allclose(batched.data[i],
                           model.consolidate_frames(frames[i]).data, atol=1e-6)


def test_action_project_zero_weights():
    model = BrainModel(tiny_cfg(), T.Rng(15))
    model.action_head.weight.data[:] = 0.0
    out = model.action_project(np.ones(8, dtype=np.float32))
    assert np.all(out.data == 0.0)


def test_action_project_identity_passthrough():
    model = BrainModel(tiny_cfg(d_act=8), T.Rng(16))
    model.action_head.weight.data[:] = np.eye(8)
    v = T.Rng(17).normal((8,)).astype(np.float32)
    assert np.allclose(model.action_project(v).data, v, atol=1e-7)


def test_heads_hand_matvec():
    model = BrainModel(tiny_cfg(d_clip=3, d_act=2, n_classes=2), T.Rng(18))
    w = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]], dtype=np.float32)
    x = np.array([1.0, -1.0, 2.0], dtype=np.float32)
    expect = np.array([1 - 3 + 10, 2 - 4 + 12], dtype=np.float32)
    model.action_head.weight.data[:] = w
    model.action_head.bias.data[:] = 0.0
    model.class_head.weight.data[:] = w
    model.class_head.bias.data[:] = 0.0
    assert np.allclose(model.action_project(x).data, expect, atol=1e-6)
    assert np.allclose(model.classify(x).data, expect, atol=1e-6)


def test_classify_zero_weights():
    model = BrainModel(tiny_cfg(), T.Rng(19))
    model.class_head.weight.data[:] = 0.0
    model.class_head.bias.data[:] = 0.0
    out = model.classify(T.Rng(20).normal((8,)).astype(np.float32))
    assert np.all(out.data == 0.0)


def test_parameter_names_unique():
    model = BrainModel(BrainModelConfig(), T.Rng(21))
    names = [n for n, _ in model.named_parameters()]
    assert len(names) == len(set(names))


def test_grad_check_through_encoder_and_heads():
    model = BrainModel(tiny_cfg(), T.Rng(22))
    sig = T.Tensor(T.Rng(23).normal((2, 16)), dtype=np.float32)
    frames = T.Tensor(T.Rng(24).normal((2, 3, 8)), dtype=np.float32)

    def loss_fn():
        enc = model.encode_batch(sig)
        s = T.tmean(T.square(enc.global_token))
        s = T.add(s, T.tmean(T.square(enc.embedding)))
        s = T.add(s, T.tmean(T.square(model.action_project(enc.global_token))))
        s = T.add(s, T.tmean(T.square(model.classify(enc.global_token))))
        return T.add(s, T.tmean(T.square(model.consolidate_frames(frames))))

    err = T.grad_check(loss_fn, [p for _, p in model.named_parameters()])
    assert err < 1e-3
