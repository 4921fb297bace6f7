import numpy as np
import pytest
import torch

from peac.model import EncoderConfig, PEACEncoder, StudentTeacher, encode, ema_update, l2_normalize, param_distance

from conftest import tiny_model


def test_identical_inputs_identical_outputs():
    model = PEACEncoder(EncoderConfig())
    crop = np.random.default_rng(0).random((64, 64))
    a = encode(model, np.stack([crop, crop]), heads=True)
    assert torch.equal(a.patch_features[0], a.patch_features[1])
    b = encode(model, crop, heads=True)
    torch.testing.assert_close(a.patch_features[:1], b.patch_features)


def test_output_shapes_and_pooling():
    cfg = EncoderConfig()
    model = PEACEncoder(cfg)
    out = encode(model, np.random.default_rng(1).random((2, 64, 64)), heads=True)
    assert out.patch_features.shape == (2, 64, 64)
    assert out.global_embed.shape == (2, cfg.out_dim)
    assert out.local_embeds.shape == (2, 64, cfg.out_dim)
    assert out.order_logits.shape == (2, 64, 64)
    assert out.restored.shape == (2, 64, 64)
    rel = (out.pooled - out.patch_features.mean(dim=1)).abs().max() / out.pooled.abs().max()
    assert rel < 1e-6


def test_heads_only_when_requested():
    out = encode(PEACEncoder(EncoderConfig()), np.zeros((64, 64)))
    assert out.order_logits is None and out.restored is None


def test_shape_mismatch_rejected():
    model = PEACEncoder(EncoderConfig())
    with pytest.raises(ValueError):
        encode(model, np.zeros((60, 60)))
    with pytest.raises(ValueError):
        model(torch.zeros(1, 3, 64, 64))


def test_permutation_equivariance_without_pos_embed():
    st = tiny_model(depth=2, use_pos_embed=False)
    model = st.student
    m, k = model.config.patch_size, model.config.grid
    crop = torch.rand(1, k * m, k * m, dtype=torch.float64)
    perm = torch.randperm(k * k)
    patches = crop.reshape(1, k, m, k, m).permute(0, 1, 3, 2, 4).reshape(1, k * k, m, m)
    shuffled = patches[:, perm].reshape(1, k, k, m, m).permute(0, 1, 3, 2, 4).reshape(1, k * m, k * m)
    f = model(crop).patch_features
    g = model(shuffled).patch_features
    torch.testing.assert_close(g, f[:, perm], rtol=1e-10, atol=1e-12)


def test_l2_normalize_unit_and_zero_error():
    x = torch.randn(50, 8, dtype=torch.float64) * 1e3
    n = l2_normalize(x).norm(dim=-1)
    assert torch.all((n - 1).abs() < 1e-6)
    with pytest.raises(ValueError):
        l2_normalize(torch.zeros(2, 4))


def test_teacher_starts_equal_and_frozen():
    st = StudentTeacher(EncoderConfig(depth=1, dim=16, heads=2))
    assert param_distance(st.student, st.teacher) == 0.0
    assert all(not p.requires_grad for p in st.teacher.parameters())
    assert all(p.requires_grad for p in st.student.parameters())


def _fill(module, value):
    with torch.no_grad():
        for p in module.parameters():
            p.fill_(value)


def test_ema_single_step_value():
    st = tiny_model()
    _fill(st.student, 1.0)
    _fill(st.teacher, 0.0)
    st.ema_update()
    for p in st.teacher.parameters():
        torch.testing.assert_close(p, torch.full_like(p, 0.001), rtol=0, atol=1e-15)


def test_ema_fixed_point():
    st = tiny_model()
    before = [p.clone() for p in st.teacher.parameters()]
    st.ema_update()
    assert all(torch.equal(a, b) for a, b in zip(before, st.teacher.parameters()))


def test_ema_geometric_decay():
    st = tiny_model()
    with torch.no_grad():
        for p in st.teacher.parameters():
            p.add_(torch.randn_like(p))
    gap0 = param_distance(st.student, st.teacher)
    for _ in range(50):
        st.ema_update()
    assert param_distance(st.student, st.teacher) == pytest.approx(0.999**50 * gap0, rel=1e-10)


def test_ema_shape_mismatch():
    a = PEACEncoder(EncoderConfig(dim=16, heads=2, depth=1))
    b = PEACEncoder(EncoderConfig(dim=32, heads=2, depth=1))
    with pytest.raises(ValueError):
        ema_update(a, b, 0.9)


def test_ema_alpha_validated():
    with pytest.raises(ValueError):
        StudentTeacher(EncoderConfig(depth=1, dim=16, heads=2), ema_alpha=1.0)


def test_pos_embed_interpolates_for_other_grids():
    model = PEACEncoder(EncoderConfig(depth=1, dim=16, heads=2))
    out = model(torch.rand(1, 96, 96))
    assert out.patch_features.shape == (1, 144, 16)
