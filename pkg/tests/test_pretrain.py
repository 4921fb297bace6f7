import json
import math

import numpy as np
import pytest
import torch

from peac.geometry import GridSpecError
from peac.pretrain import (
    CheckpointError,
    ConfigError,
    NonFiniteLossError,
    TrainConfig,
    TrainState,
    dump_config,
    load_checkpoint,
    load_config,
    lr_schedule,
    parse_config_text,
    prepare_batch,
    pretrain,
    save_checkpoint,
    train_step,
)

TINY = dict(grid_n=6, grid_m=2, grid_k=4, dim=8, depth=1, heads=2, batch_size=2, epochs=2, warmup_epochs=1, grad_clip=1.0)


def _images(count=4, seed=0):
    rng = np.random.default_rng(seed)
    return [rng.random((40, 40)) for _ in range(count)]


def _weights(state):
    return [p.detach().clone() for p in state.model.student.parameters()]


# ---------------------------------------------------------------- schedule

def test_lr_schedule_endpoints():
    cfg = TrainConfig(epochs=10, warmup_epochs=2)
    spe = 4
    assert lr_schedule(0, cfg, spe) == 0.0
    assert lr_schedule(8, cfg, spe) == pytest.approx(0.1)
    assert lr_schedule(39, cfg, spe) == pytest.approx(0.0, abs=1e-15)
    assert lr_schedule(4, cfg, spe) == pytest.approx(0.05)
    mid = 8 + (39 - 8) / 2
    assert lr_schedule(mid, cfg, spe) == pytest.approx(0.05)


def test_lr_schedule_monotone_after_warmup():
    cfg = TrainConfig(epochs=10, warmup_epochs=2)
    vals = [lr_schedule(s, cfg, 4) for s in range(8, 40)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))


# ---------------------------------------------------------------- config

def test_config_defaults():
    cfg = TrainConfig()
    assert (cfg.lr, cfg.momentum, cfg.warmup_epochs, cfg.ema_alpha) == (0.1, 0.9, 5, 0.999)
    assert cfg.grid_spec().k == 8


def test_config_file_parsing_and_precedence(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# comment\nlr = 0.05\nepochs = 3  # trailing\nuse_local = false\nvariant = custom\n")
    cfg = load_config(path)
    assert cfg.lr == 0.05 and cfg.epochs == 3 and cfg.use_local is False
    assert not cfg.toggles().local_c and cfg.toggles().order
    cfg = load_config(path, lr=0.2, epochs=None)
    assert cfg.lr == 0.2 and cfg.epochs == 3


def test_config_round_trip():
    cfg = TrainConfig(**TINY, variant="peac_oag", seed=7)
    assert TrainConfig(**parse_config_text(dump_config(cfg))) == cfg


@pytest.mark.parametrize("text", ["bogus = 1", "lr 0.1", "epochs = many", "use_order = maybe"])
def test_config_parse_errors(text):
    with pytest.raises(ConfigError):
        parse_config_text(text)


def test_config_validation_errors():
    with pytest.raises(ConfigError):
        TrainConfig(lr=-1)
    with pytest.raises(ConfigError):
        TrainConfig(variant="nope")
    with pytest.raises(ConfigError, match="inconsistent"):
        TrainConfig(variant="popar", use_global=True)
    with pytest.raises(GridSpecError):
        TrainConfig(grid_n=11, grid_m=8, grid_k=11)


def test_variants_map_to_toggles():
    t = TrainConfig(variant="peac_oag").toggles()
    assert (t.order, t.restore, t.global_c, t.local_c) == (True, True, True, False)
    d = TrainConfig(variant="popar_od").distortion()
    assert d.p_ad == 0.0 and d.p_od == 0.5


# ---------------------------------------------------------------- stepping

def test_training_is_deterministic():
    imgs = _images()
    cfg = TrainConfig(**TINY, seed=3)
    _, h1 = pretrain(cfg, imgs)
    _, h2 = pretrain(cfg, imgs)
    assert h1 == h2


def test_different_seeds_differ():
    imgs = _images()
    _, h1 = pretrain(TrainConfig(**TINY, seed=1), imgs)
    _, h2 = pretrain(TrainConfig(**TINY, seed=2), imgs)
    assert h1 != h2


def test_log_has_every_component_and_sum():
    _, hist = pretrain(TrainConfig(**TINY, variant="peac_oag"), _images())
    assert len(hist) == 4
    for rec in hist:
        assert rec["local_c"] == 0.0
        assert rec["total"] == pytest.approx(rec["order"] + rec["restore"] + rec["global_c"])


def test_all_losses_disabled_leaves_student_untouched():
    cfg = TrainConfig(**TINY, variant="custom", use_order=False, use_restore=False, use_global=False, use_local=False)
    state = TrainState(cfg, 4)
    before = _weights(state)
    for _ in range(3):
        bundle = train_step(state, _images(2))
        assert bundle.as_floats()["total"] == 0.0
    assert all(torch.equal(a, b) for a, b in zip(before, _weights(state)))


def test_restore_only_updates_restore_path_not_other_heads():
    cfg = TrainConfig(**TINY, variant="custom", use_order=False, use_restore=True, use_global=False, use_local=False)
    state = TrainState(cfg, 4)
    names = [n for n, _ in state.model.student.named_parameters()]
    before = dict(zip(names, _weights(state)))
    state.step = 1  # mid-warmup, lr > 0
    train_step(state, _images(2))
    after = dict(state.model.student.named_parameters())
    for name in names:
        moved = not torch.equal(before[name], after[name])
        frozen = name.startswith(("order_head", "global_expander", "local_expander"))
        assert moved != frozen, name


def test_ema_follows_student_after_each_step():
    cfg = TrainConfig(**TINY)
    state = TrainState(cfg, 4)
    state.step = 2
    t0 = [p.clone() for p in state.model.teacher.parameters()]
    train_step(state, _images(2))
    s1 = list(state.model.student.parameters())
    for t_before, t_after, s in zip(t0, state.model.teacher.parameters(), s1):
        torch.testing.assert_close(t_after, 0.999 * t_before + 0.001 * s.detach(), rtol=1e-6, atol=1e-8)


def test_toggling_appearance_distortion_does_not_change_crop_plans():
    imgs = _images(3)
    a = TrainState(TrainConfig(**TINY, variant="custom", p_ad=0.0, seed=5), 3)
    b = TrainState(TrainConfig(**TINY, variant="custom", p_ad=1.0, seed=5), 3)
    ba = prepare_batch(imgs, a.spec, a.data_rng, a.distort_rng, a.config.distortion())
    bb = prepare_batch(imgs, b.spec, b.data_rng, b.distort_rng, b.config.distortion())
    assert [(p.inner_offset, p.offset_a, p.offset_b) for p in ba.plans] == [(p.inner_offset, p.offset_a, p.offset_b) for p in bb.plans]
    np.testing.assert_array_equal(ba.clean_a, bb.clean_a)
    assert not np.array_equal(ba.student_a, bb.student_a)
    assert all(torch.equal(p, q) for p, q in zip(a.model.student.parameters(), b.model.student.parameters()))


def test_batch_order_is_a_permutation_per_epoch():
    state = TrainState(TrainConfig(**TINY), 5)
    spe = state.steps_per_epoch
    assert spe == 3
    epoch0 = np.concatenate([state.batch_indices(s) for s in range(spe)])
    assert sorted(epoch0) == list(range(5))


def test_non_finite_loss_names_step_and_component():
    cfg = TrainConfig(**TINY)
    state = TrainState(cfg, 4)
    with torch.no_grad():
        state.model.student.restore_head.weight.fill_(float("inf"))
    with pytest.raises(NonFiniteLossError) as info:
        train_step(state, _images(2))
    assert info.value.step == 0
    assert "restore" in str(info.value)


# ---------------------------------------------------------------- checkpoints

def test_checkpoint_save_load_save_is_byte_identical(tmp_path):
    state, _ = pretrain(TrainConfig(**{**TINY, "epochs": 1}), _images())
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    save_checkpoint(state, tmp_path / "a" / "ck.npz")
    save_checkpoint(load_checkpoint(tmp_path / "a" / "ck.npz"), tmp_path / "b" / "ck.npz")
    assert (tmp_path / "a" / "ck.npz").read_bytes() == (tmp_path / "b" / "ck.npz").read_bytes()


def test_resume_matches_uninterrupted_run(tmp_path):
    imgs = _images()
    cfg = TrainConfig(**{**TINY, "epochs": 4, "seed": 9})
    full, hist_full = pretrain(cfg, imgs)
    state = TrainState(cfg, len(imgs))
    for _ in range(4):
        train_step(state, [imgs[i] for i in state.batch_indices(state.step)])
    save_checkpoint(state, tmp_path / "mid.npz")
    resumed, hist_b = pretrain(cfg, imgs, state=load_checkpoint(tmp_path / "mid.npz"))
    assert [r["step"] for r in hist_b] == [4, 5, 6, 7]
    for r, s in zip(hist_b, hist_full[4:]):
        assert r == s
    for p, q in zip(resumed.model.teacher.parameters(), full.model.teacher.parameters()):
        assert torch.equal(p, q)


def test_wrong_version_and_garbage_are_rejected(tmp_path):
    state = TrainState(TrainConfig(**TINY), 4)
    save_checkpoint(state, tmp_path / "ok.npz")
    with np.load(tmp_path / "ok.npz") as z:
        arrays = dict(z)
    meta = json.loads(arrays["meta"].tobytes())
    meta["version"] = 99
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    np.savez(tmp_path / "v99.npz", **arrays)
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(tmp_path / "v99.npz")
    (tmp_path / "junk.npz").write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "junk.npz")
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "missing.npz")


def test_pretrain_writes_log_config_and_checkpoints(tmp_path):
    cfg = TrainConfig(**TINY, checkpoint_every=1)
    pretrain(cfg, _images(), out_dir=tmp_path)
    names = sorted(p.name for p in tmp_path.glob("ckpt_*.npz"))
    assert names == ["ckpt_000000.npz", "ckpt_000002.npz", "ckpt_000004.npz"]
    lines = (tmp_path / "train_log.jsonl").read_text().splitlines()
    assert len(lines) == 4 and json.loads(lines[0])["step"] == 0
    assert load_config(tmp_path / "config.txt") == cfg
    assert all(math.isfinite(json.loads(l)["total"]) for l in lines)
