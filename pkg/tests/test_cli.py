import json

import numpy as np
import pytest
from PIL import Image

from peac.analysis import read_embeddings, read_pairs
from peac.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, run

SMALL_CFG = """\
# desk geometry, shrunken encoder
grid_n = 11
grid_m = 8
grid_k = 8
dim = 16
depth = 1
heads = 2
batch_size = 8
epochs = 2
warmup_epochs = 1
grad_clip = 1.0
checkpoint_every = 1
"""


def _tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run(["phantoms", "--out", str(root / "data"), "--count", "16", "--seed", "1"]) == EXIT_OK
    (root / "small.cfg").write_text(SMALL_CFG)
    code = run(["pretrain", "--config", str(root / "small.cfg"), "--data", str(root / "data"), "--out", str(root / "run")])
    assert code == EXIT_OK
    return root


def test_phantoms_twice_byte_identical(tmp_path):
    for d in ("a", "b"):
        assert run(["phantoms", "--out", str(tmp_path / d), "--count", "64", "--seed", "7"]) == EXIT_OK
    a, b = _tree(tmp_path / "a"), _tree(tmp_path / "b")
    assert len(a) == 64 + 2 and a == b


def test_pretrain_writes_checkpoints(trained):
    names = sorted(p.name for p in (trained / "run").glob("ckpt_*.npz"))
    assert names == ["ckpt_000000.npz", "ckpt_000002.npz", "ckpt_000004.npz"]
    log = (trained / "run" / "train_log.jsonl").read_text().splitlines()
    assert len(log) == 4


def test_pretrain_invalid_grid_names_the_rule(tmp_path, capsys):
    (tmp_path / "bad.cfg").write_text("grid_n = 11\ngrid_m = 8\ngrid_k = 5\n")
    run(["phantoms", "--out", str(tmp_path / "d"), "--count", "3"])
    code = run(["pretrain", "--config", str(tmp_path / "bad.cfg"), "--data", str(tmp_path / "d"), "--out", str(tmp_path / "o")])
    assert code == EXIT_USAGE
    assert "minimum overlap rule" in capsys.readouterr().err
    assert not (tmp_path / "o").exists()


def test_match_image_with_itself_has_zero_offset(trained, tmp_path):
    img = str(trained / "data" / "phantom_0000.png")
    out = tmp_path / "pairs.tsv"
    code = run(["match", "--ckpt", str(trained / "run" / "ckpt_000004.npz"), "--image-a", img, "--image-b", img, "--out", str(out)])
    assert code == EXIT_OK
    rows = read_pairs(out)
    assert len(rows) == 10
    np.testing.assert_array_equal(rows[:, :2], rows[:, 2:4])
    assert "seed=" in out.read_text().splitlines()[0]


def test_coseg_probe_stability_export(trained, tmp_path, capsys):
    ckpt = str(trained / "run" / "ckpt_000004.npz")
    data = str(trained / "data")
    assert run(["coseg", "--ckpt", ckpt, "--images", data, "--k", "3", "--out", str(tmp_path / "m")]) == EXIT_OK
    masks = sorted((tmp_path / "m").glob("*_mask.png"))
    assert len(masks) == 16 and np.asarray(Image.open(masks[0])).shape == (64, 64)
    capsys.readouterr()

    assert run(["probe", "--ckpt", ckpt, "--data", data]) == EXIT_OK
    res = json.loads(capsys.readouterr().out)
    assert 0 <= res["accuracy"] <= 1 and res["n_eval"] > 0

    assert run(["stability", "--ckpts", str(trained / "run"), "--plans", "4"]) == EXIT_OK
    rep = json.loads(capsys.readouterr().out)
    assert rep["grid_error"] == [0.0, 0.0, 0.0]

    emb = tmp_path / "e.bin"
    assert run(["export-embeddings", "--ckpt", ckpt, "--image", data + "/phantom_0001.png", "--out", str(emb)]) == EXIT_OK
    assert read_embeddings(emb).grid.shape == (15, 15, 16)


def test_data_root_environment_default(trained, tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("PEAC_DATA_ROOT", str(trained / "data"))
    assert run(["probe", "--ckpt", str(trained / "run" / "ckpt_000000.npz")]) == EXIT_OK
    assert "accuracy" in capsys.readouterr().out


@pytest.mark.parametrize(
    "argv, code",
    [
        ([], EXIT_USAGE),
        (["bogus"], EXIT_USAGE),
        (["phantoms", "--out", "x", "--count", "0"], EXIT_USAGE),
        (["phantoms", "--count", "three", "--out", "x"], EXIT_USAGE),
        (["probe", "--ckpt", "missing.npz", "--data", "/nonexistent"], EXIT_DATA),
        (["match", "--ckpt", "missing.npz", "--image-a", "a", "--image-b", "b", "--out", "o"], EXIT_DATA),
        (["--help"], EXIT_OK),
    ],
)
def test_exit_codes(argv, code, monkeypatch, capsys):
    monkeypatch.delenv("PEAC_DATA_ROOT", raising=False)
    assert run(argv) == code
    if code != EXIT_OK:
        assert capsys.readouterr().err.strip()


def test_bad_config_key_is_usage_error(trained, tmp_path, capsys):
    (tmp_path / "c.cfg").write_text("learning_rate = 0.1\n")
    code = run(["pretrain", "--config", str(tmp_path / "c.cfg"), "--data", str(trained / "data"), "--out", str(tmp_path / "o")])
    assert code == EXIT_USAGE and "learning_rate" in capsys.readouterr().err


def test_corrupt_checkpoint_is_data_error(trained, tmp_path):
    bad = tmp_path / "ckpt.npz"
    bad.write_bytes(b"junk")
    img = str(trained / "data" / "phantom_0000.png")
    assert run(["match", "--ckpt", str(bad), "--image-a", img, "--image-b", img, "--out", str(tmp_path / "p")]) == EXIT_DATA
