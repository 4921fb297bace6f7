import numpy as np
import pytest
import torch

from peac.distortion import DistortionConfig
from peac.geometry import GridSpec
from peac.model import EncoderConfig, StudentTeacher
from peac.pretrain import prepare_batch

# 16 tokens of 2x2 pixels; offsets in {0, 1} so crops can differ
TINY_GRID = GridSpec(6, 2, 4)


def tiny_model(depth=2, dim=16, heads=2, seed=0, dtype=torch.float64, use_pos_embed=True):
    torch.manual_seed(seed)
    cfg = EncoderConfig(patch_size=TINY_GRID.m, grid=TINY_GRID.k, dim=dim, depth=depth, heads=heads,
                        mlp_ratio=2.0, use_pos_embed=use_pos_embed)
    return StudentTeacher(cfg).to(dtype)


def tiny_batch(batch_size=3, seed=0, p_od=0.5, p_ad=0.5):
    rng = np.random.default_rng(seed)
    raw = [rng.random((40, 40)) for _ in range(batch_size)]
    return prepare_batch(raw, TINY_GRID, np.random.default_rng(seed + 1), np.random.default_rng(seed + 2),
                         DistortionConfig(p_od, p_ad))


@pytest.fixture
def st_pair():
    return tiny_model()


@pytest.fixture
def batch():
    return tiny_batch()


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
