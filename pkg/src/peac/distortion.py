"""Patch order distortion (OD) and patch appearance distortion (AD).

Only the student input is distorted. The record keeps the pre-distortion
crop as the restoration target and the permutation as the order target.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from peac.geometry import patchify, unpatchify

AD_OPS = ("local_shuffle", "bezier_remap", "inpaint", "outpaint")


@dataclass(frozen=True)
class DistortionConfig:
    p_od: float = 0.5
    p_ad: float = 0.5


@dataclass
class DistortionRecord:
    permutation: np.ndarray
    od_applied: bool
    ad_applied: bool
    original_crop: np.ndarray
    ad_ops: tuple[str, ...] = field(default=())

    @property
    def indicator(self) -> int:
        # local consistency is skipped for order-distorted crops only
        return 0 if self.od_applied else 1


def inverse_permutation(perm: np.ndarray) -> np.ndarray:
    inv = np.empty_like(perm)
    inv[perm] = np.arange(perm.size, dtype=perm.dtype)
    return inv


def shuffle_patches(crop: np.ndarray, perm: np.ndarray, m: int) -> np.ndarray:
    """Slot ``j`` of the result holds original patch ``perm[j]``."""
    patches = patchify(crop, m)
    return unpatchify(patches[perm], m)


def bezier_curve(points, n_samples: int = 1000) -> tuple[np.ndarray, np.ndarray]:
    """Cubic Bezier through 4 control points, returned as (x, y) samples."""
    pts = np.asarray(points, dtype=np.float64)
    t = np.linspace(0.0, 1.0, n_samples)[:, None]
    coef = np.hstack([(1 - t) ** 3, 3 * t * (1 - t) ** 2, 3 * t**2 * (1 - t), t**3])
    xy = coef @ pts
    return xy[:, 0], xy[:, 1]


def bezier_remap(image: np.ndarray, points) -> np.ndarray:
    xs, ys = bezier_curve(points)
    order = np.argsort(xs, kind="stable")
    out = np.interp(image, xs[order], ys[order])
    return np.clip(out, 0.0, 1.0)


def random_bezier_points(rng: np.random.Generator):
    p1 = rng.random(2)
    p2 = rng.random(2)
    if rng.random() < 0.5:
        # decreasing curve: intensity inversion
        return [(0.0, 1.0), tuple(p1), tuple(p2), (1.0, 0.0)]
    return [(0.0, 0.0), tuple(p1), tuple(p2), (1.0, 1.0)]


def local_pixel_shuffle(
    image: np.ndarray, rng: np.random.Generator, max_window: int, n_blocks: int | None = None
) -> np.ndarray:
    """Shuffle pixels inside small random windows of side <= ``max_window``."""
    out = image.copy()
    h, w = image.shape
    max_window = max(1, min(max_window, h, w))
    if n_blocks is None:
        n_blocks = max(1, (h * w) // (2 * max_window * max_window))
    for _ in range(n_blocks):
        bh = int(rng.integers(1, max_window + 1))
        bw = int(rng.integers(1, max_window + 1))
        r = int(rng.integers(0, h - bh + 1))
        c = int(rng.integers(0, w - bw + 1))
        block = out[r : r + bh, c : c + bw].ravel()
        out[r : r + bh, c : c + bw] = rng.permutation(block).reshape(bh, bw)
    return out


def _random_boxes(shape, rng, count, lo_frac, hi_frac, margin_frac=0.0):
    h, w = shape
    boxes = []
    for _ in range(count):
        bh = int(rng.integers(max(1, int(h * lo_frac)), max(2, int(h * hi_frac)) + 1))
        bw = int(rng.integers(max(1, int(w * lo_frac)), max(2, int(w * hi_frac)) + 1))
        mr, mc = int(h * margin_frac), int(w * margin_frac)
        r = int(rng.integers(mr, max(mr, h - bh - mr) + 1))
        c = int(rng.integers(mc, max(mc, w - bw - mc) + 1))
        boxes.append((r, c, min(bh, h - r), min(bw, w - c)))
    return boxes


def inpaint(image: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Fill 1-3 interior rectangles with uniform noise; returns (image, painted mask)."""
    mask = np.zeros(image.shape, dtype=bool)
    for r, c, bh, bw in _random_boxes(image.shape, rng, int(rng.integers(1, 4)), 1 / 8, 1 / 3, 1 / 8):
        mask[r : r + bh, c : c + bw] = True
    out = image.copy()
    out[mask] = rng.random(int(mask.sum()))
    return out, mask


def outpaint(image: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Replace everything but 1-3 random rectangles with noise; returns (image, painted mask)."""
    keep = np.zeros(image.shape, dtype=bool)
    for r, c, bh, bw in _random_boxes(image.shape, rng, int(rng.integers(1, 4)), 1 / 3, 2 / 3):
        keep[r : r + bh, c : c + bw] = True
    out = rng.random(image.shape)
    out[keep] = image[keep]
    return out, ~keep


def apply_appearance_distortion(
    crop: np.ndarray, rng: np.random.Generator, m: int = 8, op: str | None = None
) -> tuple[np.ndarray, str]:
    """One appearance transform, chosen uniformly unless ``op`` is given."""
    crop = np.asarray(crop, dtype=np.float64)
    if op is None:
        op = AD_OPS[int(rng.integers(len(AD_OPS)))]
    if op == "local_shuffle":
        out = local_pixel_shuffle(crop, rng, max(1, m // 2))
    elif op == "bezier_remap":
        out = bezier_remap(crop, random_bezier_points(rng))
    elif op == "inpaint":
        out, _ = inpaint(crop, rng)
    elif op == "outpaint":
        out, _ = outpaint(crop, rng)
    else:
        raise ValueError(f"unknown appearance op {op!r}")
    return np.clip(out, 0.0, 1.0), op


def maybe_distort(
    crop: np.ndarray,
    rng: np.random.Generator,
    m: int,
    config: DistortionConfig = DistortionConfig(),
) -> tuple[np.ndarray, DistortionRecord]:
    crop = np.asarray(crop, dtype=np.float64)
    if crop.shape[0] % m or crop.shape[1] % m:
        raise ValueError(f"crop shape {crop.shape} not divisible by patch size {m}")
    n_patches = (crop.shape[0] // m) * (crop.shape[1] // m)
    # both coins are always drawn so the stream does not depend on the probabilities
    od = bool(rng.random() < config.p_od)
    ad = bool(rng.random() < config.p_ad)

    out = crop.copy()
    ops: tuple[str, ...] = ()
    if ad:
        out, op = apply_appearance_distortion(out, rng, m)
        ops = (op,)
    perm = np.arange(n_patches)
    if od:
        perm = rng.permutation(n_patches)
        out = shuffle_patches(out, perm, m)
    record = DistortionRecord(perm, od, ad, crop.copy(), ops)
    return out, record
