"""Grid-wise cropping and exact patch correspondence between two crops.

A seed image is resized to ``I'`` with ``n x n`` patches of side ``m``. A
shifted ``(n-1) x (n-1)`` patch window ``I''`` is cut out of it, and two crops
of ``k x k`` patches are taken from ``I''`` aligned to its patch grid. Because
both crops share that grid, their overlapping patches correspond exactly and
no similarity search is needed.

All patch indices are row-major: patch ``(r, c)`` of a crop with ``k``
patches per side has index ``r * k + c``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F


class GridSpecError(ValueError):
    """Raised when (n, m, k) violate a cropping-geometry rule."""


@dataclass(frozen=True)
class GridSpec:
    n: int
    m: int
    k: int

    def __post_init__(self):
        n, m, k = self.n, self.m, self.k
        for name, v in (("n", n), ("m", m), ("k", k)):
            if isinstance(v, bool) or not isinstance(v, (int, np.integer)):
                raise GridSpecError(f"{name} must be an integer, got {v!r}")
        if n < 2:
            raise GridSpecError(f"rule n >= 2 violated: n={n}")
        if m < 1:
            raise GridSpecError(f"rule m >= 1 violated: m={m}")
        if not 1 <= k <= n - 1:
            raise GridSpecError(f"rule 1 <= k <= n-1 violated: k={k}, n={n}")
        side = 2 * k - (n - 1)
        if side <= 0 or 2 * side * side < k * k:
            raise GridSpecError(
                f"minimum overlap rule violated: (2k-(n-1))^2 >= k^2/2 fails for "
                f"n={n}, k={k} ((2*{k}-{n - 1})^2={max(side, 0) ** 2} < {k * k / 2:g}); "
                "crops could overlap by less than 50%"
            )

    @property
    def outer_side(self) -> int:
        """Side of I' in pixels."""
        return self.n * self.m

    @property
    def inner_side(self) -> int:
        """Side of I'' in pixels."""
        return (self.n - 1) * self.m

    @property
    def crop_side(self) -> int:
        return self.k * self.m

    @property
    def num_patches(self) -> int:
        return self.k * self.k

    @property
    def max_offset(self) -> int:
        """Largest legal patch offset of a crop inside I''."""
        return self.n - 1 - self.k

    @property
    def min_overlap_fraction(self) -> float:
        side = 2 * self.k - (self.n - 1)
        return (side / self.k) ** 2


FULL_GRID = (19, 32, 14)
DESK_GRID = (11, 8, 8)


def make_grid_spec(n: int, m: int, k: int) -> GridSpec:
    return GridSpec(n, m, k)


@dataclass(frozen=True)
class CropPairPlan:
    spec: GridSpec
    inner_offset: tuple[int, int]
    offset_a: tuple[int, int]
    offset_b: tuple[int, int]

    @property
    def delta(self) -> tuple[int, int]:
        return (self.offset_a[0] - self.offset_b[0], self.offset_a[1] - self.offset_b[1])

    @property
    def overlap_count(self) -> int:
        k = self.spec.k
        dr, dc = self.delta
        return max(k - abs(dr), 0) * max(k - abs(dc), 0)

    @property
    def overlap_fraction(self) -> float:
        return self.overlap_count / self.spec.num_patches

    def swapped(self) -> "CropPairPlan":
        return CropPairPlan(self.spec, self.inner_offset, self.offset_b, self.offset_a)


def sample_crop_pair(spec: GridSpec, rng: np.random.Generator) -> CropPairPlan:
    hi = spec.max_offset + 1
    inner = rng.integers(0, spec.m, size=2)
    a = rng.integers(0, hi, size=2)
    b = rng.integers(0, hi, size=2)
    return CropPairPlan(
        spec,
        (int(inner[0]), int(inner[1])),
        (int(a[0]), int(a[1])),
        (int(b[0]), int(b[1])),
    )


@dataclass(frozen=True)
class Correspondence:
    """Matched patch indices: ``index_a[i]`` in x sits on the same I'' patch as ``index_b[i]`` in x'."""

    index_a: np.ndarray
    index_b: np.ndarray

    @property
    def z(self) -> int:
        return int(self.index_a.shape[0])

    @property
    def pairs(self) -> list[tuple[int, int]]:
        return list(zip(self.index_a.tolist(), self.index_b.tolist()))

    def swapped(self) -> "Correspondence":
        return Correspondence(self.index_b, self.index_a)


def overlap_correspondence(plan: CropPairPlan) -> Correspondence:
    k = plan.spec.k
    (ar, ac), (br, bc) = plan.offset_a, plan.offset_b
    # absolute I'' rows/cols shared by both crops
    rows = np.arange(max(ar, br), min(ar, br) + k)
    cols = np.arange(max(ac, bc), min(ac, bc) + k)
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    rr, cc = rr.ravel(), cc.ravel()
    index_a = (rr - ar) * k + (cc - ac)
    index_b = (rr - br) * k + (cc - bc)
    return Correspondence(index_a.astype(np.int64), index_b.astype(np.int64))


def patch_coords(index, k: int) -> np.ndarray:
    """Row-major patch index -> (row, col) array of shape (..., 2)."""
    index = np.asarray(index)
    return np.stack([index // k, index % k], axis=-1)


def extract_crops(image: np.ndarray, plan: CropPairPlan) -> tuple[np.ndarray, np.ndarray]:
    spec = plan.spec
    image = np.asarray(image)
    if image.ndim != 2 or image.shape != (spec.inner_side, spec.inner_side):
        raise ValueError(
            f"expected a {spec.inner_side}x{spec.inner_side} image for I'', got shape {image.shape}"
        )
    side, m = spec.crop_side, spec.m

    def cut(offset):
        r, c = offset[0] * m, offset[1] * m
        return image[r : r + side, c : c + side].copy()

    return cut(plan.offset_a), cut(plan.offset_b)


def patchify(image: np.ndarray, m: int) -> np.ndarray:
    """(H, W) -> (H/m * W/m, m*m), patches in row-major order."""
    h, w = image.shape[-2:]
    if h % m or w % m:
        raise ValueError(f"image shape {image.shape} not divisible by patch size {m}")
    lead = image.shape[:-2]
    x = image.reshape(*lead, h // m, m, w // m, m)
    x = np.moveaxis(x, -3, -2)
    return x.reshape(*lead, (h // m) * (w // m), m * m)


def unpatchify(patches: np.ndarray, m: int) -> np.ndarray:
    n = patches.shape[-2]
    g = int(round(np.sqrt(n)))
    if g * g != n:
        raise ValueError(f"{n} patches do not form a square grid")
    lead = patches.shape[:-2]
    x = patches.reshape(*lead, g, g, m, m)
    x = np.moveaxis(x, -2, -3)
    return x.reshape(*lead, g * m, g * m)


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with half-pixel centers (align_corners=False), no antialiasing."""
    t = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float64))[None, None]
    out = F.interpolate(t, size=(out_h, out_w), mode="bilinear", align_corners=False)
    return out[0, 0].numpy()


def _random_area_box(h, w, rng, scale, ratio):
    area = h * w
    log_ratio = np.log(ratio)
    for _ in range(10):
        target = area * rng.uniform(*scale)
        aspect = float(np.exp(rng.uniform(*log_ratio)))
        bw = int(round(np.sqrt(target * aspect)))
        bh = int(round(np.sqrt(target / aspect)))
        if 0 < bw <= w and 0 < bh <= h:
            top = int(rng.integers(0, h - bh + 1))
            left = int(rng.integers(0, w - bw + 1))
            return top, left, bh, bw
    # fall back to the largest centered box within the aspect bounds
    in_ratio = w / h
    if in_ratio < min(ratio):
        bw, bh = w, int(round(w / min(ratio)))
    elif in_ratio > max(ratio):
        bh, bw = h, int(round(h * max(ratio)))
    else:
        bw, bh = w, h
    return (h - bh) // 2, (w - bw) // 2, bh, bw


def prepare_seed_image(
    raw_image: np.ndarray,
    spec: GridSpec,
    rng: np.random.Generator,
    inner_offset: tuple[int, int] | None = None,
    scale: tuple[float, float] = (0.5, 1.0),
    ratio: tuple[float, float] = (3 / 4, 4 / 3),
) -> np.ndarray:
    """Random-area seed crop of ``raw_image`` -> I' (n*m square) -> I'' at ``inner_offset``.

    ``inner_offset`` is in pixels, each coordinate in ``[0, m)``; it is drawn
    from ``rng`` when omitted.
    """
    raw = np.asarray(raw_image, dtype=np.float64)
    if raw.ndim != 2 or min(raw.shape) < 32:
        raise ValueError(f"raw image must be 2-D and at least 32x32, got shape {raw.shape}")
    top, left, bh, bw = _random_area_box(*raw.shape, rng, scale, ratio)
    seed = raw[top : top + bh, left : left + bw]
    outer = resize_bilinear(seed, spec.outer_side, spec.outer_side)
    if inner_offset is None:
        off = rng.integers(0, spec.m, size=2)
        inner_offset = (int(off[0]), int(off[1]))
    r, c = inner_offset
    if not (0 <= r < spec.m and 0 <= c < spec.m):
        raise ValueError(f"inner_offset {inner_offset} outside [0, {spec.m})^2")
    side = spec.inner_side
    return outer[r : r + side, c : c + side].copy()
