"""Image ingestion and synthetic chest-like phantoms with known landmarks."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image

from peac.geometry import resize_bilinear

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg"}
LUMA = np.array([0.299, 0.587, 0.114])
NUM_CLASSES = 3


# --------------------------------------------------------------------------
# loading

def to_luminance(arr: np.ndarray, mode: str) -> np.ndarray:
    """Decoded PIL array -> float64 intensities in [0, 1]."""
    if mode in ("I;16", "I;16B", "I;16L", "I"):
        x = arr.astype(np.float64) / 65535.0
    else:
        x = arr.astype(np.float64) / 255.0
    if x.ndim == 3:
        x = x[..., :3] @ LUMA
    return np.clip(x, 0.0, 1.0)


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        mode = im.mode
        if mode == "P":
            im = im.convert("RGB")
            mode = "RGB"
        elif mode == "LA":
            im = im.convert("L")
            mode = "L"
        elif mode == "RGBA":
            im = im.convert("RGB")
            mode = "RGB"
        arr = np.asarray(im)
    return to_luminance(arr, mode)


def resize_shorter_side(image: np.ndarray, target: int) -> np.ndarray:
    h, w = image.shape
    if min(h, w) == target:
        return image
    scale = target / min(h, w)
    return resize_bilinear(image, max(1, round(h * scale)), max(1, round(w * scale)))


class ImageDirDataset:
    """Lazily decoded grayscale images from a directory (sorted by file name)."""

    def __init__(self, paths: list[Path], target_side: int | None):
        self.paths = paths
        self.target_side = target_side

    def __len__(self):
        return len(self.paths)

    def __getitem__(self, i: int) -> np.ndarray:
        img = read_image(self.paths[i])
        if self.target_side:
            img = resize_shorter_side(img, self.target_side)
        return img

    @property
    def names(self) -> list[str]:
        return [p.name for p in self.paths]


def load_image_dir(path, target_side: int | None = None) -> ImageDirDataset:
    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(f"image directory not found: {root}")
    candidates = sorted(p for p in root.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    good = []
    for p in candidates:
        try:
            with Image.open(p) as im:
                im.verify()
        except Exception as exc:  # PIL raises a zoo of types for bad files
            log.warning("skipping unreadable image %s: %s", p, exc)
            continue
        good.append(p)
    if not good:
        raise ValueError(f"no readable images in {root}")
    return ImageDirDataset(good, target_side)


def read_labels(path) -> dict[str, int]:
    """``labels.csv`` sidecar (image,class_id) -> {image name: class}."""
    labels_file = Path(path) / "labels.csv"
    if not labels_file.is_file():
        raise FileNotFoundError(f"missing label sidecar {labels_file}")
    with open(labels_file, newline="") as fh:
        return {row["image"]: int(row["class_id"]) for row in csv.DictReader(fh)}


# --------------------------------------------------------------------------
# phantoms

@dataclass(frozen=True)
class Landmark:
    name: str
    row: float  # center, fraction of image height
    col: float
    radius: float  # row radius, fraction of image side
    aspect: float = 1.0  # col radius / row radius
    intensity: float = 0.5


@dataclass(frozen=True)
class PhantomSpec:
    class_id: int
    landmarks: tuple[Landmark, ...]
    background: tuple[float, float] = (0.35, 0.55)  # top-to-bottom gradient
    noise: float = 0.03
    jitter: float = 0.1
    size: int = 96

    def __post_init__(self):
        for lm in self.landmarks:
            if not (0 <= lm.row <= 1 and 0 <= lm.col <= 1):
                raise ValueError(f"landmark {lm.name} outside the unit square")


_BASE = (
    Landmark("left_lung", 0.45, 0.30, 0.30, 0.50, 0.12),
    Landmark("right_lung", 0.45, 0.70, 0.30, 0.50, 0.12),
    Landmark("spine", 0.52, 0.50, 0.42, 0.12, 0.80),
    Landmark("heart", 0.62, 0.56, 0.13, 1.15, 0.62),
    Landmark("diaphragm", 0.90, 0.50, 0.08, 5.0, 0.72),
)


def class_landmarks(class_id: int) -> tuple[Landmark, ...]:
    if class_id not in range(NUM_CLASSES):
        raise ValueError(f"class_id must be in 0..{NUM_CLASSES - 1}, got {class_id}")
    lms = list(_BASE)
    if class_id == 1:
        # enlarged heart
        lms[3] = replace(lms[3], radius=0.17, col=0.58)
    elif class_id == 2:
        lms.append(Landmark("nodule", 0.34, 0.70, 0.05, 1.0, 0.70))
    return tuple(lms)


def phantom_spec(class_id: int, noise: float = 0.03, jitter: float = 0.1, size: int = 96) -> PhantomSpec:
    return PhantomSpec(class_id, class_landmarks(class_id), noise=noise, jitter=jitter, size=size)


def _ellipse_alpha(rr, cc, lm: Landmark, size: int, edge: float = 0.15):
    d = np.sqrt(
        ((rr - lm.row * (size - 1)) / (lm.radius * size)) ** 2
        + ((cc - lm.col * (size - 1)) / (lm.radius * lm.aspect * size)) ** 2
    )
    return np.clip((1.0 - d) / edge, 0.0, 1.0)


def organ_mask(spec: PhantomSpec, rr, cc) -> np.ndarray:
    """Pixels (in template coordinates) covered by any organ."""
    mask = np.zeros(np.broadcast(rr, cc).shape, dtype=bool)
    for lm in spec.landmarks:
        mask |= _ellipse_alpha(rr, cc, lm, spec.size) > 0
    return mask


def _draw_affine(spec: PhantomSpec, rng: np.random.Generator):
    u = rng.uniform(-1.0, 1.0, size=3)
    scale = 1.0 + spec.jitter * u[0]
    shift = spec.jitter * spec.size * u[1:]
    return scale, shift


def generate_phantom(spec: PhantomSpec, seed: int) -> tuple[np.ndarray, dict[str, tuple[float, float]]]:
    """Render one phantom; returns (image in [0,1], landmark name -> (row, col) pixels).

    Draw order is fixed (affine then noise) and independent of the class, so
    two classes rendered from the same seed differ only on organ regions.
    """
    rng = np.random.default_rng(seed)
    scale, shift = _draw_affine(spec, rng)
    noise = rng.standard_normal((spec.size, spec.size))

    size = spec.size
    center = (size - 1) / 2.0
    idx = np.arange(size, dtype=np.float64)
    rr, cc = np.meshgrid(idx, idx, indexing="ij")
    # inverse affine: output pixel -> template coordinate
    tr = center + (rr - center - shift[0]) / scale
    tc = center + (cc - center - shift[1]) / scale

    top, bottom = spec.background
    img = top + (bottom - top) * rr / (size - 1)
    for lm in spec.landmarks:
        a = _ellipse_alpha(tr, tc, lm, size)
        img = img * (1 - a) + lm.intensity * a
    img = np.clip(img + spec.noise * noise, 0.0, 1.0)

    landmarks = {}
    for lm in spec.landmarks:
        r0, c0 = lm.row * (size - 1), lm.col * (size - 1)
        landmarks[lm.name] = (center + scale * (r0 - center) + shift[0], center + scale * (c0 - center) + shift[1])
    return img, landmarks


def phantom_set(count: int, seed: int, noise: float = 0.03, jitter: float = 0.1, size: int = 96):
    """``count`` phantoms with classes cycling 0,1,2; returns (images, labels, landmarks)."""
    seeds = np.random.SeedSequence(seed).generate_state(count)
    images, labels, marks = [], [], []
    for i in range(count):
        cls = i % NUM_CLASSES
        img, lms = generate_phantom(phantom_spec(cls, noise, jitter, size), int(seeds[i]))
        images.append(img)
        labels.append(cls)
        marks.append(lms)
    return images, labels, marks


def write_phantom_dir(out, count: int, seed: int, noise: float = 0.03, jitter: float = 0.1, size: int = 96) -> Path:
    """Materialize phantoms as 8-bit PNGs plus ``labels.csv`` and ``landmarks.csv``."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    images, labels, marks = phantom_set(count, seed, noise, jitter, size)
    with open(out / "labels.csv", "w", newline="") as fl, open(out / "landmarks.csv", "w", newline="") as fm:
        lw, mw = csv.writer(fl, lineterminator="\n"), csv.writer(fm, lineterminator="\n")
        lw.writerow(["image", "class_id"])
        mw.writerow(["image", "landmark", "row", "col"])
        for i, (img, cls, lms) in enumerate(zip(images, labels, marks)):
            name = f"phantom_{i:04d}.png"
            Image.fromarray(np.round(img * 255).astype(np.uint8)).save(out / name)
            lw.writerow([name, cls])
            for lname, (r, c) in lms.items():
                mw.writerow([name, lname, f"{r:.4f}", f"{c:.4f}"])
    return out
