"""Post-training inspection: dense embeddings, best-buddies matching,
top-pair selection, zero-shot co-segmentation and matching stability."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from sklearn.cluster import KMeans

from peac.geometry import CropPairPlan, extract_crops, overlap_correspondence, patch_coords, sample_crop_pair
from peac.model import PEACEncoder

KMEANS_SEED = 0
EMBED_MAGIC = b"PEACEMB1"


@dataclass
class DenseEmbeddingMap:
    grid: np.ndarray  # (G, G, D)
    window: int
    stride: int
    image_id: str = ""

    @property
    def G(self) -> int:
        return self.grid.shape[0]

    def cell_centers(self) -> np.ndarray:
        """(G*G, 2) pixel centers of each cell's window, row-major."""
        idx = np.arange(self.G) * self.stride + (self.window - 1) / 2.0
        rr, cc = np.meshgrid(idx, idx, indexing="ij")
        return np.stack([rr.ravel(), cc.ravel()], axis=1)

    def flat(self) -> np.ndarray:
        return self.grid.reshape(-1, self.grid.shape[-1])


def dense_grid_size(side: int, window: int, stride: int) -> int:
    return (side - window) // stride + 1


@torch.no_grad()
def dense_embeddings(
    model: PEACEncoder, image, window: int | None = None, stride: int = 4, which: str = "features", image_id: str = ""
) -> DenseEmbeddingMap:
    """Embed every ``window``-sized cell at ``stride`` spacing with shifted full-grid passes.

    For each of the (window/stride)^2 shifts the image is shifted up/left,
    zero-padded back to full size, encoded, and the tokens whose windows lie
    inside the original image are scattered into the dense map.
    """
    window = window or model.config.patch_size
    if window != model.config.patch_size:
        raise ValueError(f"window {window} must equal the encoder patch size {model.config.patch_size}")
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2 or img.shape[0] != img.shape[1]:
        raise ValueError(f"expected a square 2-D image, got shape {img.shape}")
    side = img.shape[0]
    if side < window or window % stride:
        raise ValueError(f"incompatible sizes: side={side}, window={window}, stride={stride}")
    G = dense_grid_size(side, window, stride)
    g = side // window
    per = window // stride
    shifted = []
    for a in range(per):
        for b in range(per):
            canvas = np.zeros((g * window, g * window))
            sub = img[a * stride : a * stride + g * window, b * stride : b * stride + g * window]
            canvas[: sub.shape[0], : sub.shape[1]] = sub
            shifted.append(canvas)
    p = next(model.parameters())
    out = model(torch.as_tensor(np.stack(shifted), dtype=p.dtype, device=p.device), heads=False, expanders=(which == "local"))
    tokens = out.patch_features if which == "features" else out.local_embeds
    tokens = tokens.reshape(per * per, g, g, -1).cpu().numpy()

    grid = np.zeros((G, G, tokens.shape[-1]), dtype=tokens.dtype)
    filled = np.zeros((G, G), dtype=bool)
    for s, (a, b) in enumerate((a, b) for a in range(per) for b in range(per)):
        for i in range(g):
            r = a + i * per
            if r >= G:
                break
            for j in range(g):
                c = b + j * per
                if c >= G:
                    break
                grid[r, c] = tokens[s, i, j]
                filled[r, c] = True
    assert filled.all()
    return DenseEmbeddingMap(grid, window, stride, image_id)


@dataclass
class BuddyPairs:
    index_a: np.ndarray  # flat cell index in map A
    index_b: np.ndarray
    similarity: np.ndarray
    coords_a: np.ndarray  # (P, 2) pixel centers
    coords_b: np.ndarray
    features: np.ndarray  # (P, 2D) concatenated unit embeddings

    def __len__(self):
        return int(self.index_a.shape[0])

    def subset(self, sel) -> "BuddyPairs":
        return BuddyPairs(*(getattr(self, f)[sel] for f in
                            ("index_a", "index_b", "similarity", "coords_a", "coords_b", "features")))


def _unit(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.maximum(n, 1e-12)


def mutual_nearest(a: np.ndarray, b: np.ndarray):
    """Mutual argmax of cosine similarity; ties go to the lowest index."""
    ua, ub = _unit(a), _unit(b)
    sim = ua @ ub.T
    ab = sim.argmax(axis=1)
    ba = sim.argmax(axis=0)
    i = np.nonzero(ba[ab] == np.arange(a.shape[0]))[0]
    j = ab[i]
    return i, j, sim[i, j], ua, ub


def best_buddies(map_a: DenseEmbeddingMap, map_b: DenseEmbeddingMap) -> BuddyPairs:
    fa, fb = map_a.flat(), map_b.flat()
    if fa.shape[1] != fb.shape[1]:
        raise ValueError(f"embedding widths differ: {fa.shape[1]} vs {fb.shape[1]}")
    i, j, s, ua, ub = mutual_nearest(fa, fb)
    return BuddyPairs(
        i, j, s,
        map_a.cell_centers()[i], map_b.cell_centers()[j],
        np.concatenate([ua[i], ub[j]], axis=1),
    )


def top_pairs(bbps: BuddyPairs, k: int = 10, seed: int = KMEANS_SEED) -> BuddyPairs:
    """One representative (most similar) pair per k-means cluster of pair embeddings."""
    if len(bbps) == 0:
        raise ValueError("top_pairs needs at least one pair")
    if len(bbps) <= k:
        return bbps.subset(np.argsort(-bbps.similarity, kind="stable"))
    labels = KMeans(n_clusters=k, init="k-means++", n_init=10, random_state=seed).fit_predict(bbps.features)
    chosen = []
    for c in range(k):
        members = np.nonzero(labels == c)[0]
        if members.size:
            chosen.append(members[np.argmax(bbps.similarity[members])])
    chosen = np.array(chosen)
    return bbps.subset(chosen[np.argsort(-bbps.similarity[chosen], kind="stable")])


def cells_to_mask(labels: np.ndarray, side: int, window: int, stride: int) -> np.ndarray:
    """Nearest-cell-center upsampling of a (G, G) label grid to (side, side) pixels."""
    G = labels.shape[0]
    pix = np.arange(side)
    cell = np.clip(np.rint((pix - (window - 1) / 2.0) / stride), 0, G - 1).astype(int)
    return labels[np.ix_(cell, cell)]


def cosegment(
    images, model: PEACEncoder, k: int, stride: int = 4, seed: int = KMEANS_SEED, which: str = "features"
) -> list[np.ndarray]:
    """Cluster pooled dense embeddings; keep clusters present in every image, 0 = background.

    Kept clusters are relabelled 1..K' in order of their k-means index.
    """
    if k < 2:
        raise ValueError(f"cosegment needs k >= 2, got {k}")
    if len(images) < 2:
        raise ValueError("cosegment needs at least two images")
    maps = [dense_embeddings(model, im, stride=stride, which=which) for im in images]
    feats = _unit(np.concatenate([m.flat() for m in maps]))
    labels = KMeans(n_clusters=k, init="k-means++", n_init=10, random_state=seed).fit_predict(feats)
    G = maps[0].G
    per_image = labels.reshape(len(maps), G, G)
    common = set(range(k))
    for lab in per_image:
        common &= set(np.unique(lab).tolist())
    relabel = np.zeros(k, dtype=np.uint8)
    for new, c in enumerate(sorted(common), start=1):
        relabel[c] = new
    side = np.asarray(images[0]).shape[0]
    return [cells_to_mask(relabel[lab], side, maps[0].window, stride) for lab in per_image]


# --------------------------------------------------------------------------
# grid vs similarity matching

@dataclass
class StabilityReport:
    checkpoints: list[str]
    grid_error: list[float]  # mean positional error (patch units) per checkpoint
    similarity_error: list[float]
    degenerate: list[int] = field(default_factory=list)  # similarity matchings with tied argmax
    grid_pair_errors_max: list[float] = field(default_factory=list)

    @property
    def similarity_error_variance(self) -> float:
        return float(np.var(self.similarity_error))

    def to_dict(self) -> dict:
        return {
            "checkpoints": self.checkpoints,
            "grid_error": self.grid_error,
            "grid_pair_errors_max": self.grid_pair_errors_max,
            "similarity_error": self.similarity_error,
            "similarity_error_variance": self.similarity_error_variance,
            "degenerate": self.degenerate,
        }


def absolute_patch(index, offset, k: int) -> np.ndarray:
    return patch_coords(index, k) + np.asarray(offset)


def grid_match_error(plan: CropPairPlan) -> np.ndarray:
    corr = overlap_correspondence(plan)
    k = plan.spec.k
    pa = absolute_patch(corr.index_a, plan.offset_a, k)
    pb = absolute_patch(corr.index_b, plan.offset_b, k)
    return np.linalg.norm(pa - pb, axis=1)


def similarity_match_error(emb_a: np.ndarray, emb_b: np.ndarray, plan: CropPairPlan) -> tuple[np.ndarray, bool]:
    """Mutual-NN matching of the overlap patches by cosine similarity.

    Returns per-match positional errors in patch units and whether any
    argmax was tied (a degenerate matching).
    """
    corr = overlap_correspondence(plan)
    k = plan.spec.k
    a, b = emb_a[corr.index_a], emb_b[corr.index_b]
    i, j, _, ua, ub = mutual_nearest(a, b)
    sim = ua @ ub.T
    tied = bool(((sim == sim.max(axis=1, keepdims=True)).sum(axis=1) > 1).any())
    pa = absolute_patch(corr.index_a[i], plan.offset_a, k)
    pb = absolute_patch(corr.index_b[j], plan.offset_b, k)
    return np.linalg.norm(pa - pb, axis=1), tied


@torch.no_grad()
def matching_stability(models: dict, inner_images, spec, n_plans: int = 32, seed: int = 0) -> StabilityReport:
    """Compare grid and similarity matching across checkpoints on a shared plan stream.

    ``models`` maps checkpoint name -> encoder; ``inner_images`` are I'' images.
    """
    if len(models) < 2:
        raise ValueError("matching_stability needs at least two checkpoints")
    rng = np.random.default_rng(seed)
    plans = [sample_crop_pair(spec, rng) for _ in range(n_plans)]
    which = [int(rng.integers(len(inner_images))) for _ in range(n_plans)]
    crops = [extract_crops(inner_images[w], p) for p, w in zip(plans, which)]
    xa = np.stack([c[0] for c in crops])
    xb = np.stack([c[1] for c in crops])

    report = StabilityReport(list(models), [], [], [], [])
    for name, model in models.items():
        p = next(model.parameters())
        ea = model(torch.as_tensor(xa, dtype=p.dtype), expanders=True).local_embeds.numpy()
        eb = model(torch.as_tensor(xb, dtype=p.dtype), expanders=True).local_embeds.numpy()
        grid_err, sim_err, degenerate = [], [], 0
        for t, plan in enumerate(plans):
            grid_err.append(grid_match_error(plan))
            err, tied = similarity_match_error(ea[t], eb[t], plan)
            sim_err.append(err)
            degenerate += int(tied)
        g = np.concatenate(grid_err)
        report.grid_error.append(float(g.mean()))
        report.grid_pair_errors_max.append(float(g.max()))
        report.similarity_error.append(float(np.concatenate(sim_err).mean()))
        report.degenerate.append(degenerate)
    return report


# --------------------------------------------------------------------------
# exports

def write_embeddings(emb: DenseEmbeddingMap, path):
    """Text JSON header line after a magic tag, then little-endian float32 G*G*D."""
    header = {"G": emb.G, "D": int(emb.grid.shape[-1]), "window": emb.window, "stride": emb.stride,
              "image_id": emb.image_id, "dtype": "<f4"}
    with open(path, "wb") as fh:
        fh.write(EMBED_MAGIC + b" " + json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(np.ascontiguousarray(emb.grid, dtype="<f4").tobytes())


def read_embeddings(path) -> DenseEmbeddingMap:
    with open(path, "rb") as fh:
        line = fh.readline()
        if not line.startswith(EMBED_MAGIC + b" "):
            raise ValueError(f"{path} is not a PEAC embedding file")
        header = json.loads(line[len(EMBED_MAGIC) + 1 :])
        data = np.frombuffer(fh.read(), dtype=header["dtype"])
    G, D = header["G"], header["D"]
    if data.size != G * G * D:
        raise ValueError(f"{path}: expected {G * G * D} values, found {data.size}")
    return DenseEmbeddingMap(data.reshape(G, G, D).copy(), header["window"], header["stride"], header["image_id"])


def write_pairs(pairs: BuddyPairs, path, header_lines=()):
    lines = [f"# {h}" for h in header_lines]
    lines.append("row_a\tcol_a\trow_b\tcol_b\tsimilarity")
    for (ra, ca), (rb, cb), s in zip(pairs.coords_a, pairs.coords_b, pairs.similarity):
        lines.append(f"{ra:.1f}\t{ca:.1f}\t{rb:.1f}\t{cb:.1f}\t{s:.6f}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_pairs(path) -> np.ndarray:
    rows = [ln for ln in Path(path).read_text().splitlines() if ln and not ln.startswith("#")]
    return np.array([[float(v) for v in ln.split("\t")] for ln in rows[1:]]).reshape(-1, 5)
