"""Frozen-encoder linear probe."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
from sklearn.linear_model import LogisticRegression
from sklearn.model_selection import train_test_split
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler

from peac.geometry import resize_bilinear
from peac.model import PEACEncoder


@dataclass
class ProbeResult:
    accuracy: float
    per_class: dict[int, float]
    n_eval: int
    checkpoint: str = ""

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_class"] = {str(k): v for k, v in self.per_class.items()}
        return d


@torch.no_grad()
def extract_features(model: PEACEncoder, images, batch_size: int = 64) -> np.ndarray:
    """Mean-pooled last-layer features, one row per image (images resized to the encoder input)."""
    side = model.config.input_side
    p = next(model.parameters())
    feats = []
    for start in range(0, len(images), batch_size):
        chunk = []
        for im in images[start : start + batch_size]:
            im = np.asarray(im, dtype=np.float64)
            if im.shape != (side, side):
                im = resize_bilinear(im, side, side)
            chunk.append(im)
        x = torch.as_tensor(np.stack(chunk), dtype=p.dtype, device=p.device)
        feats.append(model(x, expanders=False).pooled.double().cpu().numpy())
    return np.concatenate(feats)


def linear_probe(features, labels, seed: int = 0, test_size: float = 0.2, checkpoint: str = "") -> ProbeResult:
    """Multinomial logistic regression on a stratified 80/20 split.

    Identical (feature, label) rows are grouped before splitting and
    weighted by 1/multiplicity, so duplicating the dataset leaves the
    problem, and therefore the accuracy, unchanged.
    """
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    classes = np.unique(y)
    if classes.size < 2:
        raise ValueError("linear probe needs at least two classes")
    _, group, counts = np.unique(np.column_stack([X, y]), axis=0, return_inverse=True, return_counts=True)
    group = group.ravel()
    n_groups = counts.size
    group_label = np.empty(n_groups, dtype=y.dtype)
    group_label[group] = y
    g_train, g_test = train_test_split(
        np.arange(n_groups), test_size=test_size, random_state=seed, stratify=group_label
    )
    train = np.isin(group, g_train)
    test = ~train
    weight = 1.0 / counts[group]

    clf = make_pipeline(StandardScaler(), LogisticRegression(max_iter=5000, C=1.0))
    clf.fit(X[train], y[train], logisticregression__sample_weight=weight[train])
    pred = clf.predict(X[test])
    correct = pred == y[test]
    per_class = {int(c): float(correct[y[test] == c].mean()) for c in classes if (y[test] == c).any()}
    return ProbeResult(float(correct.mean()), per_class, int(test.sum()), checkpoint)
