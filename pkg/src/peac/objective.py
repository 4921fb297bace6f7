"""Loss terms: patch order classification, appearance restoration, and
global/local embedding consistency, plus their unweighted total."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from peac.model import l2_normalize

LOSS_NAMES = ("order", "restore", "global_c", "local_c")


class NonFiniteInputError(ValueError):
    pass


def order_loss(order_logits: torch.Tensor, targets) -> torch.Tensor:
    """Per-token cross-entropy summed over tokens, averaged over the batch.

    ``targets[b, j]`` is the original index of the patch placed in slot ``j``.
    """
    if not bool(torch.isfinite(order_logits).all()):
        raise NonFiniteInputError("order logits contain non-finite values")
    targets = torch.as_tensor(np.asarray(targets), dtype=torch.long, device=order_logits.device)
    B, N, C = order_logits.shape
    if targets.shape != (B, N):
        raise ValueError(f"targets shape {tuple(targets.shape)} does not match logits {(B, N)}")
    ce = F.cross_entropy(order_logits.reshape(B * N, C), targets.reshape(B * N), reduction="sum")
    return ce / B


def restore_loss(restored: torch.Tensor, original_patches: torch.Tensor) -> torch.Tensor:
    """Squared L2 error summed over patches and pixels, averaged over the batch."""
    if restored.shape != original_patches.shape:
        raise ValueError(
            f"restored {tuple(restored.shape)} and target {tuple(original_patches.shape)} differ"
        )
    return ((restored - original_patches) ** 2).sum() / restored.shape[0]


def global_pair_term(y_s: torch.Tensor, y_t: torch.Tensor) -> torch.Tensor:
    """||y_s/|y_s| - y_t/|y_t|||^2 per row; equals 2 - 2 cos(y_s, y_t)."""
    return ((l2_normalize(y_s) - l2_normalize(y_t)) ** 2).sum(dim=-1)


def global_consistency_loss(y_s: torch.Tensor, y_t: torch.Tensor) -> torch.Tensor:
    """Batch mean of the per-pair term; the teacher side is treated as a constant."""
    return global_pair_term(y_s, y_t.detach()).mean()


def local_consistency_loss(
    p_s: torch.Tensor,
    p_t: torch.Tensor,
    index_s,
    index_t,
    indicator,
) -> torch.Tensor:
    """(1/B) sum_b I_b * sum_i ||p_s[b, index_s[b][i]] - p_t[b, index_t[b][i]]||^2 on unit vectors.

    ``index_s``/``index_t`` are per-sample index sequences of equal length
    (the grid correspondence); samples may have different overlap sizes.
    """
    B, N, _ = p_s.shape
    if len(index_s) != B or len(index_t) != B:
        raise ValueError("need one correspondence per batch sample")
    ind = torch.as_tensor(np.asarray(indicator, dtype=np.float64), dtype=p_s.dtype, device=p_s.device)
    if ind.shape != (B,):
        raise ValueError(f"indicator must have shape ({B},), got {tuple(ind.shape)}")
    b_idx, s_idx, t_idx = [], [], []
    for b in range(B):
        si = np.asarray(index_s[b], dtype=np.int64)
        ti = np.asarray(index_t[b], dtype=np.int64)
        if si.shape != ti.shape:
            raise ValueError(f"sample {b}: correspondence sides differ in length")
        if si.size and (si.min() < 0 or ti.min() < 0 or si.max() >= N or ti.max() >= N):
            raise IndexError(f"sample {b}: correspondence index out of range [0, {N})")
        b_idx.append(np.full(si.shape, b))
        s_idx.append(si)
        t_idx.append(ti)
    b_idx = torch.from_numpy(np.concatenate(b_idx)).to(p_s.device)
    s_idx = torch.from_numpy(np.concatenate(s_idx)).to(p_s.device)
    t_idx = torch.from_numpy(np.concatenate(t_idx)).to(p_s.device)
    if b_idx.numel() == 0:
        return p_s.sum() * 0.0
    a = l2_normalize(p_s[b_idx, s_idx])
    t = l2_normalize(p_t.detach()[b_idx, t_idx])
    per_pair = ((a - t) ** 2).sum(dim=-1)
    return (per_pair * ind[b_idx]).sum() / B


@dataclass(frozen=True)
class LossToggles:
    order: bool = True
    restore: bool = True
    global_c: bool = True
    local_c: bool = True

    def enabled(self) -> tuple[str, ...]:
        return tuple(n for n in LOSS_NAMES if getattr(self, n))


@dataclass
class LossBundle:
    order: torch.Tensor
    restore: torch.Tensor
    global_c: torch.Tensor
    local_c: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {n: float(getattr(self, n).detach()) for n in (*LOSS_NAMES, "total")}

    def is_finite(self) -> bool:
        return all(np.isfinite(v) for v in self.as_floats().values())


def total_loss(components: dict, toggles: LossToggles = LossToggles(), weights: dict | None = None) -> LossBundle:
    """Weighted sum of the enabled terms; disabled terms are reported as 0."""
    weights = weights or {}
    ref = next((v for v in components.values() if isinstance(v, torch.Tensor)), None)
    zero = ref.new_zeros(()) if ref is not None else torch.zeros((), dtype=torch.float64)
    vals = {}
    for name in LOSS_NAMES:
        v = components.get(name)
        if not getattr(toggles, name) or v is None:
            vals[name] = zero
        else:
            vals[name] = torch.as_tensor(v, dtype=zero.dtype) if not isinstance(v, torch.Tensor) else v
    total = zero
    for name in LOSS_NAMES:
        if getattr(toggles, name):
            total = total + weights.get(name, 1.0) * vals[name]
    return LossBundle(total=total, **vals)
