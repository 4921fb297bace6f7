"""ViT-style encoder with order/restoration heads, expanders, and the EMA teacher."""
from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

NORM_EPS = 1e-12


@dataclass(frozen=True)
class EncoderConfig:
    patch_size: int = 8
    grid: int = 8  # tokens per side, N = grid**2
    dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 2.0
    embed_dim: int | None = None  # expander output width H; defaults to dim
    use_pos_embed: bool = True

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"dim={self.dim} not divisible by heads={self.heads}")

    @property
    def num_tokens(self) -> int:
        return self.grid * self.grid

    @property
    def input_side(self) -> int:
        return self.grid * self.patch_size

    @property
    def out_dim(self) -> int:
        return self.embed_dim or self.dim

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EncoderOutput:
    patch_features: torch.Tensor  # (B, N, D)
    pooled: torch.Tensor  # (B, D)
    global_embed: torch.Tensor | None = None  # (B, H)
    local_embeds: torch.Tensor | None = None  # (B, N, H)
    order_logits: torch.Tensor | None = None  # (B, N, N)
    restored: torch.Tensor | None = None  # (B, N, m*m)


def l2_normalize(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """Unit-norm along ``dim``; an exactly-zero vector is an error rather than NaN."""
    norm = x.norm(dim=dim, keepdim=True)
    if bool((norm == 0).any()):
        raise ValueError("cannot L2-normalize a zero vector")
    return x / norm.clamp_min(NORM_EPS)


class Attention(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        B, N, C = x.shape
        qkv = self.qkv(x).reshape(B, N, 3, self.heads, C // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1)) * self.scale
        attn = attn.softmax(dim=-1)
        x = (attn @ v).transpose(1, 2).reshape(B, N, C)
        return self.proj(x)


class Block(nn.Module):
    def __init__(self, dim, heads, mlp_ratio):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


def expander(dim, hidden, out):
    """3-layer MLP used before the consistency losses."""
    return nn.Sequential(
        nn.Linear(dim, hidden),
        nn.GELU(),
        nn.Linear(hidden, hidden),
        nn.GELU(),
        nn.Linear(hidden, out),
    )


class PEACEncoder(nn.Module):
    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        m, D, N = config.patch_size, config.dim, config.num_tokens
        self.patch_embed = nn.Linear(m * m, D)
        self.pos_embed = nn.Parameter(torch.zeros(1, N, D))
        self.blocks = nn.ModuleList(
            [Block(D, config.heads, config.mlp_ratio) for _ in range(config.depth)]
        )
        self.norm = nn.LayerNorm(D)
        self.order_head = nn.Linear(D, N)
        self.restore_head = nn.Linear(D, m * m)
        self.global_expander = expander(D, 2 * D, config.out_dim)
        self.local_expander = expander(D, 2 * D, config.out_dim)
        self._init_weights()

    def _init_weights(self):
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        for mod in self.modules():
            if isinstance(mod, nn.Linear):
                nn.init.xavier_uniform_(mod.weight)
                nn.init.zeros_(mod.bias)
            elif isinstance(mod, nn.LayerNorm):
                nn.init.ones_(mod.weight)
                nn.init.zeros_(mod.bias)

    def tokens(self, images: torch.Tensor) -> tuple[torch.Tensor, int]:
        """(B, H, W) or (B, 1, H, W) pixels -> (B, N, m*m) row-major patches."""
        if images.dim() == 4:
            if images.shape[1] != 1:
                raise ValueError(f"expected single-channel images, got shape {tuple(images.shape)}")
            images = images[:, 0]
        if images.dim() != 3:
            raise ValueError(f"expected (B, H, W) images, got shape {tuple(images.shape)}")
        m = self.config.patch_size
        B, H, W = images.shape
        if H != W or H % m:
            raise ValueError(f"image side {H}x{W} must be square and divisible by patch size {m}")
        g = H // m
        x = images.reshape(B, g, m, g, m).permute(0, 1, 3, 2, 4).reshape(B, g * g, m * m)
        return x, g

    def pos_embed_for(self, g: int) -> torch.Tensor:
        k = self.config.grid
        if g == k:
            return self.pos_embed
        pe = self.pos_embed.reshape(1, k, k, -1).permute(0, 3, 1, 2)
        pe = F.interpolate(pe, size=(g, g), mode="bicubic", align_corners=False)
        return pe.permute(0, 2, 3, 1).reshape(1, g * g, -1)

    def features(self, images: torch.Tensor) -> torch.Tensor:
        x, g = self.tokens(images)
        x = self.patch_embed(x)
        if self.config.use_pos_embed:
            x = x + self.pos_embed_for(g)
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x)

    def forward(self, images: torch.Tensor, heads: bool = False, expanders: bool = True) -> EncoderOutput:
        s = self.features(images)
        out = EncoderOutput(patch_features=s, pooled=s.mean(dim=1))
        if expanders:
            out.global_embed = self.global_expander(out.pooled)
            out.local_embeds = self.local_expander(s)
        if heads:
            if s.shape[1] != self.config.num_tokens:
                raise ValueError("order/restore heads need the training token grid")
            out.order_logits = self.order_head(s)
            out.restored = self.restore_head(s)
        return out


def encode(model: PEACEncoder, crops, heads: bool = False) -> EncoderOutput:
    """Forward pass on numpy or torch crops of shape (B, S, S) or (S, S)."""
    p = next(model.parameters())
    x = torch.as_tensor(crops, dtype=p.dtype, device=p.device)
    if x.dim() == 2:
        x = x[None]
    return model(x, heads=heads)


class StudentTeacher(nn.Module):
    """Student trained by gradients; teacher follows it by EMA and never gets gradients."""

    def __init__(self, config: EncoderConfig, ema_alpha: float = 0.999, student: PEACEncoder | None = None):
        super().__init__()
        if not 0.0 < ema_alpha < 1.0:
            raise ValueError(f"ema_alpha must be in (0, 1), got {ema_alpha}")
        self.ema_alpha = ema_alpha
        self.student = student if student is not None else PEACEncoder(config)
        self.teacher = copy.deepcopy(self.student)
        for p in self.teacher.parameters():
            p.requires_grad_(False)

    @property
    def config(self) -> EncoderConfig:
        return self.student.config

    @torch.no_grad()
    def ema_update(self, alpha: float | None = None):
        ema_update(self.student, self.teacher, self.ema_alpha if alpha is None else alpha)


@torch.no_grad()
def ema_update(student: nn.Module, teacher: nn.Module, alpha: float):
    """teacher <- alpha * teacher + (1 - alpha) * student, elementwise."""
    s_params = dict(student.named_parameters())
    t_params = dict(teacher.named_parameters())
    if s_params.keys() != t_params.keys():
        raise ValueError("student and teacher parameter sets differ")
    for name, t in t_params.items():
        s = s_params[name]
        if s.shape != t.shape:
            raise ValueError(f"shape mismatch for {name}: {tuple(s.shape)} vs {tuple(t.shape)}")
        t.mul_(alpha).add_(s.detach(), alpha=1.0 - alpha)


@torch.no_grad()
def param_distance(a: nn.Module, b: nn.Module) -> float:
    sq = sum(((p - q) ** 2).sum() for p, q in zip(a.parameters(), b.parameters()))
    return math.sqrt(float(sq))
