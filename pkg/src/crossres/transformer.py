"""Global-context branch: ViT-style encoder plus a coarse-to-fine fusion decoder."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .diffusion import ConvBR


@dataclass(frozen=True)
class TransformerConfig:
    depth: int = 12
    heads: int = 4
    d: int = 128
    patch_size: int = 8
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.d % self.heads:
            raise ValueError(f"width {self.d} is not divisible by {self.heads} heads")
        if self.depth < 0 or self.patch_size < 1:
            raise ValueError("depth must be >= 0 and patch_size >= 1")


@dataclass
class TokenSequence:
    tokens: torch.Tensor  # (B, N, d)
    grid_shape: Tuple[int, int]

    def __post_init__(self):
        rows, cols = self.grid_shape
        if self.tokens.shape[1] != rows * cols:
            raise ValueError(f"{self.tokens.shape[1]} tokens do not fill a {rows}x{cols} grid")

    @property
    def d(self) -> int:
        return self.tokens.shape[-1]


def attention(q, k, v, return_weights: bool = False):
    """Softmax(q k^T / sqrt(d_k)) v over the last two dims."""
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2] or q.shape[:-2] != k.shape[:-2]:
        raise ValueError(f"incompatible shapes q{tuple(q.shape)} k{tuple(k.shape)} v{tuple(v.shape)}")
    scores = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
    weights = torch.softmax(scores, dim=-1)
    out = weights @ v
    return (out, weights) if return_weights else out


class PatchEmbed(nn.Module):
    """Non-overlapping patch projection plus learned positions for a ``grid`` of patches."""

    def __init__(self, cfg: TransformerConfig, grid: Tuple[int, int], in_channels: int = 3):
        super().__init__()
        self.patch_size = cfg.patch_size
        self.proj = nn.Conv2d(in_channels, cfg.d, cfg.patch_size, stride=cfg.patch_size)
        self.pos = nn.Parameter(torch.randn(1, cfg.d, *grid) * 0.02)
        self.use_pos = True

    def positions(self, rows, cols):
        pos = self.pos
        if tuple(pos.shape[-2:]) != (rows, cols):
            pos = F.interpolate(pos, size=(rows, cols), mode="bilinear", align_corners=False)
        return pos.flatten(2).transpose(1, 2)

    def forward(self, x) -> TokenSequence:
        H, W = x.shape[-2:]
        p = self.patch_size
        if H % p or W % p:
            raise ValueError(f"input {H}x{W} is not divisible by patch size {p}")
        tok = self.proj(x)
        rows, cols = tok.shape[-2:]
        tok = tok.flatten(2).transpose(1, 2)
        if self.use_pos:
            tok = tok + self.positions(rows, cols)
        return TokenSequence(tok, (rows, cols))


def patch_embed(x, embed: PatchEmbed) -> TokenSequence:
    return embed(x)


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, d, heads):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(d, 3 * d)
        self.out = nn.Linear(d, d)
        self.last_weights: Optional[torch.Tensor] = None
        self.record_weights = False

    def forward(self, x):
        B, N, d = x.shape
        qkv = self.qkv(x).reshape(B, N, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        out, w = attention(qkv[0], qkv[1], qkv[2], return_weights=True)
        if self.record_weights:
            self.last_weights = w.detach()
        return self.out(out.transpose(1, 2).reshape(B, N, d))


class Block(nn.Module):
    """Pre-norm: x + MHSA(LN(x)), then x + MLP(LN(x))."""

    def __init__(self, d, heads, mlp_ratio=4):
        super().__init__()
        self.norm1 = nn.LayerNorm(d)
        self.attn = MultiHeadSelfAttention(d, heads)
        self.norm2 = nn.LayerNorm(d)
        self.mlp = nn.Sequential(nn.Linear(d, mlp_ratio * d), nn.GELU(), nn.Linear(mlp_ratio * d, d))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class TransformerEncoder(nn.Module):
    def __init__(self, cfg: TransformerConfig):
        super().__init__()
        self.blocks = nn.ModuleList(Block(cfg.d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth))

    def forward(self, seq: TokenSequence) -> TokenSequence:
        x = seq.tokens
        for block in self.blocks:
            x = block(x)
        return TokenSequence(x, seq.grid_shape)

    def record_attention(self, flag: bool = True):
        for b in self.blocks:
            b.attn.record_weights = flag
        return self


def transformer_encode(seq: TokenSequence, encoder: TransformerEncoder) -> TokenSequence:
    return encoder(seq)


def tokens_to_grid(seq: TokenSequence) -> torch.Tensor:
    rows, cols = seq.grid_shape
    return seq.tokens.transpose(1, 2).reshape(seq.tokens.shape[0], seq.d, rows, cols)


class HierarchicalFusion(nn.Module):
    """Coarse-to-fine decoder fusing encoder tokens with the five diffusion scales.

    Tokens are reshaped to a grid and resampled to the coarsest diffusion scale;
    every later stage doubles the resolution. At each stage the running map is
    concatenated with the matching diffusion feature map and passed through a
    ConvBR block.
    """

    def __init__(self, d: int, diff_channels: Sequence[int], stage_channels: Sequence[int]):
        super().__init__()
        if len(diff_channels) != len(stage_channels):
            raise ValueError("one stage per diffusion scale")
        self.diff_channels = list(diff_channels)
        self.stages = nn.ModuleList()
        prev = d
        for dc, sc in zip(diff_channels, stage_channels):
            self.stages.append(ConvBR(prev + dc, sc))
            prev = sc
        self.out_channels = prev

    def forward(self, enc: TokenSequence, diff_feats: Sequence[torch.Tensor]) -> torch.Tensor:
        if len(diff_feats) != len(self.stages):
            raise ValueError(f"expected {len(self.stages)} diffusion scales, got {len(diff_feats)}")
        h = tokens_to_grid(enc)
        for i, (stage, f) in enumerate(zip(self.stages, diff_feats)):
            target = tuple(f.shape[-2:])
            if i > 0 and target != tuple(2 * s for s in h.shape[-2:]):
                raise ValueError(f"scale {i + 1} has size {target}, expected twice {tuple(h.shape[-2:])}")
            if tuple(h.shape[-2:]) != target:
                h = F.interpolate(h, size=target, mode="bilinear", align_corners=False)
            h = stage(torch.cat([h, f], dim=1))
        return h
