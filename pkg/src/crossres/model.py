"""Trainable part of the dual-branch segmenter (the denoiser is held outside, frozen)."""
from __future__ import annotations

from typing import Dict, List, Optional, Sequence

import torch
import torch.nn as nn

from .config import RunConfig
from .diffusion import DenoiserNet, FeatureFusion, make_linear_schedule
from .supervision import PredictionHead, PredictionMap
from .transformer import HierarchicalFusion, PatchEmbed, TransformerConfig, TransformerEncoder


def build_denoiser(cfg: RunConfig) -> DenoiserNet:
    d = cfg.diffusion
    return DenoiserNet(base=d.base_channels, enc_mult=d.enc_mult, dec_channels=d.dec_channels)


def build_schedule(cfg: RunConfig):
    d = cfg.diffusion
    return make_linear_schedule(d.T, d.beta_start, d.beta_end)


class DualBranchModel(nn.Module):
    """Local branch (fused diffusion features -> Y1) and global branch (tokens + fusion -> Y2).

    ``mode`` decides which parts exist: ``diffusion_only`` has no global
    branch, ``transformer_only`` has no local branch and receives zero
    tensors in place of diffusion features.
    """

    def __init__(self, cfg: RunConfig, num_classes: int):
        super().__init__()
        self.mode = cfg.train.mode
        self.num_classes = num_classes
        dec = list(cfg.diffusion.dec_channels)
        self.dec_channels = dec
        self.has_local = self.mode != "transformer_only"
        self.has_global = self.mode != "diffusion_only"
        if self.has_local:
            self.fusion = FeatureFusion(dec, cfg.train.fused_channels)
            self.head1 = PredictionHead(cfg.train.fused_channels, num_classes)
        if self.has_global:
            t = cfg.transformer
            tcfg = TransformerConfig(depth=t.depth, heads=t.heads, d=t.d, patch_size=t.patch_size)
            grid = (cfg.train.crop_size // t.patch_size,) * 2
            self.embed = PatchEmbed(tcfg, grid)
            self.encoder = TransformerEncoder(tcfg)
            self.decoder = HierarchicalFusion(t.d, dec, t.stage_channels)
            self.head2 = PredictionHead(self.decoder.out_channels, num_classes)

    def zero_features(self, x: torch.Tensor) -> List[torch.Tensor]:
        B, _, H, W = x.shape
        return [x.new_zeros(B, c, H // 2 ** (4 - i), W // 2 ** (4 - i)) for i, c in enumerate(self.dec_channels)]

    def forward(self, x: torch.Tensor, diff_feats: Optional[Sequence[torch.Tensor]]) -> Dict[str, object]:
        """``x`` in [-1, 1]; ``diff_feats`` coarse-to-fine (ignored when there is no local branch)."""
        out: Dict[str, object] = {}
        if self.has_local:
            fused = self.fusion(diff_feats)
            out["fused"] = fused
            out["y1"] = PredictionMap(self.head1(fused))
        if self.has_global:
            feats = diff_feats if self.has_local else self.zero_features(x)
            enc = self.encoder(self.embed(x))
            out["y2"] = PredictionMap(self.head2(self.decoder(enc, feats)))
        return out

    def final(self, out) -> PredictionMap:
        return out["y2"] if self.has_global else out["y1"]
