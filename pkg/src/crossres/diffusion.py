"""DDPM forward process, denoiser pretraining and frozen multi-scale features."""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step variances ``beta[t-1]`` and cumulative ``alpha_bar[t-1]`` for t in 1..T."""

    beta: np.ndarray
    alpha_bar: np.ndarray

    @property
    def T(self) -> int:
        return len(self.beta)


def make_linear_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise ValueError("T must be >= 1")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    # log-space cumulative product stays accurate when beta is tiny
    alpha_bar = np.exp(np.cumsum(np.log1p(-beta)))
    return NoiseSchedule(beta, alpha_bar)


def _check_step(t, schedule: NoiseSchedule):
    t = torch.as_tensor(t)
    if torch.any(t < 1) or torch.any(t > schedule.T):
        raise ValueError(f"diffusion step must lie in 1..{schedule.T}, got {t.tolist()}")
    return t


def forward_diffuse(x0, t, eps, schedule: NoiseSchedule):
    """x_t = sqrt(alpha_bar[t]) x0 + sqrt(1 - alpha_bar[t]) eps.

    ``t`` may be an int or a per-item tensor (batch dimension first).
    Works on numpy arrays and torch tensors alike.
    """
    if tuple(x0.shape) != tuple(eps.shape):
        raise ValueError(f"noise shape {tuple(eps.shape)} != input shape {tuple(x0.shape)}")
    if isinstance(x0, np.ndarray):
        if np.any(np.asarray(t) < 1) or np.any(np.asarray(t) > schedule.T):
            raise ValueError(f"diffusion step must lie in 1..{schedule.T}, got {t}")
        ab = schedule.alpha_bar[np.asarray(t) - 1]
        ab = np.reshape(ab, np.shape(ab) + (1,) * (x0.ndim - np.ndim(ab)))
        return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
    t = _check_step(t, schedule)
    ab = torch.as_tensor(schedule.alpha_bar, dtype=x0.dtype)[t.long() - 1]
    ab = ab.reshape(ab.shape + (1,) * (x0.dim() - ab.dim()))
    return ab.sqrt() * x0 + (1.0 - ab).sqrt() * eps


def step_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


def _groups(ch):
    return math.gcd(8, ch)


class ResBlock(nn.Module):
    def __init__(self, cin, cout, emb_dim):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.emb = nn.Linear(emb_dim, cout)
        self.norm2 = nn.GroupNorm(_groups(cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb(emb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class DenoiserNet(nn.Module):
    """Encoder-decoder noise predictor with five decoder scales.

    Decoder outputs sit at strides 16, 8, 4, 2, 1; these are the extracted
    features. ``dec_channels`` lists their widths coarse to fine.
    """

    def __init__(self, in_channels: int = 3, base: int = 32,
                 enc_mult: Sequence[int] = (1, 2, 2, 4, 4),
                 dec_channels: Optional[Sequence[int]] = None):
        super().__init__()
        enc = [base * m for m in enc_mult]
        dec = list(dec_channels) if dec_channels is not None else enc[::-1]
        if len(enc) != 5 or len(dec) != 5:
            raise ValueError("the denoiser has exactly five scales")
        self.base = base
        self.enc_channels = enc
        self.dec_channels = dec
        self.emb_dim = emb_dim = 4 * base
        self.emb_mlp = nn.Sequential(nn.Linear(base, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim))
        self.stem = nn.Conv2d(in_channels, enc[0], 3, padding=1)
        self.enc_blocks = nn.ModuleList()
        self.downs = nn.ModuleList()
        prev = enc[0]
        for i, ch in enumerate(enc):
            if i > 0:
                self.downs.append(nn.Conv2d(prev, prev, 3, stride=2, padding=1))
            self.enc_blocks.append(ResBlock(prev, ch, emb_dim))
            prev = ch
        self.dec_blocks = nn.ModuleList()
        skips = enc[::-1]  # stride 16 .. 1
        for i, ch in enumerate(dec):
            cin = prev + skips[i]
            self.dec_blocks.append(ResBlock(cin, ch, emb_dim))
            prev = ch
        self.out_norm = nn.GroupNorm(_groups(prev), prev)
        self.out_conv = nn.Conv2d(prev, in_channels, 3, padding=1)
        self.frozen = False

    def freeze(self) -> "DenoiserNet":
        self.frozen = True
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        return self

    def train(self, mode: bool = True):
        # a frozen prior never re-enters training mode
        return super().train(mode and not self.frozen)

    def _encode(self, x, t):
        emb = self.emb_mlp(step_embedding(t, self.base))
        h = self.stem(x)
        skips = []
        for i, block in enumerate(self.enc_blocks):
            if i > 0:
                h = self.downs[i - 1](h)
            h = block(h, emb)
            skips.append(h)
        return h, skips, emb

    def decoder_features(self, x, t) -> List[torch.Tensor]:
        h, skips, emb = self._encode(x, t)
        feats = []
        for i, block in enumerate(self.dec_blocks):
            skip = skips[-1 - i]
            if h.shape[-2:] != skip.shape[-2:]:
                h = F.interpolate(h, size=skip.shape[-2:], mode="nearest")
            h = block(torch.cat([h, skip], dim=1), emb)
            feats.append(h)
        return feats

    def forward(self, x, t):
        feats = self.decoder_features(x, t)
        return self.out_conv(F.silu(self.out_norm(feats[-1])))


def parameter_checksum(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def ddpm_train_step(net: DenoiserNet, batch: torch.Tensor, schedule: NoiseSchedule,
                    optimizer: torch.optim.Optimizer, generator: torch.Generator) -> float:
    """One noise-prediction MSE update; returns the pre-update loss."""
    if net.frozen:
        raise RuntimeError("cannot train a frozen denoiser")
    net.train()
    B = batch.shape[0]
    t = torch.randint(1, schedule.T + 1, (B,), generator=generator)
    eps = torch.randn(batch.shape, generator=generator, dtype=batch.dtype)
    x_t = forward_diffuse(batch, t, eps, schedule)
    loss = F.mse_loss(net(x_t, t), eps)
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return float(loss.detach())


def to_model_range(images: torch.Tensor) -> torch.Tensor:
    """[0, 1] images -> [-1, 1], the range the denoiser is trained on."""
    return images * 2.0 - 1.0


@torch.no_grad()
def extract_features(net: DenoiserNet, x: torch.Tensor, step: int, schedule: NoiseSchedule,
                     generator: Optional[torch.Generator] = None) -> List[torch.Tensor]:
    """Decoder features f1..f5 (coarse to fine) for a batch of images in [-1, 1].

    Deterministic by default (zero injected noise); pass ``generator`` for the
    stochastic variant.
    """
    if not net.frozen:
        raise RuntimeError("feature extraction requires a frozen denoiser")
    _check_step(step, schedule)
    eps = (torch.randn(x.shape, generator=generator, dtype=x.dtype) if generator is not None
           else torch.zeros_like(x))
    t = torch.full((x.shape[0],), step, dtype=torch.long)
    x_t = forward_diffuse(x, t, eps, schedule)
    return net.decoder_features(x_t, t)


class ConvBR(nn.Sequential):
    """3x3 convolution -> batch norm -> ReLU."""

    def __init__(self, cin, cout):
        super().__init__(nn.Conv2d(cin, cout, 3, padding=1), nn.BatchNorm2d(cout), nn.ReLU(inplace=True))


class FeatureFusion(nn.Module):
    """Upsample every scale to full resolution, concatenate, ConvBR to ``out_channels``."""

    def __init__(self, scale_channels: Sequence[int], out_channels: int = 64):
        super().__init__()
        self.scale_channels = list(scale_channels)
        self.concat_channels = sum(scale_channels)
        self.block = ConvBR(self.concat_channels, out_channels)

    def upsample_concat(self, feats: Sequence[torch.Tensor]) -> torch.Tensor:
        if len(feats) != len(self.scale_channels):
            raise ValueError(f"expected {len(self.scale_channels)} feature maps, got {len(feats)}")
        size = feats[-1].shape[-2:]
        for i, f in enumerate(feats):
            stride = 2 ** (len(feats) - 1 - i)
            if f.shape[0] != feats[0].shape[0] or tuple(s * stride for s in f.shape[-2:]) != tuple(size):
                raise ValueError(f"feature map {i + 1} of shape {tuple(f.shape)} does not match the "
                                 f"finest scale {tuple(size)} at stride {stride}")
        ups = [f if f.shape[-2:] == size else
               F.interpolate(f, size=size, mode="bilinear", align_corners=False) for f in feats]
        return torch.cat(ups, dim=1)

    def forward(self, feats: Sequence[torch.Tensor]) -> torch.Tensor:
        return self.block(self.upsample_concat(feats))
