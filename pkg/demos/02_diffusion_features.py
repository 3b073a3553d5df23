# %% [markdown]
# # Diffusion prior as a frozen feature extractor
#
# Pretrain a small noise-prediction U-Net on synthetic images, freeze it, then read
# its five decoder scales and fuse them into one full-resolution feature map.

# %%
import numpy as np
import torch

from crossres.config import desk_config
from crossres.diffusion import FeatureFusion, extract_features, forward_diffuse, make_linear_schedule
from crossres.experiments import make_split
from crossres.training import pretrain_denoiser

schedule = make_linear_schedule(1000)
print("alpha_bar at t=1, 500, 1000:", schedule.alpha_bar[[0, 499, 999]])

# %% Forward process marginals
x0 = np.full(100_000, 0.5)
xt = forward_diffuse(x0, 250, np.random.default_rng(0).normal(size=x0.shape), schedule)
ab = schedule.alpha_bar[249]
print(f"mean {xt.mean():.4f} vs {np.sqrt(ab) * 0.5:.4f}; var {xt.var():.4f} vs {1 - ab:.4f}")

# %% Short pretraining run (the desk profile uses 500 steps)
cfg = desk_config()
cfg.diffusion.pretrain_steps = 100
scenes = make_split(cfg, "train")
net, losses = pretrain_denoiser(cfg, scenes)
print(f"loss: first {losses[0]:.3f}, mean of last 10 {np.mean(losses[-10:]):.3f}")

# %% Multi-scale features and fusion
x = torch.from_numpy(scenes[0].image).permute(2, 0, 1)[None] * 2 - 1
feats = extract_features(net, x, cfg.diffusion.extraction_step, schedule)
print("scales:", [tuple(f.shape) for f in feats])
fused = FeatureFusion(list(cfg.diffusion.dec_channels), 32)(feats)
print("fused:", tuple(fused.shape))
