# %% [markdown]
# # Global branch: patch tokens, self-attention, hierarchical fusion

# %%
import torch

from crossres.transformer import (HierarchicalFusion, PatchEmbed, TransformerConfig, TransformerEncoder,
                                  attention, tokens_to_grid)

torch.manual_seed(0)
q, k, v = torch.randn(4, 8), torch.randn(6, 8), torch.randn(6, 8)
out, w = attention(q, k, v, return_weights=True)
print("attention rows sum to", w.sum(-1))

# %% Tokens from a 64x64 image with 8x8 patches
cfg = TransformerConfig(depth=4, heads=4, d=64, patch_size=8)
seq = PatchEmbed(cfg, (8, 8))(torch.rand(2, 3, 64, 64) * 2 - 1)
enc = TransformerEncoder(cfg)(seq)
print("tokens", tuple(enc.tokens.shape), "grid", enc.grid_shape, "as map", tuple(tokens_to_grid(enc).shape))

# %% Coarse-to-fine fusion with five diffusion scales
diff_channels = [32, 32, 32, 16, 16]
feats = [torch.randn(2, c, 64 // 2 ** (4 - i), 64 // 2 ** (4 - i)) for i, c in enumerate(diff_channels)]
decoder = HierarchicalFusion(64, diff_channels, [64, 32, 32, 16, 16])
print("decoded", tuple(decoder(enc, feats).shape))
