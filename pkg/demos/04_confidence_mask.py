# %% [markdown]
# # Pseudo-label confidence: prototypes and cosine filtering
#
# The first branch's argmax becomes a pseudo label for the second branch. Pixels whose
# fused feature is far (in angle) from the mean feature of their predicted class are
# dropped from the second loss.

# %%
import torch

from crossres.supervision import (PredictionMap, ce_loss, compute_prototypes, confidence_mask,
                                  mask_statistics, masked_ce_loss, total_loss)

torch.manual_seed(0)
C, D = 3, 8
directions = torch.eye(D)[:C] * 3
hard = torch.randint(0, C, (1, 16, 16))
F = directions[hard].permute(0, 3, 1, 2) + 0.3 * torch.randn(1, D, 16, 16)
F[..., :4, :4] = torch.randn(1, D, 4, 4).abs()  # an off-class patch
protos = compute_prototypes(F, hard, C)
mask = confidence_mask(F, hard, protos, tau=0.9)
print(mask_statistics(mask, hard, C))
print("kept inside the off-class patch:", mask[0, :4, :4].float().mean().item())

# %% Losses
y1 = PredictionMap(torch.randn(1, C, 16, 16))
y2 = PredictionMap(torch.randn(1, C, 16, 16))
l1 = ce_loss(y1, hard)
l2 = masked_ce_loss(y2, y1.hard, mask)
print(f"L1 {l1:.3f}  L2 {l2:.3f}  total {total_loss(l1, l2, 0.5):.3f}")
