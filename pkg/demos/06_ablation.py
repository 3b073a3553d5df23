# %% [markdown]
# # Four-mode ablation at desk scale
#
# diffusion_only, transformer_only, no_pcem (all pseudo labels kept) and full,
# each trained with three seeds on the same scenes and scored on the same test split.
# Takes roughly 20 minutes on one CPU core.

# %%
from crossres.config import desk_config
from crossres.experiments import make_split, run_ablation, run_table
from crossres.training import pretrain_denoiser

cfg = desk_config()
table = run_table(cfg)
train, test = make_split(cfg, "train", table), make_split(cfg, "test", table)
denoiser, _ = pretrain_denoiser(cfg, train)
result = run_ablation(cfg, train, test, table, denoiser, log=print)
print(result.to_csv())
