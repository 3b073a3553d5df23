# %% [markdown]
# # Train, predict and score a small model end to end
#
# Uses the desk profile with shortened schedules so it runs in a couple of minutes.
# The same steps are available as `crossres generate | pretrain | train | predict | evaluate`.

# %%
from crossres.config import desk_config
from crossres.experiments import evaluate_scenes, make_split, mask_clean_rates, run_table
from crossres.training import Trainer, pretrain_denoiser

cfg = desk_config()
cfg.diffusion.pretrain_steps = 150
cfg.train.max_steps = 100
table = run_table(cfg)
train, test = make_split(cfg, "train", table), make_split(cfg, "test", table)
denoiser, _ = pretrain_denoiser(cfg, train)

# %%
trainer = Trainer(cfg, train, table, denoiser)
log = trainer.run()
print("loss first/last:", round(log[0]["loss"], 3), round(log[-1]["loss"], 3))
print("kept fraction at last step:", log[-1]["kept_fraction"])

# %% Tiled prediction in the 4-class target space, scored by mIoU
report = evaluate_scenes(trainer.predict_probs, test, cfg.train.crop_size, table)
print(report.to_csv(table.target.class_names))
print(report.summary())

# %% Are confidence-kept pixels cleaner than average?
print(mask_clean_rates(trainer))
