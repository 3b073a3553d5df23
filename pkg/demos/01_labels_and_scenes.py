# %% [markdown]
# # Label spaces and synthetic scenes
#
# Fine source classes (15 land-cover classes, id 0 = no data) collapse onto four
# target classes. Synthetic scenes pair a high-resolution image and label map with
# coarse, noisy source-space labels.

# %%
import numpy as np

from crossres.label_space import default_table, inverse_unify, unify, validate_table
from crossres.synthdata import NoiseModel, SceneSpec, make_scene_pair

table = default_table()
print(table.to_text())
print("valid:", validate_table(table))

# %% Many-to-one mapping and its randomized inverse
target = np.array([[0, 1], [2, 3]])
source = inverse_unify(target, table, seed=0)
print("source ids:\n", source)
assert (unify(source, table) == target).all()

# %% A 64x64 scene with 8 regions, labels degraded by a factor of 8
pair = make_scene_pair(SceneSpec(seed=3, texture_noise_sigma=0.15), 8, NoiseModel(0.1, 1, seed=3), table)
print("image", pair.image.shape, pair.image.dtype, "range", pair.image.min(), pair.image.max())
print("hr labels, class counts:", np.bincount(pair.hr_labels.ravel(), minlength=4))
print("lr labels (source ids):\n", pair.lr_labels)
print("corrupted cells:", int(pair.corruption_mask.sum()), "of", pair.corruption_mask.size)
