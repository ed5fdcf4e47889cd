# # Rebalancing rare appearances
#
# In `toy-layout-imbalanced` 80% of scenes use one palette. Rarity scores are
# the inverse density of each image's average category colour, and they drive
# both which images fill a batch and a per-pixel loss mask.

# In[1]:

import numpy as np

from cimle.rarity import allocate_batch, build_mask, rarity_scores
from cimle.tasks import get_task

task = get_task("toy-layout-imbalanced")
ds = task.make(60, 0)
table = rarity_scores(ds.labels, ds.y, 4)
print("style counts:", np.bincount(ds.mode))

# Mean rarity per style for the sky category: the rare palettes score higher.

# In[2]:

for style in range(3):
    print(style, table.rarity[0, ds.mode == style].mean())

# Batch allocation draws rare-style images far more often than their share.

# In[3]:

picks = allocate_batch(table, 5000, np.random.default_rng(0))
print("share of draws by style:", np.bincount(ds.mode[picks], minlength=3) / len(picks))

# The mask of one image is its per-category rarity painted onto the label
# map, scaled so the rarest region weighs 1.

# In[4]:

mask = build_mask(ds.labels[0], table, 0).normalized
print(np.unique(np.round(mask, 3)))
