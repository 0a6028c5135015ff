# %% [markdown]
# # A synthetic long-tailed dataset
#
# Each class is a noisy oriented grating placed at a random offset. Training
# counts fall off exponentially from the first class to the last.

# %%
import numpy as np

from ltfuse.data import ImbalanceProfile, synth_corpus

splits = synth_corpus(num_classes=10, n_max=500, imbalance_ratio=100, seed=0)
train = splits["train"]
print(train.images.shape, train.images.dtype)
print("counts:", train.class_counts.tolist())

# %% [markdown]
# Class weights grow towards the tail and sit in [0, 1). Groups use the
# usual many / medium / few cut-offs of 100 and 20 training images.

# %%
profile = ImbalanceProfile.from_counts(train.class_counts)
for k, (n, w, g) in enumerate(zip(profile.counts, profile.weights, profile.groups)):
    print(f"class {k}: n={n:4d}  w={w:.3f}  {g}")

# %% [markdown]
# Generation is a pure function of its arguments.

# %%
again = synth_corpus(num_classes=10, n_max=500, imbalance_ratio=100, seed=0)["train"]
print("same checksum:", again.checksum == train.checksum)
print("val/test balanced:", np.unique(splits["test"].class_counts).tolist())
