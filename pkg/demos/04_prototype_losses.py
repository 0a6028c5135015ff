# %% [markdown]
# # Prototype losses and memory banks
#
# Every class keeps a FIFO bank of recent embeddings. Its mean is the class
# prototype and its per-dimension std sets the size of a random nudge.

# %%
import numpy as np

from ltfuse.data import compute_weights
from ltfuse.protoloss import ClassMemoryBank, LossConfig, MemoryBanks, proto_loss

bank = ClassMemoryBank(capacity=2, dim=2)
for v in ([0, 0], [2, 2], [4, 4]):
    bank.push(v)
print("kept:", [e.tolist() for e in bank.entries])
print("prototype, sigma, valid:", bank.stats())

# %% [markdown]
# Frequent classes (weight below the threshold) are pulled towards their
# prototype. Rare classes are pulled to a perturbed prototype and pushed
# away from the exact one.

# %%
rng = np.random.default_rng(0)
counts = [500, 120, 30, 6]
weights = compute_weights(counts)
banks = MemoryBanks(4, 64, 3)
for k in range(4):
    banks.push_batch(rng.standard_normal((5, 3)) + 3 * k, [k] * 5)
Z = rng.standard_normal((8, 3)) * 2
y = np.array([0, 0, 1, 1, 2, 2, 3, 3])
bd = proto_loss(Z, y, banks, weights, LossConfig(beta=1e-4), rng=rng, baseline=2.3)
print("weights", np.round(weights, 3))
for k, v in bd.as_dict().items():
    print(f"{k:12s} {v: .5f}")
print("head samples:", bd.masks["head"].astype(int), " tail samples:", bd.masks["tail_std"].astype(int))
