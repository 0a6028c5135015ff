# %% [markdown]
# # The fusion network
#
# A three-stage CNN whose activations can be gated by a feature mask, and
# whose pooled vector can attend to the pooled foundation vector.

# %%
import numpy as np

from ltfuse.fusion import FusionConfig, forward, init_params, prepare_features

rng = np.random.default_rng(0)
cfg = FusionConfig(num_classes=10, map_fusion_stage=2, latent_fusion=True, alpha=0.5)
params = init_params(cfg, seed=0)
for name, p in params.items():
    print(f"{name:10s} {p.shape}")

# %%
images = rng.standard_normal((4, 16, 16, 1))
fmaps = rng.standard_normal((4, 16, 8, 8))
masks, v_sam = prepare_features(fmaps, cfg)
trace = forward(params, cfg, images, masks, v_sam)
print("mask", masks.shape, "v_sam", v_sam.shape)
print("f_fused", trace.f_fused.shape, "embedding", trace.embedding.shape, "z", trace.z.shape)

# %% [markdown]
# The blend weight interpolates between the attention head and the CNN
# head. At alpha = 1 the logits are the plain CNN's, bit for bit.

# %%
plain = FusionConfig(num_classes=10)
one = FusionConfig(num_classes=10, latent_fusion=True, alpha=1.0)
z_plain = forward(init_params(plain, 0), plain, images).z
z_one = forward(init_params(one, 0), one, images, v_sam=v_sam).z
print("alpha=1 equals plain CNN:", np.array_equal(z_plain, z_one))
