# %% [markdown]
# # Training, evaluation and the ablation grid
#
# A reduced setting so the script runs in about a minute. The acceptance
# tests use the full 10-class, 50-epoch setting over five seeds.

# %%
from ltfuse.data import ImbalanceProfile, synth_corpus
from ltfuse.features import synth_provider
from ltfuse.train import TrainConfig, ablate, ablation_csv, evaluate, feature_only_control, history_csv, train

splits = synth_corpus(num_classes=10, n_max=500, imbalance_ratio=100, seed=0)
store = None
for ds in splits.values():
    store = synth_provider(ds, signal_strength=0.5, seed=0, store=store)
profile = ImbalanceProfile.from_counts(splits["train"].class_counts)

# %%
cfg = TrainConfig(epochs=10, map_fusion=True, latent_fusion=True, use_proto=True)
res = train(splits["train"], store, cfg, val_set=splits["val"])
print(history_csv(res.history))
print(evaluate(res.checkpoint, splits["test"], profile, store).to_json())

# %% [markdown]
# Logit adjustment is applied at evaluation time from the training priors.

# %%
la = TrainConfig(epochs=10, baseline="logit_adjust")
print("logit_adjust:", evaluate(train(splits["train"], store, la).checkpoint, splits["test"], profile).row())
print("probe on provider features alone:", feature_only_control(splits["train"], splits["test"], store).row())

# %%
rows = ablate(splits["train"], splits["test"], store, TrainConfig(epochs=10), workers=4)
print(ablation_csv(rows, baseline_label="CE"))
