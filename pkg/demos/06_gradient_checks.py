# %% [markdown]
# # Finite-difference gradient checks
#
# Every differentiable op has a hand-written backward pass. The checker
# compares each against central differences in float64.

# %%
from ltfuse.gradcheck import TOLERANCE, gradcheck, suite_head

report = gradcheck(("fusion-net", "proto-loss", "network"), seed=0, n_seeds=20)
for op, err in report.items():
    print(f"{op:14s} {err:.2e}  {'ok' if err < TOLERANCE else 'FAIL'}")

# %% [markdown]
# The harness notices a broken gradient: here the head-loss gradient is
# doubled on purpose.

# %%
broken = {"head x2": lambda s: [(2 * a, n) for a, n in suite_head(s)]}
print(gradcheck("proto-loss", seed=0, n_seeds=3, suites=broken)["head x2"])
