# ---
# jupyter:
#   jupytext:
#     formats: py:percent
#     text_representation:
#       extension: .py
#       format_name: percent
# ---

# %% [markdown]
# # PU losses
#
# `pu_mlc_loss` sums a per-category variational objective, optionally
# re-weighted by the mean unlabeled probability and sharpened by a
# temperature, plus a MixUp consistency term.

# %%
import numpy as np

from pumlc.losses import (BatchView, PuLossConfig, TemperatureMode, pn_risk, pu_mlc_loss,
                          rebalance_factor, upu_risk)
from pumlc.tensor import Tensor

rng = np.random.default_rng(0)

# %% [markdown]
# At all-zero logits the plain objective is exactly 0, and with the re-balance
# exponent at 1 every category contributes log(2)/2.

# %%
labels = np.array([[1, 0, 0], [0, 1, 0], [0, 0, 1], [0, 0, 0]])
zeros = BatchView(Tensor(np.zeros((4, 3))), labels)
off = dict(temperature=TemperatureMode.OFF, reg_weight=0.0)
print(pu_mlc_loss(zeros, None, None, PuLossConfig(gamma=0.0, **off)).total.item())
print(pu_mlc_loss(zeros, None, None, PuLossConfig(gamma=1.0, **off)).total.item() / 3)

# %% [markdown]
# How the re-balance factor shrinks as the exponent grows.

# %%
v = BatchView(Tensor(rng.normal(-1.0, 1.0, size=(64, 1))), (rng.random((64, 1)) < 0.1).astype(int))
for g in (0.0, 0.5, 1.0, 2.0):
    print(g, rebalance_factor(v, 0, g))

# %% [markdown]
# The unbiased PU risk tracks the PN risk on average when the prior is known.

# %%
diffs = []
for _ in range(500):
    sp, sn = rng.normal(1, 1, 50), rng.normal(-1, 1, 50)
    su = np.where(rng.random(100) < 0.3, rng.normal(1, 1, 100), rng.normal(-1, 1, 100))
    diffs.append(upu_risk(sp, su, 0.3).item() - pn_risk(sp, sn, 0.3).item())
print(np.mean(diffs), np.std(diffs) / np.sqrt(len(diffs)))
