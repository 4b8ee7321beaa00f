# ---
# jupyter:
#   jupytext:
#     formats: py:percent
#     text_representation:
#       extension: .py
#       format_name: percent
# ---

# %% [markdown]
# # Training on the vector suite
#
# 2,000 training and 500 test vectors, 8 categories. Training sees only a
# fraction of the positives and no negatives. Takes about a minute.

# %%
from pumlc import suite
from pumlc.datasets import MaskSetting, apply_mask
from pumlc.losses import PuLossConfig
from pumlc.metrics import evaluate
from pumlc.trainer import sweep, train

train_full, test = suite.vector_suite()
cfg = suite.suite_config(0.1, seed=0)
result = train(cfg, apply_mask(train_full, cfg.mask), eval_dataset=test)
for row in result.history[::5]:
    print(row["epoch"], round(row["total_loss"], 4))
print(evaluate(result.model, test).map)

# %% [markdown]
# Supervised baseline trained on every label, for reference.

# %%
pn = cfg.replace(loss_kind="pn_bce", mask=None)
print(evaluate(train(pn, train_full).model, test).map)

# %% [markdown]
# Re-balance exponent at a 10% label ratio. Without it the unlabeled term
# dominates and ranking quality drops sharply.

# %%
rows = sweep(cfg, train_full, test, [0.0, 0.5, 1.0, 2.0], [1.0], [0.1], [0], MaskSetting.POSITIVE_ONLY)
for row in rows:
    print(row.run_id, round(row.report.map, 4))
