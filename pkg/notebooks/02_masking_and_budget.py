# ---
# jupyter:
#   jupytext:
#     formats: py:percent
#     text_representation:
#       extension: .py
#       format_name: percent
# ---

# %% [markdown]
# # Masking labels
#
# A fully labeled set is masked down to a fraction of its annotations.
# In the positive-only setting every negative becomes unknown.

# %%
import numpy as np

from pumlc.datasets import (MaskSetting, MaskSpec, annotation_budget, apply_mask, format_stats,
                            generate_synthetic_vectors, label_stats)

full = generate_synthetic_vectors(500, 16, 4, seed=1)
print(format_stats(label_stats(full), full.category_names))

# %%
for setting in (MaskSetting.POSITIVE_ONLY, MaskSetting.PARTIAL_PN):
    masked = apply_mask(full, MaskSpec(setting, 0.2, seed=0))
    print(setting.value)
    print(format_stats(label_stats(masked), masked.category_names))

# %% [markdown]
# Annotation cost. Counts with the size of a large detection benchmark:
# keeping 10% of positives is compared with keeping 10% of both signs.

# %%
budget = annotation_budget(241_035, 6_381_605, 0.10)
print(budget.pu_total, budget.pn_total, f"{100 * budget.reduction:.1f}%")

# %%
for r in (0.1, 0.3, 0.5, 0.7, 0.9):
    print(r, f"{100 * annotation_budget(241_035, 6_381_605, r).reduction:.2f}%")
