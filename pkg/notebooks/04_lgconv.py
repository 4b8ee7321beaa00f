# ---
# jupyter:
#   jupytext:
#     formats: py:percent
#     text_representation:
#       extension: .py
#       format_name: percent
# ---

# %% [markdown]
# # Local-global convolution
#
# Every 3x3 convolution gets a pooled, attention-gated global branch added to
# its output. The branch ends in a batch norm whose scale starts tiny, so a
# freshly wrapped network behaves like the original.

# %%
import numpy as np

from pumlc.lgconv import global_branch_param_count, iter_blocks, set_global_scale, wrap_model
from pumlc.nn import build_model
from pumlc.tensor import Tensor

rng = np.random.default_rng(0)
model = build_model({"kind": "cnn", "channels": [8, 16]}, (3, 16, 16), 5, rng)
wrapped = wrap_model(model, rng, heads=4)
print(len(list(iter_blocks(wrapped))), "blocks")
print(model.num_parameters(), "->", wrapped.num_parameters())
print(global_branch_param_count(3, 8, 4) + global_branch_param_count(8, 16, 4))

# %%
x = Tensor(rng.normal(size=(4, 3, 16, 16)))
model.eval(), wrapped.eval()
ref = model(x).data
print("relative change", np.abs(wrapped(x).data - ref).max() / np.abs(ref).max())
set_global_scale(wrapped, 0.0)
print("identical at zero scale", np.array_equal(wrapped(x).data, ref))

# %% [markdown]
# Attention maps from the first block, one distribution over positions per head.

# %%
set_global_scale(wrapped, 1.0)
wrapped(x)
block = next(iter_blocks(wrapped))
print(block.last_attention.shape, block.last_attention.sum(axis=-1)[0])
