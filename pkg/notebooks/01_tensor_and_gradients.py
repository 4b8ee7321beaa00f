# ---
# jupyter:
#   jupytext:
#     formats: py:percent
#     text_representation:
#       extension: .py
#       format_name: percent
# ---

# %% [markdown]
# # Tensors and gradients
#
# The autodiff engine records operations on a tape while one is open, then
# walks it backwards from a scalar.

# %%
import numpy as np

from pumlc import tensor as T
from pumlc.gradcheck import check_case, gradcheck
from pumlc.tensor import Tape, Tensor, backward

rng = np.random.default_rng(0)

# %%
x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
w = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
with Tape():
    loss = T.sum(T.sigmoid(x @ w))
    backward(loss)
print(loss.item())
print(w.grad)

# %% [markdown]
# Central differences on the same function, compared the way the checker does it.

# %%
def fn(ts):
    return T.sum(T.sigmoid(ts[0] @ ts[1]))

print("max relative error", check_case(fn, [x.data, w.data]))

# %% [markdown]
# The full registry at a handful of points. Every op and every loss should pass.

# %%
for entry in gradcheck({"points": 3}):
    print(f"{entry.component:22s} {entry.max_rel_error:.2e} {'ok' if entry.passed else 'FAIL'}")
