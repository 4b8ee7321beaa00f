"""Local-global convolution: a 3x3 convolution plus an attention-gated global branch.

The global branch is

1. fusion: concat(x, broadcast(avgpool(x))) -> 1x1 conv (``hidden`` channels)
2. ``attn_heads`` 1x1 conv -> per-head softmax over spatial positions,
   ``attn_gate`` 1x1 conv -> sigmoid gate shared by all channels
3. per-head context = attention-weighted sum of fused features, broadcast to
   every position and scaled by the gate
4. 1x1 projection (same stride as the local conv) -> batch norm

and is added onto the local branch.  The batch-norm scale starts at 1e-4 and
the shift at 0, so a freshly wrapped model behaves like the original one.
"""
from __future__ import annotations

import copy

import numpy as np

from . import tensor as T
from .nn import BatchNorm2d, Conv2d, Module

BN_SCALE_INIT = 1e-4


def default_hidden(in_channels: int, heads: int) -> int:
    """Fusion width: the input channel count rounded up to a multiple of ``heads``."""
    return heads * -(-in_channels // heads)


def global_branch_param_count(in_channels: int, out_channels: int, heads: int = 4,
                              hidden: int | None = None) -> int:
    """Trainable parameters added by one block on top of its local convolution."""
    m = hidden or default_hidden(in_channels, heads)
    fuse = 2 * in_channels * m + m
    attn = m * heads + (m + 1)
    proj = m * out_channels
    bn = 2 * out_channels
    return fuse + attn + proj + bn


class LgConvBlock(Module):
    def __init__(self, local: Conv2d, rng: np.random.Generator, heads: int = 4,
                 hidden: int | None = None):
        if local.kernel_size != 3:
            raise ValueError("LgConvBlock wraps 3x3 convolutions only")
        c, o = local.in_channels, local.out_channels
        m = hidden or default_hidden(c, heads)
        if m % heads:
            raise ValueError(f"hidden width {m} is not divisible by {heads} heads")
        self.heads = heads
        self.hidden = m
        self.local = local
        self.fuse = Conv2d(2 * c, m, 1, rng)
        # no bias: a per-head constant cancels in the spatial softmax
        self.attn_heads = Conv2d(m, heads, 1, rng, bias=False)
        self.attn_gate = Conv2d(m, 1, 1, rng)
        self.proj = Conv2d(m, o, 1, rng, stride=local.stride, bias=False)
        self.bn = BatchNorm2d(o, scale_init=BN_SCALE_INIT)
        self.last_attention: np.ndarray | None = None
        self.last_gate: np.ndarray | None = None

    def global_branch(self, x):
        n, c, h, w = x.shape
        pooled = T.broadcast_to(T.global_avg_pool(x), (n, c, h, w))
        f = self.fuse(T.concat([x, pooled], axis=1))
        attn = T.softmax(T.reshape(self.attn_heads(f), (n, self.heads, h * w)), axis=-1)
        gate = T.sigmoid(self.attn_gate(f))
        self.last_attention = attn.data
        self.last_gate = gate.data
        per_head = T.reshape(f, (n, self.heads, self.hidden // self.heads, h * w))
        context = T.matmul(per_head, T.reshape(attn, (n, self.heads, h * w, 1)))
        context = T.reshape(context, (n, self.hidden, 1, 1))
        return self.bn(self.proj(context * gate))

    def forward(self, x):
        if x.shape[1] != self.local.in_channels:
            raise ValueError(f"expected {self.local.in_channels} channels, got {x.shape[1]}")
        return self.local(x) + self.global_branch(x)


def _wrap_in_place(module: Module, rng: np.random.Generator, heads: int) -> None:
    for name, value in list(vars(module).items()):
        if isinstance(value, Conv2d) and value.kernel_size == 3:
            setattr(module, name, LgConvBlock(value, rng, heads=heads))
        elif isinstance(value, list):
            for i, item in enumerate(value):
                if isinstance(item, Conv2d) and item.kernel_size == 3:
                    value[i] = LgConvBlock(item, rng, heads=heads)
                elif isinstance(item, Module):
                    _wrap_in_place(item, rng, heads)
        elif isinstance(value, Module) and not isinstance(value, LgConvBlock):
            _wrap_in_place(value, rng, heads)


def wrap_model(model: Module, rng: np.random.Generator, heads: int = 4) -> Module:
    """Return a copy of ``model`` with every 3x3 convolution wrapped in an LgConvBlock.

    The original kernels are reused in the local branches; ``model`` itself is
    left untouched.
    """
    wrapped = copy.deepcopy(model)
    _wrap_in_place(wrapped, rng, heads)
    return wrapped


def set_global_scale(model: Module, value: float) -> None:
    """Overwrite the global-branch batch-norm scale of every block in ``model``."""
    for block in iter_blocks(model):
        block.bn.scale.data[...] = value


def iter_blocks(model: Module):
    if isinstance(model, LgConvBlock):
        yield model
        return
    for _, child in model.children():
        yield from iter_blocks(child)


__all__ = ["LgConvBlock", "wrap_model", "global_branch_param_count", "default_hidden",
           "set_global_scale", "iter_blocks", "BN_SCALE_INIT"]
