"""Layers and model builders on top of :mod:`pumlc.tensor`."""
from __future__ import annotations

from typing import Iterator, Optional, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Base class; parameters are ``Tensor`` attributes with ``requires_grad``.

    Buffers (non-trainable state such as batch-norm running statistics) are
    numpy arrays whose attribute names are listed in ``_buffer_names``.
    """

    training = True
    _buffer_names: tuple[str, ...] = ()

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in self._buffer_names:
            yield prefix + name, getattr(self, name)
        for name, child in self.children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update({name: buf for name, buf in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        missing = (set(params) | set(buffers)) - set(state)
        if missing:
            raise KeyError(f"state is missing entries: {sorted(missing)}")
        for name, p in params.items():
            if state[name].shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: {state[name].shape} vs {p.shape}")
            p.data = np.array(state[name], dtype=np.float64)
        for name, buf in buffers.items():
            buf[...] = state[name]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> Tensor:
    bound = np.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, bias: bool = True):
        self.weight = _uniform(rng, in_features, (in_features, out_features))
        self.bias = Tensor(np.zeros(out_features), requires_grad=True) if bias else None

    def forward(self, x):
        out = x @ self.weight
        return out + self.bias if self.bias is not None else out


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 rng: np.random.Generator, stride: int = 1, padding: Optional[int] = None,
                 bias: bool = True):
        if kernel_size not in (1, 3):
            raise ValueError("only 1x1 and 3x3 kernels are supported")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = kernel_size // 2 if padding is None else padding
        fan_in = in_channels * kernel_size * kernel_size
        self.weight = _uniform(rng, fan_in, (out_channels, in_channels, kernel_size, kernel_size))
        self.bias = Tensor(np.zeros(out_channels), requires_grad=True) if bias else None

    def forward(self, x):
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class BatchNorm2d(Module):
    _buffer_names = ("running_mean", "running_var")

    def __init__(self, channels: int, scale_init: float = 1.0, momentum: float = 0.1, eps: float = 1e-5):
        self.scale = Tensor(np.full(channels, scale_init), requires_grad=True)
        self.shift = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum
        self.eps = eps

    def forward(self, x):
        return T.batchnorm2d(x, self.scale, self.shift, self.running_mean, self.running_var,
                             training=self.training, momentum=self.momentum, eps=self.eps)


class ReLU(Module):
    def forward(self, x):
        return T.relu(x)


class GlobalAvgPool(Module):
    """``n×c×h×w -> n×c``."""

    def forward(self, x):
        return T.reshape(T.global_avg_pool(x), (x.shape[0], x.shape[1]))


class Flatten(Module):
    def forward(self, x):
        return T.reshape(x, (x.shape[0], -1))


class Sequential(Module):
    def __init__(self, layers: Sequence[Module]):
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x


def build_model(spec: dict, input_shape: Sequence[int], n_categories: int,
                rng: np.random.Generator) -> Sequential:
    """Build a model from a JSON-style spec.

    ``{"kind": "linear"}``, ``{"kind": "mlp", "hidden": [64]}`` or
    ``{"kind": "cnn", "channels": [8, 16], "lgconv": false, "heads": 4}``.
    ``input_shape`` excludes the batch dimension.
    """
    kind = spec.get("kind", "mlp")
    if kind in ("linear", "mlp"):
        (width,) = input_shape
        layers: list[Module] = []
        for hidden in spec.get("hidden", []) if kind == "mlp" else []:
            layers += [Linear(width, hidden, rng), ReLU()]
            width = hidden
        layers.append(Linear(width, n_categories, rng))
        return Sequential(layers)
    if kind == "cnn":
        channels_in = input_shape[0]
        layers = []
        for i, ch in enumerate(spec.get("channels", [8, 16])):
            layers += [Conv2d(channels_in, ch, 3, rng, stride=1 if i == 0 else 2),
                       BatchNorm2d(ch), ReLU()]
            channels_in = ch
        layers += [GlobalAvgPool(), Linear(channels_in, n_categories, rng)]
        model = Sequential(layers)
        if spec.get("lgconv", False):
            from .lgconv import wrap_model
            model = wrap_model(model, rng, heads=spec.get("heads", 4))
        return model
    raise ValueError(f"unknown model kind {kind!r}")
