"""SGD with momentum and Adam over lists of parameter tensors."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import Tensor


class Optimizer:
    def __init__(self, params: Sequence[Tensor], lr: float):
        self.params = list(params)
        self.lr = float(lr)
        self.step_count = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.step_count += 1
        for i, p in enumerate(self.params):
            if p.grad is not None:
                self._update(i, p, p.grad)

    def _update(self, i: int, p: Tensor, g: np.ndarray) -> None:
        raise NotImplementedError

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {}

    def load_state_arrays(self, arrays: dict[str, np.ndarray], step_count: int) -> None:
        self.step_count = step_count


class SGD(Optimizer):
    def __init__(self, params, lr: float = 0.01, momentum: float = 0.9):
        super().__init__(params, lr)
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def _update(self, i, p, g):
        v = self.velocity[i]
        v *= self.momentum
        v += g
        p.data = p.data - self.lr * v

    def state_arrays(self):
        return {f"velocity.{i}": v for i, v in enumerate(self.velocity)}

    def load_state_arrays(self, arrays, step_count):
        super().load_state_arrays(arrays, step_count)
        self.velocity = [np.array(arrays[f"velocity.{i}"]) for i in range(len(self.params))]


class Adam(Optimizer):
    def __init__(self, params, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        super().__init__(params, lr)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def _update(self, i, p, g):
        self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
        self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * g * g
        m_hat = self.m[i] / (1 - self.beta1 ** self.step_count)
        v_hat = self.v[i] / (1 - self.beta2 ** self.step_count)
        p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_arrays(self):
        arrays = {f"m.{i}": m for i, m in enumerate(self.m)}
        arrays.update({f"v.{i}": v for i, v in enumerate(self.v)})
        return arrays

    def load_state_arrays(self, arrays, step_count):
        super().load_state_arrays(arrays, step_count)
        self.m = [np.array(arrays[f"m.{i}"]) for i in range(len(self.params))]
        self.v = [np.array(arrays[f"v.{i}"]) for i in range(len(self.params))]


def make_optimizer(spec: dict, params: Sequence[Tensor], lr: float) -> Optimizer:
    kind = spec.get("kind", "adam").lower()
    if kind == "sgd":
        return SGD(params, lr, momentum=spec.get("momentum", 0.9))
    if kind == "adam":
        return Adam(params, lr, spec.get("beta1", 0.9), spec.get("beta2", 0.999), spec.get("eps", 1e-8))
    raise ValueError(f"unknown optimizer {kind!r}")
