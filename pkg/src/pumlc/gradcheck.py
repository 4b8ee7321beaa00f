"""Finite-difference verification of every differentiable op, layer and loss."""
from __future__ import annotations

import contextlib
import csv
import time
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np

from . import tensor as T
from .losses import (BatchView, PuLossConfig, TemperatureMode, mixup_reg_category, pn_bce_loss,
                     pn_risk, pu_mlc_loss, upu_risk, var_loss_category)
from .nn import Conv2d, Linear, ReLU, Sequential
from .tensor import Tensor

STEP = 1e-5
TOLERANCE = 1e-4

# a case is (fn over input tensors -> scalar tensor, list of input arrays)
Case = tuple[Callable[[list[Tensor]], Tensor], list[np.ndarray]]


def relative_error(analytic: Sequence[np.ndarray], numeric: Sequence[np.ndarray]) -> float:
    """Max abs difference over all inputs, scaled by the largest gradient entry."""
    scale = max(max(np.abs(g).max(initial=0.0) for g in analytic),
                max(np.abs(g).max(initial=0.0) for g in numeric), 1e-12)
    diff = max(np.abs(a - n).max(initial=0.0) for a, n in zip(analytic, numeric))
    return float(diff / scale)


def numeric_gradient(fn: Callable[[list[Tensor]], Tensor], inputs: Sequence[np.ndarray],
                     step: float = STEP) -> list[np.ndarray]:
    grads = []
    with T.no_grad():
        for k, x in enumerate(inputs):
            g = np.zeros_like(x)
            for i in np.ndindex(x.shape):
                orig = x[i]
                x[i] = orig + step
                up = fn([Tensor(a) for a in inputs]).item()
                x[i] = orig - step
                down = fn([Tensor(a) for a in inputs]).item()
                x[i] = orig
                g[i] = (up - down) / (2 * step)
            grads.append(g)
    return grads


def analytic_gradient(fn: Callable[[list[Tensor]], Tensor], inputs: Sequence[np.ndarray]) -> list[np.ndarray]:
    with T.Tape():
        leaves = [Tensor(x, requires_grad=True) for x in inputs]
        T.backward(fn(leaves))
    return [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves]


def check_case(fn, inputs, step: float = STEP) -> float:
    inputs = [np.array(x, dtype=np.float64) for x in inputs]
    analytic = analytic_gradient(fn, inputs)
    numeric = numeric_gradient(fn, inputs, step)
    return relative_error(analytic, numeric)


# --------------------------------------------------------------------- cases
def _weighted(op):
    """Reduce an op's output to a scalar with fixed random weights."""
    def make(rng, *shapes, positive=False):
        inputs = [rng.uniform(0.5, 2.0, s) if positive else rng.normal(size=s) for s in shapes]
        with T.no_grad():
            probe = op([Tensor(x) for x in inputs])
        w = rng.normal(size=probe.shape)
        return (lambda ts: T.sum(op(ts) * w)), inputs
    return make


def _away_from(x: np.ndarray, kink: float, margin: float = 1e-3) -> np.ndarray:
    close = np.abs(x - kink) < margin
    return np.where(close, kink + np.sign(x - kink + 1e-12) * 10 * margin, x)


def _case_clamp(rng):
    x = _away_from(rng.normal(size=(4, 3)), 0.2)
    w = rng.normal(size=(4, 3))
    return (lambda ts: T.sum(T.clamp_min(ts[0], 0.2) * w)), [x]


def _case_conv(rng):
    x, k, b = rng.normal(size=(1, 2, 5, 5)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
    w = rng.normal(size=(1, 3, 5, 5))
    return (lambda ts: T.sum(T.conv2d(ts[0], ts[1], ts[2], padding=1) * w)), [x, k, b]


def _case_conv_strided(rng):
    x, k = rng.normal(size=(2, 2, 6, 6)), rng.normal(size=(3, 2, 3, 3))
    w = rng.normal(size=(2, 3, 3, 3))
    return (lambda ts: T.sum(T.conv2d(ts[0], ts[1], stride=2, padding=1) * w)), [x, k]


def _case_batchnorm(rng):
    x, scale, shift = rng.normal(size=(4, 3, 2, 2)), rng.normal(size=3), rng.normal(size=3)
    w = rng.normal(size=(4, 3, 2, 2))

    def fn(ts):
        out = T.batchnorm2d(ts[0], ts[1], ts[2], np.zeros(3), np.ones(3), training=True)
        return T.sum(out * w)
    return fn, [x, scale, shift]


def _case_composite(rng):
    x, k = rng.normal(size=(2, 2, 4, 4)), rng.normal(size=(3, 2, 3, 3))
    scale, shift = rng.uniform(0.5, 1.5, 3), rng.normal(size=3)
    w = rng.normal(size=(2, 3, 4, 4))

    def fn(ts):
        h = T.conv2d(ts[0], ts[1], padding=1)
        h = T.batchnorm2d(h, ts[2], ts[3], np.zeros(3), np.ones(3), training=True)
        return T.sum(T.sigmoid(h) * w)
    return fn, [x, k, scale, shift]


def _case_lgconv(rng):
    from .lgconv import LgConvBlock

    block = LgConvBlock(Conv2d(2, 3, 3, rng), rng, heads=2)
    block.bn.scale.data = rng.uniform(0.5, 1.5, 3)  # away from the transparent init
    params = block.parameters()
    x = rng.normal(size=(2, 2, 4, 4))
    w = rng.normal(size=(2, 3, 4, 4))

    def fn(ts):
        with swapped(block, params, ts[1:]):
            return T.sum(block(ts[0]) * w)
    return fn, [x] + [p.data.copy() for p in params]


def _replace(module, old: Tensor, new: Tensor) -> None:
    for name, value in vars(module).items():
        if value is old:
            setattr(module, name, new)
            return
    for _, child in module.children():
        _replace(child, old, new)


@contextlib.contextmanager
def swapped(module, params: Sequence[Tensor], replacements: Sequence[Tensor]):
    """Temporarily substitute ``replacements`` for the parameter objects ``params``."""
    for p, t in zip(params, replacements):
        _replace(module, p, t)
    try:
        yield
    finally:
        for p, t in zip(params, replacements):
            _replace(module, t, p)


def _labels(rng, n, c, unknown=False):
    labels = np.where(rng.random((n, c)) < 0.4, 1, -1).astype(np.int8)
    labels[0, :] = 1  # every category has a positive
    if unknown:
        labels[rng.random((n, c)) < 0.3] = 0
    return labels


def _case_pn_bce(rng):
    labels = _labels(rng, 6, 3, unknown=True)
    return (lambda ts: pn_bce_loss(ts[0], labels)), [rng.normal(size=(6, 3))]


def _case_pn_risk(rng):
    prior = rng.uniform(0.1, 0.9)
    return (lambda ts: pn_risk(ts[0], ts[1], prior)), [rng.normal(size=5), rng.normal(size=7)]


def _case_upu(rng):
    prior = rng.uniform(0.1, 0.9)
    return (lambda ts: upu_risk(ts[0], ts[1], prior)), [rng.normal(size=5), rng.normal(size=9)]


def _case_var(rng):
    labels = _labels(rng, 8, 3)
    pf, tau = rng.uniform(0.2, 1.0), rng.uniform(0.3, 1.0)
    c = int(rng.integers(0, 3))
    return (lambda ts: var_loss_category(BatchView(ts[0], labels), c, pf, tau)), [rng.normal(size=(8, 3))]


def _pu_case(mode: TemperatureMode):
    def make(rng):
        labels = _labels(rng, 8, 3)
        logits = rng.normal(size=(8, 3))
        cfg = PuLossConfig(gamma=rng.uniform(0.5, 2.0), alpha=rng.uniform(0.3, 1.0),
                           temperature=mode, fixed_tau=0.6, reg_weight=0.0)
        frozen = logits.copy()
        return (lambda ts: pu_mlc_loss(BatchView(ts[0], labels), None, None, cfg,
                                       frozen_logits=frozen).total), [logits]
    return make


def _tiny_mlp(rng, d, c):
    return Sequential([Linear(d, 5, rng), ReLU(), Linear(5, c, rng)])


def _case_mixup(rng):
    d, c, n = 4, 3, 6
    model = _tiny_mlp(rng, d, c)
    params = model.parameters()
    x_p, x_u = rng.normal(size=(n, d)), rng.normal(size=(n, d))
    mu, cat = float(rng.uniform(0.1, 0.9)), int(rng.integers(0, c))
    with T.no_grad():
        lp, lu = model(Tensor(x_p)).data[:, cat], model(Tensor(x_u)).data[:, cat]

    def fn(ts):
        with swapped(model, params, ts):
            return mixup_reg_category(model, x_p, x_u, cat, 0.3, mu=mu, logits_p=lp, logits_u=lu)
    return fn, [p.data.copy() for p in params]


def _case_pu_full(rng):
    """Full loss (re-balance, adaptive temperature, MixUp) w.r.t. model parameters."""
    d, c, n = 4, 3, 8
    model = _tiny_mlp(rng, d, c)
    params = model.parameters()
    x = rng.normal(size=(n, d))
    labels = _labels(rng, n, c)
    cfg = PuLossConfig(gamma=1.0, alpha=0.7, temperature=TemperatureMode.ADAPTIVE, reg_weight=1.0)
    with T.no_grad():
        frozen = model(Tensor(x)).data
    seed = int(rng.integers(0, 2 ** 31))

    def fn(ts):
        with swapped(model, params, ts):
            view = BatchView(model(Tensor(x)), labels)
            return pu_mlc_loss(view, x, model, cfg, np.random.default_rng(seed), frozen).total
    return fn, [p.data.copy() for p in params]


def _op(fn, *shapes, positive=False):
    maker = _weighted(fn)
    return lambda rng: maker(rng, *shapes, positive=positive)


COMPONENTS: dict[str, Callable[[np.random.Generator], Case]] = {
    "add": _op(lambda ts: ts[0] + ts[1], (3, 4), (1, 4)),
    "sub": _op(lambda ts: ts[0] - ts[1], (3, 4), (3, 1)),
    "mul": _op(lambda ts: ts[0] * ts[1], (3, 4), (3, 4)),
    "div": _op(lambda ts: ts[0] / ts[1], (3, 4), (3, 4), positive=True),
    "scalar_mul": _op(lambda ts: T.scalar_mul(ts[0], 1.7), (3, 4)),
    "power": _op(lambda ts: T.power(ts[0], 1.5), (3, 4), positive=True),
    "exp": _op(lambda ts: T.exp(ts[0]), (3, 4)),
    "log": _op(lambda ts: T.log(ts[0]), (3, 4), positive=True),
    "sigmoid": _op(lambda ts: T.sigmoid(ts[0]), (3, 4)),
    "log_sigmoid": _op(lambda ts: T.log_sigmoid(ts[0]), (3, 4)),
    "softplus": _op(lambda ts: T.softplus(ts[0]), (3, 4)),
    "clamp_min": _case_clamp,
    "sum": _op(lambda ts: T.sum(ts[0], axis=1), (3, 4)),
    "mean": _op(lambda ts: T.mean(ts[0], axis=0), (3, 4)),
    "std": _op(lambda ts: T.std(ts[0], axis=1), (3, 4)),
    "softmax": _op(lambda ts: T.softmax(ts[0], axis=1), (3, 4)),
    "logsumexp": _op(lambda ts: T.logsumexp(ts[0], axis=0), (3, 4)),
    "matmul": _op(lambda ts: ts[0] @ ts[1], (5, 4), (4, 3)),
    "matmul_batched": _op(lambda ts: ts[0] @ ts[1], (2, 3, 4), (2, 4, 1)),
    "take": _op(lambda ts: ts[0][np.array([0, 2, 2]), 1], (3, 4)),
    "concat": _op(lambda ts: T.concat([ts[0], ts[1]], axis=1), (2, 3), (2, 2)),
    "broadcast_to": _op(lambda ts: T.broadcast_to(ts[0], (2, 3, 4)), (3, 1)),
    "conv2d": _case_conv,
    "conv2d_strided": _case_conv_strided,
    "global_avg_pool": _op(lambda ts: T.global_avg_pool(ts[0]), (2, 3, 4, 5)),
    "batchnorm2d": _case_batchnorm,
    "conv_bn_sigmoid": _case_composite,
    "lgconv": _case_lgconv,
    "pn_bce": _case_pn_bce,
    "pn_risk": _case_pn_risk,
    "upu_risk": _case_upu,
    "var_loss": _case_var,
    "pu_mlc_fixed_tau": _pu_case(TemperatureMode.FIXED),
    "pu_mlc_adaptive_tau": _pu_case(TemperatureMode.ADAPTIVE),
    "mixup_reg": _case_mixup,
    "pu_mlc_full": _case_pu_full,
}


@dataclass
class GradcheckEntry:
    component: str
    max_rel_error: float
    points: int
    passed: bool
    seconds: float


def gradcheck(config: Optional[dict] = None,
              extra: Optional[dict[str, Callable[[np.random.Generator], Case]]] = None) -> list[GradcheckEntry]:
    """Check every registered component at ``points`` random 64-bit instances.

    ``config`` keys: ``points`` (20), ``tolerance`` (1e-4), ``seed`` (0),
    ``step`` (1e-5), ``components`` (all).  A failing component is reported,
    never raised.
    """
    config = config or {}
    points = config.get("points", 20)
    tol = config.get("tolerance", TOLERANCE)
    step = config.get("step", STEP)
    registry = dict(COMPONENTS)
    registry.update(extra or {})
    names = config.get("components") or list(registry)
    report = []
    for k, name in enumerate(names):
        rng = np.random.default_rng([config.get("seed", 0), k])
        start = time.perf_counter()
        worst = 0.0
        for _ in range(points):
            fn, inputs = registry[name](rng)
            try:
                err = check_case(fn, inputs, step)
            except (T.NonFiniteError, T.TapeError, ValueError):
                err = float("inf")
            worst = max(worst, err if err == err else float("inf"))
        report.append(GradcheckEntry(name, worst, points, worst <= tol, time.perf_counter() - start))
    return report


def write_report(report: Sequence[GradcheckEntry], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["component", "max_rel_error", "points", "passed"])
        for e in report:
            writer.writerow([e.component, f"{e.max_rel_error:.3e}", e.points, int(e.passed)])
