"""Multi-label losses: PN cross-entropy, PN/uPU risks and the variational PU loss.

The variational PU loss of one category is

    p_c^gamma * log(mean_u sigmoid(s_u / tau)) - mean_p log sigmoid(s_p / tau)

where the unlabeled set holds every sample of the batch (labeled positives
included), ``p_c`` is the mean unlabeled probability and ``tau`` an optional
per-category temperature.  ``p_c^gamma`` and ``tau`` are computed from the
current logits but enter the loss as constants.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .tensor import NonFiniteError, Tensor, no_grad

POSITIVE, NEGATIVE = 1, -1


class TemperatureMode(str, enum.Enum):
    ADAPTIVE = "adaptive"
    FIXED = "fixed"
    OFF = "off"


@dataclass
class PuLossConfig:
    gamma: float = 0.5
    alpha: float = 1.0
    tau_floor: float = 1e-3
    reg_weight: float = 1.0
    mix_beta: float = 0.3
    temperature: TemperatureMode = TemperatureMode.ADAPTIVE
    fixed_tau: float = 1.0

    def __post_init__(self):
        self.temperature = TemperatureMode(self.temperature)
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if not 0 < self.tau_floor <= 1:
            raise ValueError("tau_floor must lie in (0, 1]")
        if self.reg_weight < 0:
            raise ValueError("reg_weight (lambda) must be non-negative")
        if self.mix_beta <= 0:
            raise ValueError("mix_beta must be positive")
        if self.fixed_tau <= 0:
            raise ValueError("fixed_tau must be positive")

    def to_dict(self) -> dict:
        return {"gamma": self.gamma, "alpha": self.alpha, "tau_floor": self.tau_floor,
                "lambda": self.reg_weight, "mix_beta": self.mix_beta,
                "temperature": self.temperature.value, "fixed_tau": self.fixed_tau}

    @classmethod
    def from_dict(cls, d: dict) -> "PuLossConfig":
        d = dict(d)
        if "lambda" in d:
            d["reg_weight"] = d.pop("lambda")
        return cls(**d)


def default_gamma(ratio: float) -> float:
    """Re-balance exponent for a known-label ratio: larger when labels are scarcer."""
    return 0.5 if ratio >= 0.5 else 1.0


@dataclass
class BatchView:
    """Logits of one mini-batch together with its label matrix.

    For category ``c`` the positive set holds the samples labeled +1 and the
    unlabeled set holds every sample of the batch.
    """

    logits: Tensor
    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.labels.shape != self.logits.shape:
            raise ValueError(f"labels {self.labels.shape} do not match logits {self.logits.shape}")

    @property
    def n_samples(self) -> int:
        return self.logits.shape[0]

    @property
    def n_categories(self) -> int:
        return self.logits.shape[1]

    def positives(self, c: int) -> np.ndarray:
        return np.flatnonzero(self.labels[:, c] == POSITIVE)

    def unlabeled(self, c: int) -> np.ndarray:
        return np.arange(self.n_samples)

    def negatives(self, c: int) -> np.ndarray:
        return np.flatnonzero(self.labels[:, c] == NEGATIVE)


@dataclass
class LossBreakdown:
    total: Tensor
    var: list[float] = field(default_factory=list)
    reg: list[float] = field(default_factory=list)
    pfactor: list[float] = field(default_factory=list)
    tau: list[float] = field(default_factory=list)
    missing_positive: list[bool] = field(default_factory=list)
    reg_weight: float = 1.0


class LossTermError(FloatingPointError):
    """A loss term became non-finite; carries the category and term name."""

    def __init__(self, category: int, term: str, cause: Exception):
        self.category = category
        self.term = term
        super().__init__(f"non-finite {term} term for category {category}: {cause}")


# ----------------------------------------------------------------- PN losses
def pn_bce_loss(logits, labels: np.ndarray) -> Tensor:
    """Mean binary cross-entropy over all N*C entries; unknown (0) entries add nothing."""
    logits = T.as_tensor(logits)
    labels = np.asarray(labels)
    if labels.shape != logits.shape:
        raise ValueError("labels and logits must have the same shape")
    n, c = logits.shape
    pos = (labels == POSITIVE).astype(np.float64)
    neg = (labels == NEGATIVE).astype(np.float64)
    per_entry = pos * T.softplus(-logits) + neg * T.softplus(logits)
    return T.sum(per_entry) / float(c * n)


def _check_prior(prior: float) -> None:
    if not 0.0 <= prior <= 1.0:
        raise ValueError(f"class prior must lie in [0, 1], got {prior}")


def _nonempty(x, name: str) -> Tensor:
    x = T.as_tensor(x)
    if x.size == 0:
        raise ValueError(f"{name} set is empty")
    return x


def pn_risk(logits_p, logits_n, prior: float) -> Tensor:
    """prior * E_P[-log sigmoid(s)] + (1 - prior) * E_N[-log(1 - sigmoid(s))]."""
    _check_prior(prior)
    sp, sn = _nonempty(logits_p, "positive"), _nonempty(logits_n, "negative")
    return prior * T.mean(T.softplus(-sp)) + (1.0 - prior) * T.mean(T.softplus(sn))


def upu_risk(logits_p, logits_u, prior: float) -> Tensor:
    """Unbiased PU risk: the negative expectation rewritten with unlabeled data."""
    _check_prior(prior)
    sp, su = _nonempty(logits_p, "positive"), _nonempty(logits_u, "unlabeled")
    return (prior * T.mean(T.softplus(-sp)) - prior * T.mean(T.softplus(sp))
            + T.mean(T.softplus(su)))


# ----------------------------------------------------------------- PU losses
def var_loss_category(view: BatchView, c: int, p_factor: float = 1.0, tau: float = 1.0) -> Tensor:
    """Variational PU loss of category ``c``; the positive term is dropped when
    the batch holds no positive of ``c``."""
    if view.n_samples == 0:
        raise ValueError("empty batch")
    if not 0 < tau:
        raise ValueError("temperature must be positive")
    s = view.logits[:, c]
    if tau != 1.0:
        s = T.scalar_mul(s, 1.0 / tau)
    log_p = T.log_sigmoid(s)
    # log of the mean unlabeled probability, computed in log space
    unlabeled = view.unlabeled(c)
    log_u = log_p if len(unlabeled) == view.n_samples else log_p[unlabeled]
    u_term = T.logsumexp(log_u) - math.log(len(unlabeled))
    loss = u_term if p_factor == 1.0 else T.scalar_mul(u_term, p_factor)
    pos = view.positives(c)
    if len(pos):
        loss = loss - T.mean(log_p[pos])
    return loss


def rebalance_factor(view: BatchView, c: int, gamma: float) -> float:
    """p_c ** gamma with p_c the mean sigmoid over the unlabeled set (no temperature)."""
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    s = view.logits.data[view.unlabeled(c), c]
    p = float(np.mean(T._sigmoid(s)))
    return p ** gamma


def adaptive_temperature(view: BatchView, c: int, alpha: float, tau_floor: float = 1e-3) -> float:
    """clamp(alpha * population std of the category's logits, tau_floor, 1)."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    sd = float(np.std(view.logits.data[:, c]))
    return float(min(max(alpha * sd, tau_floor), 1.0))


def category_temperature(view: BatchView, c: int, cfg: PuLossConfig) -> float:
    if cfg.temperature is TemperatureMode.ADAPTIVE:
        return adaptive_temperature(view, c, cfg.alpha, cfg.tau_floor)
    if cfg.temperature is TemperatureMode.FIXED:
        return float(cfg.fixed_tau)
    return 1.0


def mixup_reg_category(model: Callable, x_p, x_u, c: int, beta_mix: float,
                       rng: Optional[np.random.Generator] = None, mu: Optional[float] = None,
                       logits_p: Optional[np.ndarray] = None,
                       logits_u: Optional[np.ndarray] = None) -> Tensor:
    """MixUp consistency term of category ``c``.

    ``x_p`` rows are paired with ``x_u`` rows (a single positive row is
    broadcast).  With mixing weight ``mu ~ Beta(beta_mix, beta_mix)`` the mixed
    input is ``mu*x_p + (1-mu)*x_u`` and the target is the same convex
    combination of the endpoint log-probabilities, held constant.  Returns the
    mean squared gap between the mixed log-probability and the target.
    ``logits_p``/``logits_u`` may carry precomputed endpoint logits of ``c``.
    """
    x_p = np.asarray(x_p, dtype=np.float64)
    x_u = np.asarray(x_u, dtype=np.float64)
    if len(x_p) == 0 or len(x_u) == 0:
        return Tensor(0.0)
    if mu is None:
        if rng is None:
            raise ValueError("either rng or mu is required")
        mu = float(rng.beta(beta_mix, beta_mix))
    if len(x_p) == 1 and len(x_u) > 1:
        x_p = np.broadcast_to(x_p, x_u.shape)
        if logits_p is not None:
            logits_p = np.broadcast_to(logits_p, (len(x_u),))
    if logits_p is None or logits_u is None:
        with no_grad():
            logits_p = model(Tensor(x_p)).data[:, c]
            logits_u = model(Tensor(x_u)).data[:, c]
    log_sig = lambda s: -np.logaddexp(0.0, -np.asarray(s))  # noqa: E731
    target = mu * log_sig(logits_p) + (1.0 - mu) * log_sig(logits_u)
    mixed = Tensor(mu * x_p + (1.0 - mu) * x_u)
    gap = T.log_sigmoid(model(mixed)[:, c]) - target
    return T.mean(gap * gap)


def pu_mlc_loss(view: BatchView, features: Optional[np.ndarray], model: Optional[Callable],
                cfg: PuLossConfig, rng: Optional[np.random.Generator] = None,
                frozen_logits: Optional[np.ndarray] = None) -> LossBreakdown:
    """Sum over categories of the re-balanced, temperature-scaled variational
    loss plus ``cfg.reg_weight`` times the MixUp term.

    Every stop-gradient quantity (temperature, re-balance factor, MixUp
    targets) is derived from ``frozen_logits`` when given, otherwise from the
    current logits.
    """
    const = view if frozen_logits is None else BatchView(Tensor(frozen_logits), view.labels)
    out = LossBreakdown(total=Tensor(0.0), reg_weight=cfg.reg_weight)
    total = None
    use_reg = cfg.reg_weight > 0
    if use_reg and (model is None or features is None or rng is None):
        raise ValueError("the MixUp term needs the model, the batch features and an rng")
    for c in range(view.n_categories):
        tau = category_temperature(const, c, cfg)
        pf = rebalance_factor(const, c, cfg.gamma)
        pos = view.positives(c)
        try:
            var_c = var_loss_category(view, c, pf, tau)
        except NonFiniteError as exc:
            raise LossTermError(c, "var", exc) from exc
        term = var_c
        reg_value = 0.0
        if use_reg and len(pos):
            partner = pos[rng.integers(0, len(pos), size=view.n_samples)]
            try:
                reg_c = mixup_reg_category(model, features[partner], features, c, cfg.mix_beta, rng,
                                           logits_p=const.logits.data[partner, c],
                                           logits_u=const.logits.data[:, c])
            except NonFiniteError as exc:
                raise LossTermError(c, "reg", exc) from exc
            term = var_c + cfg.reg_weight * reg_c if cfg.reg_weight != 1.0 else var_c + reg_c
            reg_value = reg_c.item()
        total = term if total is None else total + term
        out.var.append(var_c.item())
        out.reg.append(reg_value)
        out.pfactor.append(pf)
        out.tau.append(tau)
        out.missing_positive.append(len(pos) == 0)
    out.total = total
    return out
