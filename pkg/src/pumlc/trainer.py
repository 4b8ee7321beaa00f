"""Training loop, checkpoints and hyper-parameter sweeps."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from . import container
from .datasets import Dataset, MaskSetting, MaskSpec, apply_mask
from .losses import BatchView, LossTermError, PuLossConfig, pn_bce_loss, pu_mlc_loss
from .metrics import MetricsReport, csv_header, evaluate
from .nn import Module, build_model
from .optim import Optimizer, make_optimizer
from .tensor import NonFiniteError, Tape, Tensor, backward

logger = logging.getLogger(__name__)

REQUIRED_KEYS = ("epochs", "batch_size", "learning_rate", "seed", "model", "loss")
HISTORY_COLUMNS = ("epoch", "total_loss", "mean_var", "mean_reg", "mean_tau", "mean_pfactor",
                   "mAP", "OF1", "CF1")


class ConfigError(ValueError):
    pass


class TrainingDivergedError(FloatingPointError):
    def __init__(self, epoch: int, category: Optional[int], term: str, cause: Exception):
        self.epoch, self.category, self.term = epoch, category, term
        where = f"category {category}, " if category is not None else ""
        super().__init__(f"non-finite loss at epoch {epoch} ({where}term {term}): {cause}")


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 1e-3
    seed: int = 0
    model: dict = field(default_factory=lambda: {"kind": "mlp", "hidden": [64]})
    loss: PuLossConfig = field(default_factory=PuLossConfig)
    loss_kind: str = "pu_mlc"
    optimizer: dict = field(default_factory=lambda: {"kind": "adam"})
    mask: Optional[MaskSpec] = None
    eval_every: int = 0

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = PuLossConfig.from_dict(self.loss)
        if isinstance(self.mask, dict):
            self.mask = MaskSpec.from_dict(self.mask)
        if self.epochs < 1:
            raise ConfigError("epochs must be at least 1")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be non-negative")
        if self.loss_kind not in ("pu_mlc", "pn_bce"):
            raise ConfigError(f"unknown loss_kind {self.loss_kind!r}")

    def to_dict(self) -> dict:
        return {"epochs": self.epochs, "batch_size": self.batch_size,
                "learning_rate": self.learning_rate, "seed": int(self.seed),
                "model": self.model, "loss": self.loss.to_dict(), "loss_kind": self.loss_kind,
                "optimizer": self.optimizer,
                "mask": self.mask.to_dict() if self.mask is not None else None,
                "eval_every": self.eval_every}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        missing = [k for k in REQUIRED_KEYS if k not in d]
        if missing:
            raise ConfigError(f"config is missing keys: {', '.join(missing)}")
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError(f"config has unknown keys: {', '.join(sorted(unknown))}")
        try:
            return cls(**d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


def load_config(path: Union[str, Path]) -> TrainConfig:
    return TrainConfig.from_dict(json.loads(Path(path).read_text()))


def config_hash(config: TrainConfig) -> str:
    """Hash of everything that shapes the trajectory except the epoch budget."""
    d = config.to_dict()
    d.pop("epochs")
    d.pop("eval_every")
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def learning_rate_at(config: TrainConfig, epoch: int) -> float:
    """Constant rate, or step decay when the optimizer spec has ``step_size``/``decay``."""
    step = config.optimizer.get("step_size")
    if not step:
        return config.learning_rate
    return config.learning_rate * config.optimizer.get("decay", 0.1) ** (epoch // int(step))


# ----------------------------------------------------------------- checkpoints
def save_checkpoint(path: Union[str, Path], model: Module, optimizer: Optimizer,
                    rng: np.random.Generator, epoch: int, config: TrainConfig,
                    history: Sequence[dict], shapes: Optional[dict] = None) -> None:
    path = Path(path)
    (path / "params").mkdir(parents=True, exist_ok=True)
    (path / "optimizer").mkdir(parents=True, exist_ok=True)
    crc = {}
    for name, arr in model.state_dict().items():
        crc[f"params/{name}"] = container.save(path / "params" / f"{name}.pumt", arr)
    for name, arr in optimizer.state_arrays().items():
        crc[f"optimizer/{name}"] = container.save(path / "optimizer" / f"{name}.pumt", arr)
    state = {"epoch": epoch, "step_count": optimizer.step_count,
             "rng_state": rng.bit_generator.state, "config_hash": config_hash(config),
             "config": config.to_dict(), "history": list(history), "crc32": crc,
             "shapes": shapes}
    (path / "state.json").write_text(json.dumps(state, indent=2, sort_keys=True) + "\n")


def _read_arrays(path: Path, prefix: str, crc: dict) -> dict[str, np.ndarray]:
    return {f.name[:-5]: container.load(f, crc.get(f"{prefix}/{f.name[:-5]}"))
            for f in sorted((path / prefix).glob("*.pumt"))}


def load_model(path: Union[str, Path]) -> tuple[Module, TrainConfig]:
    """Rebuild the model stored in a checkpoint directory."""
    path = Path(path)
    state = json.loads((path / "state.json").read_text())
    config = TrainConfig.from_dict(state["config"])
    shapes = state.get("shapes")
    if not shapes:
        raise ConfigError(f"checkpoint {path} does not record the model input shape")
    model = build_model(config.model, shapes["input"], shapes["categories"], np.random.default_rng(0))
    model.load_state_dict(_read_arrays(path, "params", state.get("crc32", {})))
    return model, config


# ---------------------------------------------------------------------- train
@dataclass
class TrainResult:
    model: Module
    history: list[dict]
    optimizer: Optimizer
    rng: np.random.Generator

    def __iter__(self):
        return iter((self.model, self.history))


def _batches(rng: np.random.Generator, n: int, batch_size: int) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [b for b in (order[i:i + batch_size] for i in range(0, n, batch_size)) if len(b) >= 2]


def _check_training_labels(dataset: Dataset, config: TrainConfig) -> None:
    if config.mask is not None and dataset.setting is not config.mask.setting:
        raise ConfigError(f"dataset is masked as {dataset.setting.value!r} but the config "
                          f"expects {config.mask.setting.value!r}")


def train(config: TrainConfig, dataset: Dataset, eval_dataset: Optional[Dataset] = None,
          checkpoint_dir: Union[str, Path, None] = None,
          resume_from: Union[str, Path, None] = None) -> TrainResult:
    """Train a model on ``dataset``; deterministic given ``config.seed``.

    With ``checkpoint_dir`` a checkpoint is written after the last epoch;
    ``resume_from`` continues a checkpointed run up to ``config.epochs``.
    """
    _check_training_labels(dataset, config)
    rng = np.random.default_rng(config.seed)
    features = dataset.features
    model = build_model(config.model, features.shape[1:], dataset.n_categories, rng)
    optimizer = make_optimizer(config.optimizer, model.parameters(), config.learning_rate)
    history: list[dict] = []
    start = 0
    if resume_from is not None:
        resume_from = Path(resume_from)
        state = json.loads((resume_from / "state.json").read_text())
        if state["config_hash"] != config_hash(config):
            raise ConfigError("checkpoint was written by a different configuration")
        crc = state.get("crc32", {})
        model.load_state_dict(_read_arrays(resume_from, "params", crc))
        optimizer.load_state_arrays(_read_arrays(resume_from, "optimizer", crc), state["step_count"])
        rng.bit_generator.state = state["rng_state"]
        history = list(state["history"])
        start = state["epoch"]
    positive_only = dataset.setting is MaskSetting.POSITIVE_ONLY

    model.train()
    for epoch in range(start, config.epochs):
        optimizer.lr = learning_rate_at(config, epoch)
        sums = dict.fromkeys(("total_loss", "mean_var", "mean_reg", "mean_tau", "mean_pfactor"), 0.0)
        batches = _batches(rng, dataset.n_samples, config.batch_size)
        for idx in batches:
            labels = dataset.labels[idx]
            if positive_only and np.any(labels == -1):
                raise AssertionError("negative label reached a positive-only training batch")
            with Tape():
                try:
                    logits = model(Tensor(features[idx]))
                    if config.loss_kind == "pn_bce":
                        loss = pn_bce_loss(logits, labels)
                        stats = (0.0, 0.0, 1.0, 1.0)
                    else:
                        br = pu_mlc_loss(BatchView(logits, labels), features[idx], model,
                                         config.loss, rng)
                        loss = br.total
                        stats = (np.mean(br.var), np.mean(br.reg), np.mean(br.tau), np.mean(br.pfactor))
                except LossTermError as exc:
                    raise TrainingDivergedError(epoch + 1, exc.category, exc.term, exc) from exc
                except NonFiniteError as exc:
                    raise TrainingDivergedError(epoch + 1, None, exc.op, exc) from exc
                optimizer.zero_grad()
                backward(loss)
                optimizer.step()
            sums["total_loss"] += loss.item()
            for key, value in zip(("mean_var", "mean_reg", "mean_tau", "mean_pfactor"), stats):
                sums[key] += float(value)
        row = {"epoch": epoch + 1, **{k: v / max(len(batches), 1) for k, v in sums.items()}}
        if eval_dataset is not None and config.eval_every and (epoch + 1) % config.eval_every == 0:
            report = evaluate(model, eval_dataset)
            row.update({"mAP": report.map, "OF1": report.of1, "CF1": report.cf1})
            model.train()
        history.append(row)
        logger.info("epoch %d loss %.6f", epoch + 1, row["total_loss"])

    if checkpoint_dir is not None:
        shapes = {"input": list(features.shape[1:]), "categories": dataset.n_categories}
        save_checkpoint(checkpoint_dir, model, optimizer, rng, config.epochs, config, history, shapes)
    return TrainResult(model, history, optimizer, rng)


def write_history_csv(history: Sequence[dict], path: Union[str, Path]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(HISTORY_COLUMNS)
        for row in history:
            writer.writerow([row.get(col, "") if col == "epoch" else
                             (repr(float(row[col])) if col in row else "") for col in HISTORY_COLUMNS])


# ---------------------------------------------------------------------- sweep
@dataclass
class SweepRow:
    gamma: float
    alpha: float
    ratio: float
    seed: int
    report: Optional[MetricsReport]
    error: Optional[str] = None

    @property
    def run_id(self) -> str:
        return f"g{self.gamma:g}-a{self.alpha:g}-r{self.ratio:g}-s{self.seed}"


def sweep(base: TrainConfig, full_train: Dataset, test: Dataset,
          gammas: Iterable[float], alphas: Iterable[float], ratios: Iterable[float],
          seeds: Iterable[int], setting: MaskSetting = MaskSetting.POSITIVE_ONLY) -> list[SweepRow]:
    """Train and evaluate one cell per (gamma, alpha, ratio, seed), in that nesting order.

    The cell seed drives both the label mask and the training run.  A failing
    cell is recorded with its error and the sweep moves on.
    """
    rows = []
    gammas, alphas, ratios, seeds = map(list, (gammas, alphas, ratios, seeds))
    for g in gammas:
        for a in alphas:
            for r in ratios:
                for s in seeds:
                    mask = MaskSpec(setting, r, s)
                    cfg = base.replace(seed=s, mask=mask,
                                       loss=dataclasses.replace(base.loss, gamma=g, alpha=a))
                    try:
                        result = train(cfg, apply_mask(full_train, mask))
                        rows.append(SweepRow(g, a, r, s, evaluate(result.model, test)))
                    except Exception as exc:  # noqa: BLE001 - recorded per cell
                        logger.warning("sweep cell g=%s a=%s r=%s s=%s failed: %s", g, a, r, s, exc)
                        rows.append(SweepRow(g, a, r, s, None, f"{type(exc).__name__}: {exc}"))
    return rows


def write_sweep_csv(rows: Sequence[SweepRow], n_categories: int, path: Union[str, Path],
                    setting: MaskSetting = MaskSetting.POSITIVE_ONLY) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(csv_header(n_categories))
        for row in rows:
            if row.report is not None:
                writer.writerow(row.report.csv_row(row.run_id, setting.value, row.ratio, row.seed))
            else:
                writer.writerow([row.run_id, setting.value, repr(float(row.ratio)), row.seed,
                                 *["nan"] * (3 + n_categories)])
