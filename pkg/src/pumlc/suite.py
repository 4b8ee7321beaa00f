"""The separable synthetic vector suite used for end-to-end checks and calibration."""
from __future__ import annotations

import dataclasses
from typing import Iterable

from .datasets import Dataset, MaskSetting, MaskSpec, apply_mask, generate_synthetic_vectors, split
from .losses import PuLossConfig, default_gamma
from .metrics import evaluate
from .trainer import TrainConfig, train

N_TRAIN, N_TEST = 2000, 500
DIM, CATEGORIES = 32, 8
DATA_SEED = 7
SEPARATION = 8.0
EPOCHS = 30


def vector_suite() -> tuple[Dataset, Dataset]:
    """Fully labeled (train, test) split of the suite."""
    full = generate_synthetic_vectors(N_TRAIN + N_TEST, DIM, CATEGORIES, DATA_SEED, SEPARATION)
    return split(full, N_TRAIN)


def suite_config(ratio: float, seed: int, gamma: float | None = None, epochs: int = EPOCHS) -> TrainConfig:
    g = default_gamma(ratio) if gamma is None else gamma
    return TrainConfig(epochs=epochs, batch_size=64, learning_rate=1e-3, seed=seed,
                       model={"kind": "mlp", "hidden": [64]},
                       loss=PuLossConfig(gamma=g),
                       mask=MaskSpec(MaskSetting.POSITIVE_ONLY, ratio, seed))


def run_cell(train_full: Dataset, test: Dataset, config: TrainConfig) -> float:
    """Mask, train and return the test mAP of one configuration."""
    result = train(config, apply_mask(train_full, config.mask))
    return evaluate(result.model, test).map


def calibrate(ratios: Iterable[float] = (0.5, 0.1), seeds: Iterable[int] = (0, 1, 2)) -> dict:
    """Test mAP per ratio and seed with the default re-balance exponent."""
    train_full, test = vector_suite()
    out = {}
    for r in ratios:
        out[repr(float(r))] = {str(s): run_cell(train_full, test, suite_config(r, s)) for s in seeds}
    return out


def with_gamma(config: TrainConfig, gamma: float) -> TrainConfig:
    return config.replace(loss=dataclasses.replace(config.loss, gamma=gamma))
