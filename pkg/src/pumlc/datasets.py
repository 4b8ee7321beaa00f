"""Synthetic multi-label data, label-availability protocols and dataset I/O.

Labels live in an ``int8`` matrix with entries +1 (positive), -1 (negative)
and 0 (unknown).
"""
from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from . import container

POSITIVE, NEGATIVE, UNKNOWN = 1, -1, 0
MANIFEST_VERSION = 1


class MaskSetting(str, enum.Enum):
    FULL_PN = "pn"
    PARTIAL_PN = "partial"
    POSITIVE_ONLY = "pu"


@dataclass(frozen=True)
class MaskSpec:
    setting: MaskSetting
    ratio: float = 1.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "setting", MaskSetting(self.setting))
        if not 0.0 < self.ratio <= 1.0:
            raise ValueError(f"mask ratio must lie in (0, 1], got {self.ratio}")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ValueError("mask seed must be an unsigned 64-bit integer")

    def to_dict(self) -> dict:
        return {"setting": self.setting.value, "ratio": self.ratio, "seed": int(self.seed)}

    @classmethod
    def from_dict(cls, d: dict) -> "MaskSpec":
        return cls(MaskSetting(d["setting"]), float(d.get("ratio", 1.0)), int(d.get("seed", 0)))


@dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    category_names: tuple[str, ...]
    seed: int = 0
    generator: str = "unknown"
    params: dict = field(default_factory=dict)
    mask: Optional[MaskSpec] = None

    def __post_init__(self):
        features = np.array(self.features, dtype=np.float64)
        labels = np.array(self.labels, dtype=np.int8)
        if labels.ndim != 2:
            raise ValueError("labels must be an n_samples x n_categories matrix")
        if features.shape[0] != labels.shape[0]:
            raise ValueError(f"{features.shape[0]} feature rows but {labels.shape[0]} label rows")
        if not np.isin(labels, (POSITIVE, NEGATIVE, UNKNOWN)).all():
            raise ValueError("label entries must be +1, -1 or 0")
        if len(self.category_names) != labels.shape[1]:
            raise ValueError("one category name per label column is required")
        features.flags.writeable = False
        labels.flags.writeable = False
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "category_names", tuple(self.category_names))

    @property
    def n_samples(self) -> int:
        return self.labels.shape[0]

    @property
    def n_categories(self) -> int:
        return self.labels.shape[1]

    @property
    def setting(self) -> MaskSetting:
        return self.mask.setting if self.mask is not None else MaskSetting.FULL_PN

    def subset(self, index) -> "Dataset":
        return Dataset(self.features[index], self.labels[index], self.category_names,
                       self.seed, self.generator, dict(self.params), self.mask)

    def equals(self, other: "Dataset") -> bool:
        return (np.array_equal(self.features, other.features)
                and self.features.dtype == other.features.dtype
                and np.array_equal(self.labels, other.labels)
                and self.category_names == other.category_names
                and self.seed == other.seed and self.generator == other.generator
                and self.params == other.params and self.mask == other.mask)


def split(dataset: Dataset, n_first: int) -> tuple[Dataset, Dataset]:
    """Split into the first ``n_first`` samples and the rest."""
    return dataset.subset(slice(0, n_first)), dataset.subset(slice(n_first, None))


# ----------------------------------------------------------------- generators
def generate_synthetic_vectors(n: int, d: int, n_categories: int, seed: int,
                               separation: float = 4.0) -> Dataset:
    """Sum-of-prototypes vectors with per-category inclusion rates in [0.05, 0.4].

    Each category owns a random unit direction; a sample is the sum of the
    directions of its positive categories plus N(0, 1/separation^2) noise.
    """
    if n < 1 or d < 1 or n_categories < 1:
        raise ValueError("n, d and n_categories must all be at least 1")
    if separation <= 0:
        raise ValueError("separation must be positive")
    rng = np.random.default_rng(seed)
    prototypes = rng.normal(size=(n_categories, d))
    prototypes /= np.linalg.norm(prototypes, axis=1, keepdims=True)
    rates = rng.uniform(0.05, 0.4, size=n_categories)
    present = rng.random((n, n_categories)) < rates
    noise = rng.normal(size=(n, d))
    features = present.astype(np.float64) @ prototypes
    if np.isfinite(separation):
        features = features + noise / separation
    labels = np.where(present, POSITIVE, NEGATIVE)
    params = {"n": n, "d": d, "n_categories": n_categories,
              "separation": separation if np.isfinite(separation) else "inf",
              "rates": rates.tolist()}
    return Dataset(features, labels, tuple(f"cat{c}" for c in range(n_categories)),
                   seed, "vectors", params)


_GLYPHS = [
    ["#####", "#...#", "#...#", "#...#", "#####"],  # square outline
    ["..#..", "..#..", "#####", "..#..", "..#.."],  # plus
    ["#...#", ".#.#.", "..#..", ".#.#.", "#...#"],  # cross
    ["..#..", ".#.#.", "#...#", ".#.#.", "..#.."],  # diamond
    ["#....", "#....", "#....", "#....", "#####"],  # L
    ["#####", "..#..", "..#..", "..#..", "..#.."],  # T
    ["#####", ".....", "#####", ".....", "#####"],  # bars
    ["#.#.#", ".....", "#.#.#", ".....", "#.#.#"],  # dots
    ["....#", "...#.", "..#..", ".#...", "#...."],  # diagonal
    ["#####", "#####", "#####", "#####", "#####"],  # filled block
]
GLYPHS = np.array([[[ch == "#" for ch in row] for row in g] for g in _GLYPHS], dtype=np.float64)
MAX_GLYPHS_PER_IMAGE = 4


def generate_synthetic_images(n: int, n_categories: int, hw: int, seed: int,
                              channels: int = 1, placement_prob: float = 0.3,
                              noise: float = 0.05) -> Dataset:
    """Images holding 0-4 category glyphs, one per image quadrant.

    Each category is present independently with ``placement_prob``; samples
    with more than four categories are redrawn, so for ``n_categories <= 4``
    the per-category frequency is exactly ``placement_prob``.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    if hw < 16:
        raise ValueError(f"image size must be at least 16, got {hw}")
    if n_categories > len(GLYPHS):
        raise ValueError(f"only {len(GLYPHS)} glyphs are available, asked for {n_categories}")
    if channels not in (1, 3):
        raise ValueError("channels must be 1 or 3")
    rng = np.random.default_rng(seed)
    half = hw // 2
    glyph = GLYPHS.shape[1]
    images = np.zeros((n, channels, hw, hw))
    present = np.zeros((n, n_categories), dtype=bool)
    for i in range(n):
        while True:
            draw = rng.random(n_categories) < placement_prob
            if draw.sum() <= MAX_GLYPHS_PER_IMAGE:
                break
        present[i] = draw
        cats = np.flatnonzero(draw)
        quadrants = rng.permutation(4)[: len(cats)]
        for c, q in zip(cats, quadrants):
            top = (q // 2) * half + rng.integers(0, half - glyph + 1)
            left = (q % 2) * half + rng.integers(0, half - glyph + 1)
            images[i, :, top:top + glyph, left:left + glyph] = GLYPHS[c]
    images += noise * rng.normal(size=images.shape)
    labels = np.where(present, POSITIVE, NEGATIVE)
    params = {"n": n, "n_categories": n_categories, "hw": hw, "channels": channels,
              "placement_prob": placement_prob, "noise": noise}
    return Dataset(images, labels, tuple(f"glyph{c}" for c in range(n_categories)),
                   seed, "images", params)


# -------------------------------------------------------------------- masking
def kept_count(ratio: float, eligible: int) -> int:
    """floor(ratio * eligible), immune to binary rounding of the product."""
    return math.floor(round(ratio * eligible, 9))


def apply_mask(full: Dataset, spec: MaskSpec) -> Dataset:
    """Hide labels according to ``spec``, sampling each category independently."""
    if full.mask is not None or np.any(full.labels == UNKNOWN):
        raise ValueError("dataset is already masked")
    if spec.setting is MaskSetting.FULL_PN:
        return Dataset(full.features, full.labels, full.category_names, full.seed,
                       full.generator, dict(full.params), spec)
    rng = np.random.default_rng(spec.seed)
    labels = np.zeros_like(full.labels)
    for c in range(full.n_categories):
        column = full.labels[:, c]
        if spec.setting is MaskSetting.PARTIAL_PN:
            eligible = np.arange(full.n_samples)
        else:
            eligible = np.flatnonzero(column == POSITIVE)
        k = kept_count(spec.ratio, len(eligible))
        keep = eligible[rng.permutation(len(eligible))[:k]]
        labels[keep, c] = column[keep]
    return Dataset(full.features, labels, full.category_names, full.seed,
                   full.generator, dict(full.params), spec)


# ----------------------------------------------------------------- statistics
@dataclass(frozen=True, eq=False)
class LabelStats:
    positives: np.ndarray
    negatives: np.ndarray
    unknowns: np.ndarray

    @property
    def total_positives(self) -> int:
        return int(self.positives.sum())

    @property
    def total_negatives(self) -> int:
        return int(self.negatives.sum())

    @property
    def total_unknowns(self) -> int:
        return int(self.unknowns.sum())

    @property
    def total_known(self) -> int:
        return self.total_positives + self.total_negatives

    @property
    def total(self) -> int:
        return self.total_known + self.total_unknowns

    def positive_rates(self) -> np.ndarray:
        return self.positives / np.maximum(self.positives + self.negatives + self.unknowns, 1)


def label_stats(dataset: Union[Dataset, np.ndarray]) -> LabelStats:
    labels = dataset.labels if isinstance(dataset, Dataset) else np.asarray(dataset)
    return LabelStats((labels == POSITIVE).sum(axis=0).astype(np.int64),
                      (labels == NEGATIVE).sum(axis=0).astype(np.int64),
                      (labels == UNKNOWN).sum(axis=0).astype(np.int64))


def masked_counts(positives: int, negatives: int, spec: MaskSpec) -> tuple[int, int]:
    """(kept positives, kept negatives) of one fully labeled category under ``spec``."""
    if spec.setting is MaskSetting.FULL_PN:
        return positives, negatives
    if spec.setting is MaskSetting.POSITIVE_ONLY:
        return kept_count(spec.ratio, positives), 0
    raise ValueError("kept counts of a partial mask depend on the draw; use apply_mask")


@dataclass(frozen=True)
class AnnotationBudget:
    pu_positives: int
    pn_positives: int
    pn_negatives: int

    @property
    def pu_total(self) -> int:
        return self.pu_positives

    @property
    def pn_total(self) -> int:
        return self.pn_positives + self.pn_negatives

    @property
    def reduction(self) -> float:
        return 1.0 - self.pu_total / self.pn_total


def annotation_budget(positives, negatives, ratio: float) -> AnnotationBudget:
    """Annotations used by a positive-only run against a PN run at the same ratio.

    ``positives``/``negatives`` are per-category counts of the fully labeled
    data (scalars for a single category).  The PN reference keeps
    ``floor(ratio * P_c)`` positives and ``floor(ratio * N_c)`` negatives.
    """
    pos = np.atleast_1d(positives)
    neg = np.atleast_1d(negatives)
    kept_pos = int(np.sum([kept_count(ratio, int(p)) for p in pos]))
    kept_neg = int(np.sum([kept_count(ratio, int(q)) for q in neg]))
    return AnnotationBudget(kept_pos, kept_pos, kept_neg)


def format_stats(stats: LabelStats, names=None, budget: Optional[AnnotationBudget] = None) -> str:
    names = names or [f"cat{c}" for c in range(len(stats.positives))]
    width = max(8, *(len(n) for n in names))
    lines = [f"{'category':<{width}} {'positive':>10} {'negative':>10} {'unknown':>10}"]
    for name, p, q, u in zip(names, stats.positives, stats.negatives, stats.unknowns):
        lines.append(f"{name:<{width}} {p:>10d} {q:>10d} {u:>10d}")
    lines.append(f"{'total':<{width}} {stats.total_positives:>10d} "
                 f"{stats.total_negatives:>10d} {stats.total_unknowns:>10d}")
    if budget is not None:
        lines.append(f"annotations used: {budget.pu_total} vs {budget.pn_total} for PN "
                     f"at the same ratio (reduction {100 * budget.reduction:.1f}%)")
    return "\n".join(lines)


# ------------------------------------------------------------------------ I/O
def save_dataset(dataset: Dataset, path: Union[str, Path]) -> dict:
    """Write ``features.pumt``, ``labels.pumt`` and ``manifest.json`` into ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    crc_features = container.save(path / "features.pumt", dataset.features)
    crc_labels = container.save(path / "labels.pumt", dataset.labels)
    manifest = {
        "version": MANIFEST_VERSION,
        "seed": int(dataset.seed),
        "generator": dataset.generator,
        "params": dataset.params,
        "mask": dataset.mask.to_dict() if dataset.mask is not None else None,
        "crc32": {"features": crc_features, "labels": crc_labels},
        "category_names": list(dataset.category_names),
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_dataset(path: Union[str, Path]) -> Dataset:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    if manifest.get("version") != MANIFEST_VERSION:
        raise container.ContainerError(f"unsupported manifest version {manifest.get('version')}")
    crc = manifest.get("crc32", {})
    features = container.load(path / "features.pumt", crc.get("features"))
    labels = container.load(path / "labels.pumt", crc.get("labels"))
    mask = MaskSpec.from_dict(manifest["mask"]) if manifest.get("mask") else None
    return Dataset(features, labels, tuple(manifest["category_names"]), manifest.get("seed", 0),
                   manifest.get("generator", "unknown"), manifest.get("params", {}), mask)
