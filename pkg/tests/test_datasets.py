import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pumlc.container import ContainerError
from pumlc.datasets import (Dataset, LabelStats, MaskSetting, MaskSpec, annotation_budget, apply_mask,
                            generate_synthetic_images, generate_synthetic_vectors, kept_count,
                            label_stats, load_dataset, masked_counts, save_dataset)
from pumlc.losses import pn_bce_loss
from pumlc.metrics import evaluate
from pumlc.trainer import TrainConfig, train

# full-label counts of the large benchmark, and its 10% positive-only column
BENCH_POS, BENCH_NEG = 241_035, 6_381_605


def toy(n=120, c=4, seed=0):
    rng = np.random.default_rng(seed)
    labels = np.where(rng.random((n, c)) < 0.3, 1, -1)
    return Dataset(rng.normal(size=(n, 3)), labels, tuple(f"c{i}" for i in range(c)))


# ---------------------------------------------------------------- generators
def test_vectors_reject_empty():
    with pytest.raises(ValueError):
        generate_synthetic_vectors(0, 4, 2, seed=0)


def test_vectors_are_deterministic():
    a = generate_synthetic_vectors(50, 6, 3, seed=5)
    b = generate_synthetic_vectors(50, 6, 3, seed=5)
    c = generate_synthetic_vectors(50, 6, 3, seed=6)
    assert a.equals(b)
    assert not a.equals(c)


def test_vector_positive_rates_within_configured_range():
    ds = generate_synthetic_vectors(20_000, 8, 10, seed=1)
    rates = ds.params["rates"]
    observed = (ds.labels == 1).mean(axis=0)
    sigma = np.sqrt(np.array(rates) * (1 - np.array(rates)) / ds.n_samples)
    assert np.all(np.abs(observed - rates) <= 3 * sigma + 1e-12)
    assert 0.05 <= observed.mean() <= 0.4


def test_noise_free_vectors_are_linearly_decodable():
    ds = generate_synthetic_vectors(1_500, 16, 5, seed=2, separation=float("inf"))
    train_set, test_set = ds.subset(slice(0, 1_000)), ds.subset(slice(1_000, None))
    cfg = TrainConfig(epochs=40, batch_size=50, learning_rate=0.05, seed=0,
                      model={"kind": "linear"}, loss_kind="pn_bce")
    model, _ = train(cfg, train_set)
    assert evaluate(model, test_set).map >= 0.99


def test_images_reject_small_size_and_too_many_categories():
    with pytest.raises(ValueError):
        generate_synthetic_images(4, 3, hw=15, seed=0)
    with pytest.raises(ValueError):
        generate_synthetic_images(4, 11, hw=32, seed=0)


def test_images_are_deterministic_and_blank_images_are_all_negative():
    a = generate_synthetic_images(60, 4, 16, seed=3, noise=0.0)
    b = generate_synthetic_images(60, 4, 16, seed=3, noise=0.0)
    assert a.equals(b)
    blank = np.all(a.labels == -1, axis=1)
    assert blank.any()
    assert not a.features[blank].any()
    assert a.features[~blank].reshape((~blank).sum(), -1).any(axis=1).all()
    assert np.all((a.labels == 1).sum(axis=1) <= 4)


def test_image_glyph_frequency_matches_placement_probability():
    n, p = 2_000, 0.3
    ds = generate_synthetic_images(n, 4, 16, seed=4, placement_prob=p)
    freq = (ds.labels == 1).mean(axis=0)
    assert np.all(np.abs(freq - p) <= 3 * math.sqrt(p * (1 - p) / n))


def test_dataset_is_immutable():
    ds = toy()
    with pytest.raises(ValueError):
        ds.labels[0, 0] = 0
    with pytest.raises(AttributeError):
        ds.seed = 3


def test_dataset_rejects_bad_labels():
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 1)), np.array([[2], [1]]), ("a",))
    with pytest.raises(ValueError):
        Dataset(np.zeros((3, 1)), np.array([[1], [1]]), ("a",))


# ------------------------------------------------------------------- masking
def test_kept_count_floor():
    assert kept_count(0.1, BENCH_POS) == 24_103
    assert kept_count(0.1, BENCH_NEG) == 638_160
    # 0.7 * 10 is 6.999... in binary; the floor must still give 7
    assert kept_count(0.7, 10) == 7


def test_positive_only_on_benchmark_counts():
    spec = MaskSpec(MaskSetting.POSITIVE_ONLY, 0.10)
    assert masked_counts(BENCH_POS, BENCH_NEG, spec) == (24_103, 0)


def test_benchmark_annotation_reduction():
    budget = annotation_budget(BENCH_POS, BENCH_NEG, 0.10)
    assert budget.pu_total == 24_103
    assert budget.pn_total == 24_103 + 638_160 == 662_263
    assert round(100 * budget.reduction, 1) == 96.4


def test_benchmark_full_label_total():
    stats = LabelStats(np.array([BENCH_POS]), np.array([BENCH_NEG]), np.array([0]))
    assert stats.total == 6_622_640


def test_positive_only_full_ratio_keeps_all_positives():
    ds = toy()
    masked = apply_mask(ds, MaskSpec(MaskSetting.POSITIVE_ONLY, 1.0, 0))
    assert np.array_equal(masked.labels == 1, ds.labels == 1)
    assert not np.any(masked.labels == -1)


def test_partial_keeps_exact_count_per_category():
    ds = toy(n=100)
    masked = apply_mask(ds, MaskSpec(MaskSetting.PARTIAL_PN, 0.5, 9))
    assert np.all((masked.labels != 0).sum(axis=0) == 50)


def test_full_setting_is_unchanged():
    ds = toy()
    masked = apply_mask(ds, MaskSpec(MaskSetting.FULL_PN))
    assert np.array_equal(masked.labels, ds.labels)
    assert masked.setting is MaskSetting.FULL_PN


def test_already_masked_is_rejected():
    masked = apply_mask(toy(), MaskSpec(MaskSetting.POSITIVE_ONLY, 0.5))
    with pytest.raises(ValueError, match="already masked"):
        apply_mask(masked, MaskSpec(MaskSetting.POSITIVE_ONLY, 0.5))


def test_mask_spec_validation():
    for bad in (0.0, -0.1, 1.5):
        with pytest.raises(ValueError):
            MaskSpec(MaskSetting.PARTIAL_PN, bad)


def test_seeds_select_different_entries():
    ds = toy(n=200)
    a = apply_mask(ds, MaskSpec(MaskSetting.PARTIAL_PN, 0.3, 1))
    b = apply_mask(ds, MaskSpec(MaskSetting.PARTIAL_PN, 0.3, 1))
    c = apply_mask(ds, MaskSpec(MaskSetting.PARTIAL_PN, 0.3, 2))
    assert np.array_equal(a.labels, b.labels)
    assert not np.array_equal(a.labels, c.labels)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 150), st.integers(1, 5), st.floats(0.01, 1.0),
       st.sampled_from(list(MaskSetting)), st.integers(0, 2 ** 63))
def test_mask_invariants(n, c, ratio, setting, seed):
    ds = toy(n=n, c=c, seed=seed % 1000)
    masked = apply_mask(ds, MaskSpec(setting, ratio, seed))
    changed = masked.labels != ds.labels
    # entries only ever become unknown
    assert np.all(masked.labels[changed] == 0)
    known = (masked.labels != 0).sum(axis=0)
    if setting is MaskSetting.POSITIVE_ONLY:
        assert not np.any(masked.labels == -1)
        expected = [kept_count(ratio, p) for p in (ds.labels == 1).sum(axis=0)]
    elif setting is MaskSetting.PARTIAL_PN:
        expected = [kept_count(ratio, n)] * c
    else:
        expected = [n] * c
    assert known.tolist() == expected
    stats = label_stats(masked)
    assert np.all(stats.positives + stats.negatives + stats.unknowns == n)


def test_label_stats_all_positive():
    stats = label_stats(np.ones((5, 3), dtype=np.int8))
    assert stats.positives.tolist() == [5, 5, 5]
    assert stats.total_negatives == 0 and stats.total_unknowns == 0


# ----------------------------------------------------------------------- I/O
def test_save_load_round_trip(tmp_path):
    ds = apply_mask(generate_synthetic_vectors(40, 5, 3, seed=8), MaskSpec(MaskSetting.POSITIVE_ONLY, 0.5, 4))
    save_dataset(ds, tmp_path / "d")
    back = load_dataset(tmp_path / "d")
    assert back.equals(ds)
    manifest = json.loads((tmp_path / "d" / "manifest.json").read_text())
    assert set(manifest) == {"version", "seed", "generator", "params", "mask", "crc32", "category_names"}
    assert set(manifest["mask"]) == {"setting", "ratio", "seed"}


def test_unmasked_dataset_loads_as_full_pn(tmp_path):
    save_dataset(toy(), tmp_path / "d")
    assert json.loads((tmp_path / "d" / "manifest.json").read_text())["mask"] is None
    assert load_dataset(tmp_path / "d").setting is MaskSetting.FULL_PN


def test_corrupted_magic_is_rejected(tmp_path):
    save_dataset(toy(), tmp_path / "d")
    path = tmp_path / "d" / "features.pumt"
    path.write_bytes(b"JUNK" + path.read_bytes()[4:])
    with pytest.raises(ContainerError):
        load_dataset(tmp_path / "d")


def test_payload_checksum_is_verified(tmp_path):
    save_dataset(toy(), tmp_path / "d")
    path = tmp_path / "d" / "labels.pumt"
    raw = bytearray(path.read_bytes())
    raw[-1] = 1 if raw[-1] != 1 else 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(ContainerError, match="checksum"):
        load_dataset(tmp_path / "d")


def test_pn_bce_ignores_unknown_entries():
    logits = np.array([[0.3, -1.0]])
    assert pn_bce_loss(logits, np.array([[1, 0]])).item() == pytest.approx(np.logaddexp(0, -0.3) / 2)
