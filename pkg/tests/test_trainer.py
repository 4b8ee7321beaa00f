import csv
import json

import numpy as np
import pytest

from pumlc import gradcheck as gc
from pumlc import tensor as T
from pumlc.datasets import (MaskSetting, MaskSpec, apply_mask, generate_synthetic_images,
                            generate_synthetic_vectors, split)
from pumlc.losses import PuLossConfig
from pumlc.metrics import evaluate
from pumlc.trainer import (HISTORY_COLUMNS, ConfigError, TrainConfig, TrainingDivergedError,
                           config_hash, learning_rate_at, load_model, sweep, train,
                           write_history_csv, write_sweep_csv)


@pytest.fixture(scope="module")
def data():
    full = generate_synthetic_vectors(300, 8, 3, seed=1, separation=6.0)
    train_full, test = split(full, 240)
    return train_full, test


def config(**kw):
    base = dict(epochs=3, batch_size=32, learning_rate=1e-2, seed=4,
                model={"kind": "mlp", "hidden": [16]}, loss=PuLossConfig(gamma=1.0),
                mask=MaskSpec(MaskSetting.POSITIVE_ONLY, 0.5, 4))
    base.update(kw)
    return TrainConfig(**base)


def pu(train_full, cfg):
    return apply_mask(train_full, cfg.mask)


# --------------------------------------------------------------------- config
def test_config_validation():
    with pytest.raises(ConfigError):
        config(epochs=0)
    with pytest.raises(ConfigError):
        config(batch_size=1)
    with pytest.raises(ConfigError):
        config(loss_kind="hinge")


def test_missing_keys_are_listed_together():
    with pytest.raises(ConfigError) as info:
        TrainConfig.from_dict({"epochs": 2})
    for key in ("batch_size", "learning_rate", "seed", "model", "loss"):
        assert key in str(info.value)


def test_config_round_trip_and_hash():
    cfg = config()
    back = TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert back.to_dict() == cfg.to_dict()
    assert config_hash(back) == config_hash(cfg) == config_hash(cfg.replace(epochs=9))
    assert config_hash(cfg.replace(seed=5)) != config_hash(cfg)
    with pytest.raises(ConfigError, match="unknown"):
        TrainConfig.from_dict({**cfg.to_dict(), "momentum": 0.9})


def test_step_decay_schedule():
    cfg = config(optimizer={"kind": "sgd", "step_size": 2, "decay": 0.5})
    assert [learning_rate_at(cfg, e) for e in range(5)] == [1e-2, 1e-2, 5e-3, 5e-3, 2.5e-3]
    assert learning_rate_at(config(), 7) == 1e-2


# ---------------------------------------------------------------------- train
def test_zero_learning_rate_keeps_parameters(data):
    train_full, _ = data
    cfg = config(learning_rate=0.0)
    init = config(epochs=1, learning_rate=0.0)
    a = train(cfg, pu(train_full, cfg))
    b = train(init, pu(train_full, init))
    for (name, p), (_, q) in zip(a.model.named_parameters(), b.model.named_parameters()):
        assert np.array_equal(p.data, q.data), name


def test_zero_learning_rate_with_fixed_batches_gives_constant_loss(data):
    train_full, _ = data
    cfg = config(learning_rate=0.0, batch_size=240, loss=PuLossConfig(gamma=1.0, reg_weight=0.0))
    _, history = train(cfg, pu(train_full, cfg))
    losses = [row["total_loss"] for row in history]
    assert max(losses) - min(losses) <= 1e-12 * abs(losses[0])


def test_training_is_deterministic(data):
    train_full, _ = data
    cfg = config()
    a = train(cfg, pu(train_full, cfg))
    b = train(cfg, pu(train_full, cfg))
    assert a.history == b.history
    for (_, p), (_, q) in zip(a.model.named_parameters(), b.model.named_parameters()):
        assert np.array_equal(p.data, q.data)


def test_training_reduces_the_loss_and_learns(data):
    train_full, test = data
    cfg = config(epochs=15)
    result = train(cfg, pu(train_full, cfg))
    assert result.history[-1]["total_loss"] < result.history[0]["total_loss"]
    assert evaluate(result.model, test).map > 0.8


def test_checkpoint_resume_matches_uninterrupted_run(tmp_path, data):
    train_full, test = data
    for opt in ({"kind": "adam"}, {"kind": "sgd", "momentum": 0.9}):
        full_cfg = config(epochs=4, optimizer=opt, eval_every=2)
        ds = pu(train_full, full_cfg)
        whole = train(full_cfg, ds, eval_dataset=test)
        ckpt = tmp_path / opt["kind"]
        train(full_cfg.replace(epochs=2), ds, eval_dataset=test, checkpoint_dir=ckpt)
        resumed = train(full_cfg, ds, eval_dataset=test, resume_from=ckpt)
        assert resumed.history == whole.history
        for (_, p), (_, q) in zip(whole.model.named_parameters(), resumed.model.named_parameters()):
            assert np.array_equal(p.data, q.data)


def test_resume_rejects_other_configuration(tmp_path, data):
    train_full, _ = data
    cfg = config(epochs=1)
    train(cfg, pu(train_full, cfg), checkpoint_dir=tmp_path / "c")
    with pytest.raises(ConfigError):
        train(cfg.replace(epochs=2, learning_rate=0.5), pu(train_full, cfg), resume_from=tmp_path / "c")


def test_load_model_restores_predictions(tmp_path):
    img = generate_synthetic_images(24, 2, 16, seed=3)
    cfg = config(model={"kind": "cnn", "channels": [2], "lgconv": True, "heads": 2}, epochs=1,
                 mask=MaskSpec(MaskSetting.POSITIVE_ONLY, 1.0, 0), batch_size=8)
    result = train(cfg, apply_mask(img, cfg.mask), checkpoint_dir=tmp_path / "c")
    model, loaded_cfg = load_model(tmp_path / "c")
    assert loaded_cfg.to_dict() == cfg.to_dict()
    assert evaluate(model, img).to_csv("x", "pu", 1.0, 0) == evaluate(result.model, img).to_csv("x", "pu", 1.0, 0)


def test_positive_only_training_rejects_negatives(data):
    train_full, _ = data
    cfg = config()
    with pytest.raises(ConfigError):
        train(cfg, train_full)


def test_non_finite_loss_reports_epoch_category_and_term(data):
    train_full, _ = data
    cfg = config(learning_rate=1e200, optimizer={"kind": "sgd", "momentum": 0.0}, epochs=3)
    with pytest.raises(TrainingDivergedError) as info:
        train(cfg, pu(train_full, cfg))
    assert info.value.epoch >= 1
    assert info.value.term


def test_pn_baseline_trains_on_full_labels(data):
    train_full, test = data
    cfg = config(loss_kind="pn_bce", mask=None, epochs=5)
    model, history = train(cfg, train_full)
    assert evaluate(model, test).map > 0.8
    assert all(row["mean_reg"] == 0.0 for row in history)


def test_history_csv_columns(tmp_path, data):
    train_full, test = data
    cfg = config(eval_every=1, epochs=2)
    _, history = train(cfg, pu(train_full, cfg), eval_dataset=test)
    write_history_csv(history, tmp_path / "h.csv")
    rows = list(csv.reader(open(tmp_path / "h.csv")))
    assert tuple(rows[0]) == HISTORY_COLUMNS
    assert len(rows) == 3 and all(v != "" for v in rows[1])


# ---------------------------------------------------------------------- sweep
def test_sweep_singleton_equals_direct_run(data):
    train_full, test = data
    base = config()
    rows = sweep(base, train_full, test, [1.0], [1.0], [0.5], [4])
    cfg = base.replace(mask=MaskSpec(MaskSetting.POSITIVE_ONLY, 0.5, 4))
    direct = evaluate(train(cfg, apply_mask(train_full, cfg.mask)).model, test)
    assert rows[0].report.to_csv("x", "pu", 0.5, 4) == direct.to_csv("x", "pu", 0.5, 4)


def test_sweep_grid_order_and_row_count(tmp_path, data):
    train_full, test = data
    rows = sweep(config(epochs=1), train_full, test, [0.0, 0.5, 1.0], [1.0], [0.1, 0.5], [0])
    assert [r.run_id for r in rows] == [f"g{g:g}-a1-r{r:g}-s0" for g in (0, 0.5, 1) for r in (0.1, 0.5)]
    write_sweep_csv(rows, test.n_categories, tmp_path / "s.csv")
    assert len(open(tmp_path / "s.csv").read().splitlines()) == 7


def test_sweep_records_failing_cells(data):
    train_full, test = data
    base = config(learning_rate=1e200, optimizer={"kind": "sgd", "momentum": 0.0}, epochs=2)
    rows = sweep(base, train_full, test, [1.0], [1.0], [0.5], [0, 1])
    assert len(rows) == 2 and all(r.report is None and "TrainingDivergedError" in r.error for r in rows)


# ------------------------------------------------------------------ gradcheck
def test_gradcheck_passes_everywhere_at_few_points():
    report = gc.gradcheck({"points": 3})
    assert {e.component for e in report} == set(gc.COMPONENTS)
    assert all(e.passed for e in report), [(e.component, e.max_rel_error) for e in report if not e.passed]


def test_gradcheck_reports_a_corrupted_gradient():
    def wrong_square(a):
        a = T.as_tensor(a)
        return T._result(a.data ** 2, (a,), lambda g: (g * 3.0 * a.data,), "wrong_square")

    def case(rng):
        return (lambda t: T.sum(wrong_square(t[0])), [rng.normal(size=4)])

    report = gc.gradcheck({"points": 2, "components": ["exp", "corrupted"]}, extra={"corrupted": case})
    by_name = {e.component: e for e in report}
    assert by_name["exp"].passed
    assert not by_name["corrupted"].passed and by_name["corrupted"].max_rel_error > 0.1


def test_gradcheck_report_file(tmp_path):
    report = gc.gradcheck({"points": 1, "components": ["add", "pn_bce"]})
    gc.write_report(report, tmp_path / "g.csv")
    rows = list(csv.reader(open(tmp_path / "g.csv")))
    assert rows[0] == ["component", "max_rel_error", "points", "passed"]
    assert [r[0] for r in rows[1:]] == ["add", "pn_bce"]
