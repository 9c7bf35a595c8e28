import csv
import os
import random
from dataclasses import replace

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from descentlab import sweep
from descentlab.datagen import AnomalySpec, NoiseSpec, ShiftSpec, SubspaceSpec
from descentlab.neuralnet import Architecture, TrainConfig, init_model, train
from descentlab.sweep import (
    RUN_COLUMNS,
    CurveTable,
    RealDataSpec,
    RunKey,
    SweepSpec,
    aggregate,
    collect,
    realize,
    run_epoch_wise,
    run_model_wise,
    run_sample_wise,
    schedule,
    write_runs_csv,
)

SMALL = SubspaceSpec(n_train=60, n_test=40)
NOISE = NoiseSpec("sample", 0.5, -5)


def small_spec(**kw):
    base = dict(axis="hidden_dim", values=(4, 8), scenario="sample-noise", params=NOISE, data=SMALL,
                bottleneck_dim=5, train=TrainConfig(epochs=2), seeds=(0, 1))
    base.update(kw)
    return SweepSpec(**base)


# --- spec and keys ----------------------------------------------------------

def test_run_keys_full_scale_grid_count():
    spec = small_spec(values=tuple(range(4, 501, 4)), seeds=(0,))
    assert len(spec.run_keys()) == 125


def test_run_keys_unique_and_hash_ignores_seeds():
    spec = small_spec(seeds=(0, 1, 2))
    keys = spec.run_keys()
    assert len(set(keys)) == len(keys) == 6
    assert spec.scenario_hash == small_spec(seeds=(5,)).scenario_hash
    assert spec.scenario_hash != small_spec(params=NoiseSpec("sample", 0.6, -5)).scenario_hash


def test_spec_validation():
    with pytest.raises(ValueError):
        small_spec(values=(8, 4))
    with pytest.raises(ValueError):
        small_spec(values=())
    with pytest.raises(ValueError):
        small_spec(axis="width")
    with pytest.raises(ValueError):
        small_spec(seeds=(1, 1))
    with pytest.raises(ValueError):
        small_spec(axis="grid")


# --- model-wise -------------------------------------------------------------

def test_single_cell_equals_run_record():
    spec = small_spec(values=(8,), seeds=(3,))
    table, results = collect(spec)
    assert len(table.rows) == 1 and table.rows[0].n_seeds == 1
    data = replace(SMALL, seed=3)
    real = realize("sample-noise", NOISE, data, 3)
    model = init_model(Architecture(50, 8, 5), 3)
    rec = train(model, real.train, real.test, TrainConfig(epochs=2, seed=3))
    assert table.mean("test_loss")[0] == rec.final_test_loss
    assert table.mean("train_loss")[0] == rec.final_train_loss
    assert table.stderr("test_loss")[0] == 0.0
    assert results[0].raw_test_mse == rec.final_test_mse


def test_curve_mean_and_stderr_match_per_seed_values():
    spec = small_spec(seeds=(0, 1, 2))
    table, results = collect(spec)
    for row in table.rows:
        vals = [r.test_loss for r in results if r.key.x == row.x]
        assert abs(row.stats["test_loss"][0] - np.mean(vals)) < 1e-12
        assert_allclose(row.stats["test_loss"][1], np.std(vals, ddof=1) / np.sqrt(3), rtol=1e-12)
        assert row.n_seeds == 3


def test_doubling_seeds_keeps_means_within_two_stderr():
    a = run_model_wise(small_spec(values=(8,), seeds=(0, 1, 2, 3)))
    b = run_model_wise(small_spec(values=(8,), seeds=tuple(range(8))))
    assert abs(a.mean()[0] - b.mean()[0]) <= 2 * a.stderr()[0]


def test_shared_realization_per_seed():
    spec = small_spec(values=(4, 8, 16), seeds=(2,))
    _, results = collect(spec)
    # identical data for all sizes means identical normalizers, so the
    # raw / normalized ratio is the same for every run
    ratios = {round(r.raw_test_mse / r.test_loss, 12) for r in results}
    assert len(ratios) == 1


def test_grid_axis_matrix():
    spec = small_spec(axis="grid", values=(4, 8), grid_bottleneck=(2, 5, 9), seeds=(0,))
    table = run_model_wise(spec)
    hs, bs, mat = table.matrix()
    assert hs == [4, 8] and bs == [2, 5, 9] and mat.shape == (2, 3)
    assert np.isfinite(mat).all()


def test_bottleneck_axis():
    table = run_model_wise(small_spec(axis="bottleneck_dim", values=(2, 10), seeds=(0,)))
    assert table.x().tolist() == [2.0, 10.0]


# --- epoch-wise -------------------------------------------------------------

def test_epoch_axis_matches_train_record():
    spec = small_spec(axis="epochs", values=(1, 2, 3, 4), hidden_dim=8, seeds=(1,))
    table = run_epoch_wise(spec)
    assert table.x().tolist() == [1, 2, 3, 4]
    real = realize("sample-noise", NOISE, replace(SMALL, seed=1), 1)
    rec = train(init_model(Architecture(50, 8, 5), 1), real.train, real.test,
                TrainConfig(epochs=4, seed=1, eval_period=1))
    denom = np.mean((real.test.samples - real.test.samples.mean()) ** 2)
    assert_allclose(table.mean("test_loss"), np.array(rec.test_mse) / denom, rtol=1e-12)


def test_epoch_axis_zero_lr_is_flat():
    spec = small_spec(axis="epochs", values=(1, 2, 3), train=TrainConfig(epochs=3, learning_rate=0.0), seeds=(0,))
    curve = run_epoch_wise(spec).mean()
    assert curve[0] == curve[1] == curve[2]


def test_epoch_axis_one_run_per_seed():
    spec = small_spec(axis="epochs", values=tuple(range(1, 6)), seeds=(0, 1))
    assert [k.x for k in spec.run_keys()] == [(5,), (5,)]


# --- sample-wise ------------------------------------------------------------

def test_sample_axis_single_point():
    table = run_sample_wise(small_spec(axis="n_train", values=(40,), seeds=(0,)))
    assert table.x().tolist() == [40.0]


def test_sample_axis_uses_nested_prefixes():
    spec = small_spec(axis="n_train", values=(20, 60), hidden_dim=8, seeds=(4,))
    _, results = collect(spec)
    at20 = next(r for r in results if r.key.x == (20,))
    real = realize("sample-noise", NOISE, replace(SMALL, n_train=60, seed=4), 4)
    rec = train(init_model(Architecture(50, 8, 5), 4), real.train.head(20), real.test,
                TrainConfig(epochs=2, seed=4))
    assert at20.n_train == 20
    assert at20.test_loss == rec.final_test_loss


# --- scenario extras --------------------------------------------------------

def test_anomaly_extras():
    spec = small_spec(scenario="anomaly", params=AnomalySpec(0.3, -5), values=(8,), seeds=(0,))
    table = run_model_wise(spec)
    assert {"roc_auc", "test_loss[anomaly]"} <= set(table.metrics)
    assert 0.0 <= table.mean("roc_auc")[0] <= 1.0


def test_domain_shift_extras():
    spec = small_spec(scenario="domain-shift", params=ShiftSpec(2.0), values=(8,), seeds=(0,))
    table = run_model_wise(spec)
    assert 0.0 <= table.mean("knn_dat")[0] <= 1.0


def test_real_data_modes(tmp_path):
    rng = np.random.default_rng(0)
    path = tmp_path / "cells.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"g{j}" for j in range(12)] + ["batch", "label"])
        for i in range(90):
            w.writerow(list(rng.gamma(2.0, 1.0, 12)) + [["baron", "xin", "wang"][i % 3], int(i % 9 == 0)])
    common = dict(path=str(path), batch_column="batch", top_features=10, n_train=50, snr_db=-3.0)
    for mode, extra in [
        ("sample-noise", {"p": 0.5}),
        ("feature-noise", {"p": 0.3}),
        ("domain-shift", {"source_batch": "baron"}),
        ("anomaly", {"label_column": "label"}),
    ]:
        params = RealDataSpec(mode=mode, **common, **extra)
        spec = small_spec(scenario="real", params=params, values=(6,), bottleneck_dim=3, seeds=(0,))
        table = run_model_wise(spec)
        assert np.isfinite(table.mean()[0]), mode
        if mode == "domain-shift":
            assert {"knn_dat", "knn_dat[1]", "knn_dat[2]", "test_loss[target:xin]"} <= set(table.metrics)
        if mode == "anomaly":
            assert "roc_auc" in table.metrics


# --- scheduling and aggregation ---------------------------------------------

def _curve_bytes(table, tmp_path, name):
    table.to_csv(tmp_path / name)
    return (tmp_path / name).read_bytes()


def test_aggregate_identical_across_parallelism(tmp_path):
    spec = small_spec(values=(4, 8, 12), seeds=(0, 1))
    outputs = []
    for par in (1, 2, 8):
        results = list(schedule(spec, spec.run_keys(), par))
        outputs.append(_curve_bytes(aggregate(spec, results), tmp_path, f"c{par}.csv"))
    assert outputs[0] == outputs[1] == outputs[2]


def test_aggregate_is_order_independent(tmp_path):
    spec = small_spec(values=(4, 8), seeds=(0, 1, 2))
    _, results = collect(spec)
    shuffled = results[:]
    random.Random(0).shuffle(shuffled)
    assert _curve_bytes(aggregate(spec, results), tmp_path, "a.csv") == \
        _curve_bytes(aggregate(spec, shuffled), tmp_path, "b.csv")


def test_schedule_all_runs_present():
    spec = small_spec(values=(2, 4, 6, 8, 10), seeds=(0, 1))
    keys = spec.run_keys()
    assert len(keys) == 10
    done = list(schedule(spec, keys, 4))
    assert sorted(r.key for r in done) == sorted(keys)
    assert all(r.status == "ok" for r in done)


def test_schedule_rejects_duplicates_and_bad_parallelism():
    spec = small_spec()
    keys = spec.run_keys()
    with pytest.raises(ValueError):
        list(schedule(spec, keys + keys[:1], 1))
    with pytest.raises(ValueError):
        list(schedule(spec, keys, 0))


def test_failed_run_is_reported_and_skipped(monkeypatch):
    spec = small_spec(values=(4, 8), seeds=(0, 1))
    real_execute = sweep._execute

    def flaky(spec_, key):
        if key.x == (8,) and key.seed == 1:
            raise FloatingPointError("boom")
        return real_execute(spec_, key)

    monkeypatch.setattr(sweep, "_execute", flaky)
    table, results = collect(spec)
    failed = [r for r in results if r.status == "failed"]
    assert len(failed) == 1 and "boom" in failed[0].error
    row8 = next(r for r in table.rows if r.x == (8,))
    assert row8.n_seeds == 1


def test_worker_crash_marks_only_that_run(monkeypatch):
    spec = small_spec(values=(4, 8, 12), seeds=(0,))
    real_execute = sweep._execute

    def crashing(spec_, key):
        if key.x == (8,):
            os._exit(1)
        return real_execute(spec_, key)

    monkeypatch.setattr(sweep, "_execute", crashing)
    results = list(schedule(spec, spec.run_keys(), 2))
    status = {r.key.x: r.status for r in results}
    assert status == {(4,): "ok", (8,): "failed", (12,): "ok"}


def test_curve_table_csv_roundtrip(tmp_path):
    spec = small_spec(scenario="anomaly", params=AnomalySpec(0.3, -5), seeds=(0, 1))
    table = run_model_wise(spec)
    table.to_csv(tmp_path / "curve.csv")
    header = (tmp_path / "curve.csv").read_text().splitlines()[0].split(",")
    assert header[:5] == ["hidden_dim", "mean_train_loss", "stderr_train_loss", "mean_test_loss", "stderr_test_loss"]
    assert header[-1] == "n_seeds"
    back = CurveTable.from_csv(tmp_path / "curve.csv")
    assert back.axis == "hidden_dim" and back.metrics == table.metrics
    assert_array_equal(back.mean("roc_auc"), table.mean("roc_auc"))


def test_runs_csv_columns(tmp_path):
    spec = small_spec(scenario="anomaly", params=AnomalySpec(0.3, -5), values=(4,), seeds=(0,))
    _, results = collect(spec)
    write_runs_csv(tmp_path / "runs.csv", spec, results)
    rows = list(csv.DictReader(open(tmp_path / "runs.csv")))
    assert list(rows[0])[:len(RUN_COLUMNS)] == RUN_COLUMNS
    assert list(rows[0])[-2:] == ["wall_seconds", "error"]
    assert rows[0]["status"] == "ok" and rows[0]["run_id"] == RunKey(spec.scenario_hash, (4,), 0).run_id
