import csv
import json

import numpy as np
import pytest

from pathprox.errors import ConfigError, ContractError, DivergenceError
from pathprox.harness import (
    ExperimentConfig,
    compare_convergence,
    export_decision_boundary,
    export_lipschitz_histogram,
    level_set_nonempty,
    load_config,
    prepare_data,
    prune_retrain,
    read_metrics_csv,
    resolve_schedule,
    run_training,
    setup,
)
from pathprox.models import Linear, NetworkSpec, WeightStore, build_mlp, init_store, load_checkpoint
from pathprox.optimizers import OptimizerConfig, Schedule


def small(tmp_path=None, **kw):
    base = {"task": {"n_train": 60, "n_val": 20, "n_test": 20},
            "model": {"depth": 2, "width": 8, "factorized": True},
            "optimizer": {"lr": 0.2, "lam": 1e-3},
            "iterations": 30, "eval_interval": 10}
    if tmp_path is not None:
        base["output_dir"] = str(tmp_path)
    cfg = ExperimentConfig.from_dict(base)
    return cfg.with_overrides(**kw) if kw else cfg


HEADER = "iteration,gamma,data_loss,F,G,R,Rtilde,active_pct,T_1,T_2,train_acc,val_acc,test_acc,ms"


def test_config_round_trip_and_errors(tmp_path):
    cfg = small()
    assert ExperimentConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"iterations": 10, "bogus": 1})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"optimizer": {"algorithm": "adam"}})
    with pytest.raises(ConfigError):
        ExperimentConfig(iterations=0)
    (tmp_path / "c.json").write_text("{broken")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "c.json")


def test_seed_override_changes_only_seed():
    a = small()
    b = a.with_overrides(seed=7)
    da, db = a.to_dict(), b.to_dict()
    assert db.pop("seed") == 7 and da.pop("seed") == 0
    assert da == db


def test_default_schedule_decays_at_half_and_three_quarters():
    opt = resolve_schedule(ExperimentConfig().optimizer, 100)
    assert opt.schedule.milestones == (50, 75)
    assert [opt.gamma(t) for t in (50, 51, 76)] == [0.1, pytest.approx(0.01), pytest.approx(0.001)]


def test_single_iteration_gives_one_record(tmp_path):
    res = run_training(small(tmp_path, iterations=1))
    assert len(res.records) == 1 and res.records[0].iteration == 1
    lines = (tmp_path / "metrics.csv").read_text().splitlines()
    assert lines[0] == HEADER and len(lines) == 2


def test_records_at_interval_and_end(tmp_path):
    res = run_training(small(tmp_path, iterations=25))
    assert [r.iteration for r in res.records] == [10, 20, 25]


@pytest.mark.parametrize("batch_size", [0, 16])
def test_csv_bytes_are_reproducible(tmp_path, batch_size):
    run_training(small(tmp_path / "a", batch_size=batch_size))
    run_training(small(tmp_path / "b", batch_size=batch_size))
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
    run_training(small(tmp_path / "c", batch_size=batch_size, seed=1))
    assert (tmp_path / "a" / "metrics.csv").read_bytes() != (tmp_path / "c" / "metrics.csv").read_bytes()


@pytest.mark.parametrize("alg", ["pathprox", "sgd_wd", "sgd_pathnorm", "wn_sgd"])
def test_logged_rows_satisfy_objective_identities(tmp_path, alg):
    cfg = small(tmp_path, **{"optimizer.algorithm": alg})
    run_training(cfg)
    lam = cfg.optimizer.lam
    for row in read_metrics_csv(tmp_path / "metrics.csv"):
        L, R, Rt = float(row["data_loss"]), float(row["R"]), float(row["Rtilde"])
        assert abs(float(row["F"]) - (L + 0.5 * lam * R)) <= 1e-12
        assert abs(float(row["G"]) - (L + lam * Rt)) <= 1e-12
        assert all(v != "nan" for v in row.values())


def test_unit_sphere_method_reports_balanced_objective(tmp_path):
    res = run_training(small(tmp_path))
    for r in res.records:
        assert abs(r.F - r.G) <= 1e-12 * r.F


def test_outputs_written(tmp_path):
    cfg = small(tmp_path)
    res = run_training(cfg)
    echoed = json.loads((tmp_path / "config.json").read_text())
    assert ExperimentConfig.from_dict(echoed) == cfg
    final, doc = load_checkpoint(tmp_path / "final.json")
    assert final.identical_to(res.store) and doc["iteration"] == 30
    best, _ = load_checkpoint(tmp_path / "best.json")
    assert best.identical_to(res.best_store)
    accs = [r.val_acc for r in res.records]
    assert res.best_iteration == res.records[int(np.argmax(accs))].iteration  # argmax keeps the earliest tie


def test_resume_reproduces_uninterrupted_run(tmp_path):
    cfg = small(tmp_path / "full", batch_size=16, checkpoints=(20,), iterations=40)
    run_training(cfg)
    resumed = cfg.with_overrides(output_dir=str(tmp_path / "res"))
    run_training(resumed, resume_from=tmp_path / "full" / "ckpt_20.json")
    for name in ("metrics.csv", "final.json", "best.json"):
        assert (tmp_path / "full" / name).read_bytes() == (tmp_path / "res" / name).read_bytes()


def test_resume_rejects_other_architecture(tmp_path):
    run_training(small(tmp_path / "a", checkpoints=(10,)))
    other = small(tmp_path / "b", **{"model.width": 4})
    with pytest.raises(ConfigError):
        run_training(other, resume_from=tmp_path / "a" / "ckpt_10.json")


def test_divergence_aborts_with_partial_log(tmp_path):
    cfg = small(tmp_path, **{"optimizer.algorithm": "sgd_pathnorm", "optimizer.lr": 200.0, "eval_interval": 1,
                             "optimizer.schedule": {"kind": "constant"}})
    with pytest.raises(DivergenceError) as exc:
        run_training(cfg)
    lines = (tmp_path / "metrics.csv").read_text().splitlines()
    assert lines[0] == HEADER
    assert len(lines) - 1 == len(exc.value.records) < exc.value.iteration


def test_mnist_task_with_digits_stand_in():
    cfg = ExperimentConfig.from_dict({"task": {"dataset": "mnist", "per_class": 20, "val_size": 50, "test_size": 40}})
    data = prepare_data(cfg)
    assert len(data.train) == 200 and len(data.val) == 50 and len(data.test) == 40
    assert abs(data.train.features.mean()) < 1e-6
    spec, sch, shaped = setup(cfg.with_overrides(**{"model.kind": "cnn", "model.channels": [1, 2, 2]}))
    assert shaped.train.features.shape[1:] == (1, 28, 28)


def prune_cfg(tmp_path, **kw):
    cfg = small(tmp_path, **{"optimizer.lam": 0.05, "optimizer.lr": 0.3, "iterations": 60,
                             "checkpoints": (20, 40, 60), "retrain_iters": 15})
    return cfg.with_overrides(**kw) if kw else cfg


def test_prune_retrain_table_and_mask_integrity(tmp_path):
    res = prune_retrain(prune_cfg(tmp_path))
    assert [r.checkpoint for r in res.rows] == [20, 40, 60]
    assert all(r.stayed_zero for r in res.rows)
    assert sum(r.n_inactive for r in res.rows) > 0
    for ck, gone in res.deactivations.items():
        assert all(pn < 1e-5 for _, _, pn in gone)
    inactive = [sum(int((~m).sum()) for m in res.main.snapshots[ck][1]) for ck in (20, 40, 60)]
    assert inactive == sorted(inactive)
    for ck, mask in res.masks.items():
        snap_mask = res.main.snapshots[ck][1]
        assert all(np.all(m <= s) for m, s in zip(mask, snap_mask))  # inactive set only grows
    text = (tmp_path / "prune.csv").read_text().splitlines()
    assert text[0].startswith("checkpoint,") and len(text) == 4


def test_prune_threshold_zero_only_catches_exact_zeros(tmp_path):
    res = prune_retrain(prune_cfg(tmp_path, sparsity_threshold=0.0))
    assert all(r.n_deactivated == 0 or r.max_deactivated_path_norm == 0.0 for r in res.rows)


def test_prune_errors(tmp_path):
    with pytest.raises(ConfigError):
        prune_retrain(prune_cfg(tmp_path, checkpoints=()))
    with pytest.raises(ConfigError):
        prune_retrain(prune_cfg(tmp_path, checkpoints=(100,)))


def test_compare_identical_runs_give_identical_columns(tmp_path):
    cfg = small()
    text, _ = compare_convergence([cfg, cfg], tmp_path / "cmp.csv")
    rows = list(csv.reader(text.splitlines()))
    assert rows[0] == ["iteration", "F_pathprox", "F_pathprox_2"]
    assert all(r[1] == r[2] for r in rows[1:])
    assert [int(r[0]) for r in rows[1:]] == [10, 20, 30]


def test_compare_three_methods_and_mismatch():
    cfgs = [small(**{"optimizer.algorithm": a}) for a in ("pathprox", "sgd_pathnorm", "sgd_wd")]
    text, res = compare_convergence(cfgs)
    assert text.splitlines()[0] == "iteration,F_pathprox,F_sgd_pathnorm,F_sgd_wd"
    with pytest.raises(ConfigError):
        compare_convergence([cfgs[0], cfgs[1].with_overrides(**{"optimizer.lam": 0.5})])


def test_boundary_of_zero_network_is_one_half(tmp_path):
    spec = build_mlp(1, 4, 2, 2)
    grid = export_decision_boundary(spec, WeightStore.zeros(spec), resolution=7, path=tmp_path / "b.csv")
    assert np.all(grid.p0 == 0.5)
    lines = (tmp_path / "b.csv").read_text().splitlines()
    assert lines[0] == "x,y,p0,p1" and len(lines) == 50


def test_boundary_probabilities_and_errors():
    spec = build_mlp(1, 6, 2, 2)
    g = export_decision_boundary(spec, init_store(spec, 1), (-2, 2, -1, 1), 30)
    assert np.all((g.p0 >= 0) & (g.p0 <= 1))
    assert np.max(np.abs(g.p0 + g.p1 - 1)) <= 1e-12
    assert g.x.min() == -2 and g.y.max() == 1
    with pytest.raises(ContractError):
        export_decision_boundary(build_mlp(1, 3, 3, 2), init_store(build_mlp(1, 3, 3, 2), 0))


def test_level_set_detection():
    from pathprox.harness import BoundaryGrid

    flat = BoundaryGrid(np.zeros(4), np.zeros(4), np.full(4, 0.7), np.full(4, 0.3))
    assert not level_set_nonempty(flat, 2)
    mixed = BoundaryGrid(np.zeros(4), np.zeros(4), np.array([0.7, 0.2, 0.7, 0.8]), np.zeros(4))
    assert level_set_nonempty(mixed, 2)


def test_lipschitz_export(tmp_path):
    spec = NetworkSpec((Linear(3, 2),), (3,), 2)
    s = init_store(spec, 0)
    X = np.random.default_rng(0).normal(size=(12, 3))
    out = export_lipschitz_histogram(spec, s, X, tmp_path / "l.csv")
    sigma = np.linalg.svd(s.weights[0], compute_uv=False)[0]
    np.testing.assert_allclose(out["values"], sigma, rtol=1e-8)
    lines = (tmp_path / "l.csv").read_text().splitlines()
    assert len(lines) == 1 + 12 + 2
    assert lines[-2].startswith("mean,") and lines[-1].startswith("median,")
    s.weights[0] = 2 * s.weights[0]
    np.testing.assert_allclose(export_lipschitz_histogram(spec, s, X)["values"], 2 * out["values"], rtol=1e-8)
