import math
import statistics
from functools import lru_cache

import numpy as np
import pytest

from trajgnn.classical import NGSIM_IDM
from trajgnn.datapipe import SynthConfig, Window, generate_synthetic, window_extract
from trajgnn.exp import (ROW_COLUMNS, SUMMARY_COLUMNS, RunReport, RunRow, RunSpec, TrainConfig,
                         ablation_grid, ablation_suite, displacement_metrics, emit_report,
                         evaluate_displacement, predict_positions, read_rows_csv, rows_csv,
                         run_multi_seed, summary_csv, train)
from trajgnn.models import ModelConfig


@lru_cache(maxsize=None)
def synth_windows(mode="idm_interacting", seed=0, vehicles=8, duration=120.0):
    cfg = SynthConfig(seed=seed, mode=mode, vehicles=vehicles, duration_s=duration,
                      lane_change_rate=1.0)
    return tuple(window_extract(generate_synthetic(cfg)))


def tiny(kind="gat", **kw):
    return ModelConfig(model_kind=kind, hidden_dim=8, heads=2, **kw)


def one_vehicle_window(future_offset):
    samples = np.zeros((1, 10, 4))
    samples[0, :, 0] = np.arange(10) * 10.0
    samples[0, :, 2] = 10.0
    w = Window(1, 5, [1], samples, np.ones((1, 10)), [True])
    pred = samples[0, 5:, :2].copy()
    pred[:, 0] += future_offset
    return w, pred[None]


# -- metrics ----------------------------------------------------------------------------


def test_metrics_examples():
    w, pred = one_vehicle_window(0.0)
    m = displacement_metrics([pred], [w])
    assert (m.mean_displacement, m.final_displacement, m.count) == (0.0, 0.0, 1)
    w, pred = one_vehicle_window(1.0)
    m = displacement_metrics([pred], [w])
    assert (m.mean_displacement, m.final_displacement) == (1.0, 1.0)
    w, pred = one_vehicle_window(np.arange(1.0, 6.0))
    m = displacement_metrics([pred], [w])
    assert (m.mean_displacement, m.final_displacement) == (3.0, 5.0)
    assert m.per_step.tolist() == [1, 2, 3, 4, 5]


def test_metrics_skip_context_vehicles():
    w, pred = one_vehicle_window(2.0)
    ctx = Window(1, 5, [1, 2], np.concatenate([w.samples, w.samples]),
                 np.ones((2, 10)), [True, False])
    both = np.concatenate([pred, pred + 100.0])
    assert displacement_metrics([both], [ctx]).mean_displacement == 2.0
    no_loss = Window(1, 5, [1], w.samples, np.ones((1, 10)), [False])
    with pytest.raises(ValueError, match="no loss-masked"):
        displacement_metrics([pred], [no_loss])


def test_metric_invariants_on_random_predictions():
    rng = np.random.default_rng(0)
    ws = synth_windows()[:5]
    preds = [w.samples[:, 5:, :2] + rng.normal(size=(w.num_vehicles, 5, 2)) for w in ws]
    m = displacement_metrics(preds, ws)
    assert m.final_displacement == m.per_step[-1]
    assert m.mean_displacement <= m.per_step.max()


def test_cvm_zero_on_constant_velocity_scenes():
    ws = synth_windows("constant_velocity")
    m = evaluate_displacement("cvm", ws)
    assert m.mean_displacement < 1e-9 and m.count > 0


def test_idm_and_callable_predictors():
    ws = synth_windows()[:4]
    idm = predict_positions(NGSIM_IDM, ws)
    assert [p.shape for p in idm] == [(w.num_vehicles, 5, 2) for w in ws]
    exact = evaluate_displacement(lambda w: w.samples[:, 5:, :2], ws)
    assert exact.mean_displacement == 0.0
    with pytest.raises(TypeError):
        predict_positions(42, ws)


@pytest.mark.parametrize("kind", ["gat", "gcn", "ff"])
def test_batching_invariance(kind):
    from trajgnn.models import TrajectoryModel
    model = TrajectoryModel.init(tiny(kind), seed=1)
    ws = list(synth_windows()[:12])
    merged = predict_positions(model, ws)
    single = [predict_positions(model, [w])[0] for w in ws]
    for a, b in zip(merged, single):
        np.testing.assert_allclose(a, b, atol=1e-9)


# -- training ---------------------------------------------------------------------------


def test_train_is_deterministic():
    ws = synth_windows()
    cfg = TrainConfig(model=tiny(), max_epochs=2, seed=3, batch_size=8)
    a, ha = train(ws[:16], ws[16:20], cfg)
    b, hb = train(ws[:16], ws[16:20], cfg)
    assert ha.train_loss == hb.train_loss
    assert all(np.array_equal(p.data, q.data) for p, q in zip(a.parameters(), b.parameters()))


def test_train_rejects_empty_splits():
    ws = synth_windows()
    with pytest.raises(ValueError):
        train([], ws[:2], TrainConfig(model=tiny()))
    with pytest.raises(ValueError):
        train(ws[:2], [], TrainConfig(model=tiny()))


def test_train_config_validation():
    for kw in (dict(batch_size=0), dict(max_epochs=0), dict(patience=0), dict(learning_rate=0)):
        with pytest.raises(ValueError):
            TrainConfig(**kw)
    assert TrainConfig(model=tiny(strategy="self")).strategy == "self"


def test_early_stop_restores_best_epoch():
    ws = synth_windows()
    seen = []
    cfg = TrainConfig(model=tiny("ff"), max_epochs=40, patience=2, learning_rate=0.05,
                      batch_size=4)
    model, hist = train(ws[:12], ws[12:16], cfg,
                        on_epoch=lambda e, loss, val: seen.append(val))
    assert hist.val_mean_displacement == seen
    best = int(np.argmin(seen))
    assert hist.best_epoch == best
    if hist.stopped_early:
        assert len(seen) == best + 3
    restored = evaluate_displacement(model, ws[12:16]).mean_displacement
    assert restored == pytest.approx(seen[best], abs=1e-12)


def test_overfit_ten_windows():
    ws = synth_windows()[:10]
    cfg = TrainConfig(model=ModelConfig(model_kind="ff", hidden_dim=64), max_epochs=500,
                      patience=None, batch_size=10, learning_rate=3e-3)
    _, hist = train(ws, ws, cfg)
    assert min(hist.train_loss) < 1e-3


# -- reports ------------------------------------------------------------------------------


def report_of(values):
    return RunReport([RunRow("gat", "default", "neighbour", s, v, 2 * v)
                      for s, v in enumerate(values)])


def test_aggregates_examples():
    (agg,) = report_of([1.0, 3.0]).aggregates()
    assert agg.n == 2 and agg.mean_displ_mean == 2.0
    assert agg.mean_displ_std == pytest.approx(math.sqrt(2), abs=1e-12)
    (agg,) = report_of([0.7] * 5).aggregates()
    assert agg.mean_displ_std == 0.0
    (agg,) = report_of([0.7]).aggregates()
    assert agg.mean_displ_std == 0.0


def test_aggregates_recomputable():
    rng = np.random.default_rng(1)
    vals = rng.uniform(0, 3, 10).tolist()
    (agg,) = report_of(vals).aggregates()
    assert abs(agg.mean_displ_mean - statistics.fmean(vals)) < 1e-12
    assert abs(agg.final_displ_std - statistics.stdev([2 * v for v in vals])) < 1e-12


def test_rows_csv_round_trip():
    rep = report_of([0.1, 0.25, 1 / 3])
    text = rows_csv(rep)
    assert text.splitlines()[0] == ",".join(ROW_COLUMNS)
    assert read_rows_csv(text).rows == rep.rows
    assert summary_csv(rep).splitlines()[0] == ",".join(SUMMARY_COLUMNS)


def test_emit_report_files_and_stability(tmp_path):
    rows = [RunRow(s.label_model, s.variant, s.config.strategy, seed, 1.0 + 0.01 * seed, 2.0)
            for s in ablation_grid() for seed in range(10)]
    rep = RunReport(rows)
    paths = emit_report(rep, tmp_path / "a")
    assert [p.name for p in paths] == ["rows.csv", "summary.csv", "summary.svg"]
    assert len((tmp_path / "a" / "rows.csv").read_text().splitlines()) == 131
    emit_report(rep, tmp_path / "b")
    for name in ("rows.csv", "summary.csv", "summary.svg"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert (tmp_path / "a" / "summary.svg").read_text().startswith("<svg")


def test_emit_report_errors(tmp_path):
    with pytest.raises(ValueError):
        emit_report(RunReport(), tmp_path)
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        emit_report(report_of([1.0]), blocker / "sub")


# -- protocol -----------------------------------------------------------------------------


def test_ablation_grid_rows():
    grid = ablation_grid()
    assert len(grid) == 13
    assert [(s.label_model, s.variant) for s in grid[:9]] == [
        ("gcn", "default"), ("gcn", "no ff output"), ("gcn", "with weighted edges"),
        ("gcn", "no residuals & weighted edges"), ("gcn", "no residuals"),
        ("gat", "default"), ("gat", "no ff output"), ("gat", "no residuals"),
        ("gat", "no edge features")]
    assert [s.config.strategy for s in grid[9:]] == ["self", "preceding", "neighbour", "all"]
    assert all(s.config.model.model_kind == "gat" for s in grid[9:])


def test_run_multi_seed_rows_in_seed_order():
    ws = synth_windows()
    spec = RunSpec("ff", "default", TrainConfig(model=tiny("ff"), max_epochs=1))
    rep = run_multi_seed(spec, [4, 2, 7], ws[:8], ws[8:10], ws[10:12])
    assert [r.seed for r in rep.rows] == [4, 2, 7]
    with pytest.raises(ValueError):
        run_multi_seed(spec, [], ws[:8], ws[8:10], ws[10:12])


def test_ablation_suite_small():
    ws = synth_windows()
    base = TrainConfig(model=tiny(), max_epochs=1, batch_size=16)
    rep = ablation_suite(ws[:8], ws[8:10], ws[10:12], seeds=[0, 1], base=base,
                         all_connections_seeds=1)
    assert len(rep) == 12 * 2 + 1
    assert len(rep.aggregates()) == 13
