"""Training, displacement metrics, multi-seed runs, the ablation grid and reports."""
from __future__ import annotations

import csv
import io
import logging
import math
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numkern as nk
from .classical import IdmParams, RolloutConfig, RolloutProblem, cvm_predict_arrays
from .datapipe.windows import HISTORY, Window
from .features import (Sample, displacement_targets, node_features, to_positions,
                       window_graph)
from .models import ModelConfig, TrajectoryModel
from .scenegraph import disjoint_union

log = logging.getLogger(__name__)

ROW_COLUMNS = ["model", "variant", "strategy", "seed", "mean_displ_m", "final_displ_m"]
SUMMARY_COLUMNS = ["model", "variant", "strategy", "n", "mean_displ_mean", "mean_displ_std",
                   "final_displ_mean", "final_displ_std"]


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig = ModelConfig()
    batch_size: int = 32
    max_epochs: int = 50
    patience: int | None = 10
    seed: int = 0
    learning_rate: float = 1e-3
    clip_norm: float | None = 5.0

    def __post_init__(self):
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be positive")
        if self.patience is not None and self.patience < 1:
            raise ValueError("patience must be positive or None")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")

    @property
    def strategy(self) -> str:
        return self.model.strategy


@dataclass
class Metrics:
    mean_displacement: float
    final_displacement: float
    per_step: np.ndarray
    count: int


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_mean_displacement: list[float] = field(default_factory=list)
    best_epoch: int = -1
    stopped_early: bool = False


# ---------------------------------------------------------------------------
# data preparation


def prepare_samples(windows: Sequence[Window], cfg: ModelConfig) -> list[Sample]:
    out = []
    for w in windows:
        g = None
        if cfg.model_kind != "ff":
            g = window_graph(w, cfg.strategy, cfg.use_weighted_edges)
        out.append(Sample(w, node_features(w), displacement_targets(w), g))
    return out


@dataclass
class Batch:
    features: np.ndarray
    graph: object
    targets: np.ndarray
    loss_rows: np.ndarray
    offsets: np.ndarray


def make_batch(samples: Sequence[Sample], model: TrajectoryModel) -> Batch:
    """Merge windows into one block-diagonal graph (no cross-window edges)."""
    feats = np.concatenate([s.features for s in samples])
    targets = np.concatenate([s.targets for s in samples])
    mask = np.concatenate([s.loss_mask for s in samples])
    sizes = [len(s.features) for s in samples]
    offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.intp)
    graph = None
    if model.config.model_kind != "ff":
        graph, _ = disjoint_union([s.graph for s in samples])
        graph = model.prepare(graph)
    return Batch(feats, graph, targets, np.flatnonzero(mask), offsets)


def batch_loss(model: TrajectoryModel, batch: Batch) -> nk.Tensor:
    pred = model.forward(batch.features, batch.graph)
    rows = batch.loss_rows
    return nk.mse_loss(nk.gather_rows(pred, rows), batch.targets[rows])


def predict_samples(model: TrajectoryModel, samples: Sequence[Sample],
                    batch_windows: int = 256) -> list[np.ndarray]:
    """Normalised predictions per window, evaluated in merged batches."""
    out: list[np.ndarray] = []
    with nk.no_grad():
        for i in range(0, len(samples), batch_windows):
            chunk = samples[i:i + batch_windows]
            b = make_batch(chunk, model)
            pred = model.forward(b.features, b.graph).data
            bounds = list(b.offsets[1:]) + [len(pred)]
            out.extend(np.split(pred, bounds[:-1]))
    return out


# ---------------------------------------------------------------------------
# metrics


def displacement_metrics(pred_positions: Sequence[np.ndarray], windows: Sequence[Window]) -> Metrics:
    """Metrics from predicted absolute positions ``(V, 5, 2)`` per window."""
    errs = []
    for pos, w in zip(pred_positions, windows):
        m = w.loss_mask
        if not m.any():
            continue
        truth = w.samples[m, HISTORY:, :2]
        errs.append(np.hypot(*(pos[m] - truth).transpose(2, 0, 1)))
    if not errs:
        raise ValueError("no loss-masked vehicles to evaluate")
    err = np.concatenate(errs)
    per_step = err.mean(axis=0)
    return Metrics(float(err.mean(axis=1).mean()), float(per_step[-1]), per_step, len(err))


def predict_positions(predictor, windows: Sequence[Window]) -> list[np.ndarray]:
    """Absolute future positions per window for a model or a baseline.

    ``predictor`` is a :class:`TrajectoryModel`, ``"cvm"``, an
    :class:`IdmParams` or a callable ``Window -> (V, 5, 2)``.
    """
    if isinstance(predictor, TrajectoryModel):
        samples = prepare_samples(windows, predictor.config)
        preds = predict_samples(predictor, samples)
        return [to_positions(p, s.last_position) for p, s in zip(preds, samples)]
    if isinstance(predictor, str) and predictor == "cvm":
        return [cvm_predict_arrays(w.samples[:, HISTORY - 1, :2], w.samples[:, HISTORY - 1, 2:])
                for w in windows]
    if isinstance(predictor, IdmParams):
        if not windows:
            return []
        prob = RolloutProblem.from_windows(windows)
        pos = prob.predict(predictor, RolloutConfig())
        sizes = np.cumsum([w.num_vehicles for w in windows])[:-1]
        return np.split(pos, sizes)
    if callable(predictor):
        return [predictor(w) for w in windows]
    raise TypeError(f"unsupported predictor {predictor!r}")


def evaluate_displacement(predictor, windows: Sequence[Window]) -> Metrics:
    """Mean (over 5 steps, then vehicles) and final displacement in metres."""
    return displacement_metrics(predict_positions(predictor, windows), windows)


# ---------------------------------------------------------------------------
# training


def train(train_windows: Sequence[Window], val_windows: Sequence[Window], cfg: TrainConfig,
          on_epoch: Callable[[int, float, float], None] | None = None):
    """Fit a model with Adam on batches of ``cfg.batch_size`` windows.

    Early stopping watches the validation mean displacement and restores
    the best epoch's parameters. Returns ``(model, history)``.
    """
    if not train_windows or not val_windows:
        raise ValueError("train and validation splits must be non-empty")
    model = TrajectoryModel.init(cfg.model, cfg.seed)
    params = model.parameters()
    state = nk.AdamState.for_params(params, learning_rate=cfg.learning_rate,
                                    clip_norm=cfg.clip_norm)
    train_samples = [s for s in prepare_samples(train_windows, cfg.model) if s.loss_mask.any()]
    if not train_samples:
        raise ValueError("training windows contain no loss-masked vehicles")
    val_samples = prepare_samples(val_windows, cfg.model)
    rng = np.random.default_rng([cfg.seed, 1])
    hist = TrainHistory()
    best_val, best_state, stale = math.inf, model.state_copy(), 0
    for epoch in range(cfg.max_epochs):
        order = rng.permutation(len(train_samples))
        total, count = 0.0, 0
        for i in range(0, len(order), cfg.batch_size):
            batch = make_batch([train_samples[j] for j in order[i:i + cfg.batch_size]], model)
            model.zero_grad()
            loss = batch_loss(model, batch)
            loss.backward()
            nk.adam_step(params, state)
            total += loss.item() * len(batch.loss_rows)
            count += len(batch.loss_rows)
        hist.train_loss.append(total / count)
        preds = predict_samples(model, val_samples)
        val = displacement_metrics([to_positions(p, s.last_position)
                                    for p, s in zip(preds, val_samples)],
                                   val_windows).mean_displacement
        hist.val_mean_displacement.append(val)
        if on_epoch is not None:
            on_epoch(epoch, hist.train_loss[-1], val)
        log.debug("epoch %d loss %.6g val %.4f", epoch, hist.train_loss[-1], val)
        if val < best_val:
            best_val, best_state, stale = val, model.state_copy(), 0
            hist.best_epoch = epoch
        else:
            stale += 1
            if cfg.patience is not None and stale >= cfg.patience:
                hist.stopped_early = True
                break
    model.load_state(best_state)
    return model, hist


# ---------------------------------------------------------------------------
# multi-seed runs and reports


@dataclass(frozen=True)
class RunRow:
    model: str
    variant: str
    strategy: str
    seed: int
    mean_displ_m: float
    final_displ_m: float


@dataclass(frozen=True)
class Aggregate:
    model: str
    variant: str
    strategy: str
    n: int
    mean_displ_mean: float
    mean_displ_std: float
    final_displ_mean: float
    final_displ_std: float


def _sample_std(values: Sequence[float]) -> float:
    return statistics.stdev(values) if len(values) > 1 else 0.0


@dataclass
class RunReport:
    rows: list[RunRow] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rows)

    def extend(self, other: "RunReport") -> None:
        self.rows.extend(other.rows)

    def aggregates(self) -> list[Aggregate]:
        """Mean and sample standard deviation per configuration (0 for one run)."""
        groups: dict[tuple[str, str, str], list[RunRow]] = {}
        for r in self.rows:
            groups.setdefault((r.model, r.variant, r.strategy), []).append(r)
        out = []
        for key, rows in groups.items():
            md = [r.mean_displ_m for r in rows]
            fd = [r.final_displ_m for r in rows]
            out.append(Aggregate(*key, len(rows), statistics.fmean(md), _sample_std(md),
                                 statistics.fmean(fd), _sample_std(fd)))
        return out


@dataclass(frozen=True)
class RunSpec:
    """One row family of a report: a labelled training configuration."""

    label_model: str
    variant: str
    config: TrainConfig


def _run_one(spec: RunSpec, seed: int, train_w, val_w, test_w) -> RunRow:
    cfg = replace(spec.config, seed=seed)
    model, _ = train(train_w, val_w, cfg)
    m = evaluate_displacement(model, test_w)
    return RunRow(spec.label_model, spec.variant, cfg.strategy, seed,
                  m.mean_displacement, m.final_displacement)


def run_multi_seed(spec: RunSpec, seeds: Sequence[int], train_w, val_w, test_w,
                   jobs: int = 1) -> RunReport:
    """Train and evaluate once per seed; rows come back in seed order."""
    if not seeds:
        raise ValueError("at least one seed is required")
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futs = [pool.submit(_run_one, spec, s, train_w, val_w, test_w) for s in seeds]
            return RunReport([f.result() for f in futs])
    return RunReport([_run_one(spec, s, train_w, val_w, test_w) for s in seeds])


def ablation_grid(base: TrainConfig = TrainConfig()) -> list[RunSpec]:
    """The 13 configurations: 5 GCN variants, 4 GAT variants, 4 strategies."""
    gcn = replace(base.model, model_kind="gcn", strategy="neighbour", use_residual=True,
                  use_ff_output=True, use_weighted_edges=False, use_edge_features=False)
    gat = replace(base.model, model_kind="gat", strategy="neighbour", use_residual=True,
                  use_ff_output=True, use_edge_features=True, use_weighted_edges=False)

    def spec(name, variant, model):
        return RunSpec(name, variant, replace(base, model=model))

    return [
        spec("gcn", "default", gcn),
        spec("gcn", "no ff output", replace(gcn, use_ff_output=False)),
        spec("gcn", "with weighted edges", replace(gcn, use_weighted_edges=True)),
        spec("gcn", "no residuals & weighted edges",
             replace(gcn, use_residual=False, use_weighted_edges=True)),
        spec("gcn", "no residuals", replace(gcn, use_residual=False)),
        spec("gat", "default", gat),
        spec("gat", "no ff output", replace(gat, use_ff_output=False)),
        spec("gat", "no residuals", replace(gat, use_residual=False)),
        spec("gat", "no edge features", replace(gat, use_edge_features=False)),
        spec("gat", "strategy", replace(gat, strategy="self")),
        spec("gat", "strategy", replace(gat, strategy="preceding")),
        spec("gat", "strategy", replace(gat, strategy="neighbour")),
        spec("gat", "strategy", replace(gat, strategy="all")),
    ]


def ablation_suite(train_w, val_w, test_w, seeds: Sequence[int],
                   base: TrainConfig = TrainConfig(), all_connections_seeds: int | None = 3,
                   jobs: int = 1) -> RunReport:
    """Run the full ablation grid. The all-connections row may use fewer seeds."""
    report = RunReport()
    for spec in ablation_grid(base):
        use = list(seeds)
        if spec.config.strategy == "all" and all_connections_seeds is not None:
            use = use[:all_connections_seeds]
        report.extend(run_multi_seed(spec, use, train_w, val_w, test_w, jobs))
    return report


def _num(v: float) -> str:
    return repr(float(v))


def rows_csv(report: RunReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ROW_COLUMNS)
    for r in report.rows:
        w.writerow([r.model, r.variant, r.strategy, r.seed, _num(r.mean_displ_m),
                    _num(r.final_displ_m)])
    return buf.getvalue()


def summary_csv(report: RunReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    for a in report.aggregates():
        w.writerow([a.model, a.variant, a.strategy, a.n, _num(a.mean_displ_mean),
                    _num(a.mean_displ_std), _num(a.final_displ_mean), _num(a.final_displ_std)])
    return buf.getvalue()


def read_rows_csv(text: str) -> RunReport:
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames != ROW_COLUMNS:
        raise ValueError("unexpected rows.csv header")
    return RunReport([RunRow(r["model"], r["variant"], r["strategy"], int(r["seed"]),
                             float(r["mean_displ_m"]), float(r["final_displ_m"]))
                      for r in reader])


def summary_svg(report: RunReport) -> str:
    """Per-configuration point cloud of seed results with a mean marker."""
    aggs = report.aggregates()
    row_h, left, width, top = 22, 260, 420, 30
    vals = [r.mean_displ_m for r in report.rows]
    lo, hi = min(vals), max(vals)
    if hi - lo < 1e-12:
        lo, hi = lo - 0.5, hi + 0.5
    pad = 0.05 * (hi - lo)
    lo, hi = lo - pad, hi + pad

    def sx(v: float) -> str:
        return f"{left + (v - lo) / (hi - lo) * width:.2f}"

    height = top + row_h * len(aggs) + 40
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{left + width + 20}" '
           f'height="{height}" font-family="sans-serif" font-size="11">',
           f'<text x="{left}" y="16">mean displacement [m]</text>']
    for i, a in enumerate(aggs):
        y = top + row_h * i + row_h / 2
        label = f"{a.model} {a.variant} ({a.strategy})"
        out.append(f'<text x="4" y="{y + 4:.1f}">{label.replace("&", "&amp;")}</text>')
        out.append(f'<line x1="{left}" y1="{y:.1f}" x2="{left + width}" y2="{y:.1f}" '
                   f'stroke="#ddd"/>')
        for r in report.rows:
            if (r.model, r.variant, r.strategy) == (a.model, a.variant, a.strategy):
                out.append(f'<circle cx="{sx(r.mean_displ_m)}" cy="{y:.1f}" r="2.5" '
                           f'fill="#4477aa" fill-opacity="0.6"/>')
        out.append(f'<rect x="{float(sx(a.mean_displ_mean)) - 1.5:.2f}" y="{y - 7:.1f}" '
                   f'width="3" height="14" fill="#cc3311"/>')
    axis_y = top + row_h * len(aggs) + 12
    out.append(f'<text x="{left}" y="{axis_y}">{lo:.3f}</text>')
    out.append(f'<text x="{left + width - 30}" y="{axis_y}">{hi:.3f}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_report(report: RunReport, out_dir) -> list[Path]:
    """Write rows.csv, summary.csv and summary.svg; output is byte-stable."""
    if not report.rows:
        raise ValueError("cannot emit an empty report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {"rows.csv": rows_csv(report), "summary.csv": summary_csv(report),
             "summary.svg": summary_svg(report)}
    paths = []
    for name, text in files.items():
        path = out / name
        path.write_text(text, encoding="utf-8", newline="\n")
        paths.append(path)
    return paths
