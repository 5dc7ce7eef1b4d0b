"""Command-line entry point: ``trajgnn <subcommand> ...``.

Every subcommand accepts ``--config FILE`` with flat ``key=value`` lines
whose keys are the long flag names (dashes or underscores). Flags given on
the command line win over the file; unknown keys are rejected.
"""
from __future__ import annotations

import argparse
import csv
import io
import logging
import re
import sys
from dataclasses import fields, replace
from pathlib import Path

from .classical import NGSIM_IDM, load_idm_params, save_idm_params, tune_idm
from .datapipe import (SynthConfig, generate_synthetic, merge_tables, parse_highd, parse_ngsim,
                       read_scenes, smooth_and_differentiate, split_dataset, window_extract,
                       write_scenes)
from .exp import (RunSpec, TrainConfig, ablation_suite, emit_report, evaluate_displacement,
                  run_multi_seed, train)
from .models import ModelConfig, load_model, save_model
from .scenegraph import Strategy

log = logging.getLogger("trajgnn")

METRIC_COLUMNS = ["predictor", "count", "mean_displ_m", "final_displ_m",
                  "displ_1s_m", "displ_2s_m", "displ_3s_m", "displ_4s_m", "displ_5s_m"]


class CliError(Exception):
    """A user-facing failure reported as a one-line diagnostic."""


# ---------------------------------------------------------------------------
# argument helpers


def parse_seeds(text: str) -> list[int]:
    """``"0..9"`` (inclusive), ``"3"`` or ``"0,2,5"``."""
    text = text.strip()
    m = re.fullmatch(r"(-?\d+)\.\.(-?\d+)", text)
    try:
        if m:
            lo, hi = int(m.group(1)), int(m.group(2))
            if hi < lo:
                raise argparse.ArgumentTypeError(f"empty seed range {text!r}")
            return list(range(lo, hi + 1))
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid seed list {text!r}") from None
    if not seeds:
        raise argparse.ArgumentTypeError("seed list is empty")
    return seeds


def read_config_file(path) -> dict[str, str]:
    """Flat ``key=value`` lines; ``#`` starts a comment."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise CliError(f"{path}:{lineno}: expected key=value")
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise CliError(f"invalid boolean {text!r}")


def _config_defaults(parser: argparse.ArgumentParser, values: dict[str, str]) -> dict:
    """Convert config-file strings using the parser's own actions."""
    actions = {a.dest: a for a in parser._actions if a.dest not in ("help", "config", "command")}
    out = {}
    for key, text in values.items():
        action = actions.get(key)
        if action is None:
            raise CliError(f"unknown config key {key!r}")
        if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            flag = _bool(text)
            out[key] = flag if isinstance(action, argparse._StoreTrueAction) else not flag
        elif isinstance(action, argparse._AppendAction):
            out[key] = [s.strip() for s in text.split(",") if s.strip()]
        else:
            conv = action.type or str
            try:
                val = conv(text)
            except (argparse.ArgumentTypeError, ValueError) as exc:
                raise CliError(f"config key {key!r}: {exc}") from None
            if action.choices is not None and val not in action.choices:
                raise CliError(f"config key {key!r}: {val!r} not in {sorted(action.choices)}")
            out[key] = val
    return out


def _require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise CliError(f"{what} not found: {p}")
    return p


def _output_file(path) -> Path:
    p = Path(path)
    if p.exists() and p.is_dir():
        raise CliError(f"output path is a directory: {p}")
    if not p.parent.exists():
        raise CliError(f"output directory does not exist: {p.parent}")
    return p


def _output_dir(path) -> Path:
    p = Path(path)
    if p.exists() and not p.is_dir():
        raise CliError(f"output path is not a directory: {p}")
    if not p.parent.exists():
        raise CliError(f"parent directory does not exist: {p.parent}")
    return p


# ---------------------------------------------------------------------------
# subcommands


def _recording_id(path: Path, index: int) -> int:
    m = re.match(r"(\d+)", path.name)
    return int(m.group(1)) if m else index


def _highd_meta_path(tracks: Path) -> Path:
    name = tracks.name
    if name.endswith("_tracks.csv"):
        return tracks.with_name(name[: -len("_tracks.csv")] + "_tracksMeta.csv")
    raise CliError(f"cannot derive tracksMeta path for {tracks}; pass --meta")


def cmd_ingest(args) -> None:
    inputs = [_require_file(p, "input file") for p in args.inputs]
    metas = args.meta or []
    if args.dataset == "highd":
        if metas and len(metas) != len(inputs):
            raise CliError("--meta must be given once per --in file")
        metas = [_require_file(m, "meta file") for m in metas] if metas else \
            [_require_file(_highd_meta_path(p), "meta file") for p in inputs]
    elif metas:
        raise CliError("--meta only applies to highd")
    out = _output_file(args.out)
    tables = []
    for i, path in enumerate(inputs, 1):
        if args.dataset == "ngsim":
            tables.append(parse_ngsim(path, recording_id=i))
        else:
            tables.append(parse_highd(path, metas[i - 1], recording_id=_recording_id(path, i)))
    table = smooth_and_differentiate(merge_tables(tables), span_s=args.span)
    if table.dropped_tracks:
        log.warning("dropped %d tracks shorter than 3 samples", table.dropped_tracks)
    scenes = window_extract(table, stride_s=args.stride)
    write_scenes(scenes, out)
    log.info("wrote %d windows to %s", len(scenes), out)


def _parse_synth_value(name: str, text: str, current):
    try:
        if isinstance(current, tuple):
            parts = [float(v) for v in text.replace("(", "").replace(")", "").split(",")]
            if len(parts) != 2:
                raise ValueError("expected two comma-separated numbers")
            return tuple(parts)
        if isinstance(current, bool):
            return _bool(text)
        if isinstance(current, int):
            return int(text)
        if isinstance(current, float):
            return float(text)
        return text
    except ValueError as exc:
        raise CliError(f"synthetic config key {name!r}: {exc}") from None


def synth_config_from_file(path) -> SynthConfig:
    """A :class:`SynthConfig` from ``key=value`` lines; ranges are written ``lo,hi``."""
    values = read_config_file(path)
    base = SynthConfig()
    known = {f.name for f in fields(SynthConfig)}
    kwargs = {}
    for key, text in values.items():
        if key not in known:
            raise CliError(f"unknown synthetic config key {key!r}")
        kwargs[key] = _parse_synth_value(key, text, getattr(base, key))
    return replace(base, **kwargs)


def cmd_synth(args) -> None:
    cfg = synth_config_from_file(_require_file(args.synth_config, "synthetic config"))
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    out = _output_file(args.out)
    scenes = window_extract(generate_synthetic(cfg), stride_s=args.stride)
    write_scenes(scenes, out)
    log.info("wrote %d windows to %s", len(scenes), out)


def cmd_split(args) -> None:
    src = _require_file(args.inputs[0], "scene file") if len(args.inputs) == 1 else None
    if src is None:
        raise CliError("split takes exactly one --in scene file")
    out = _output_dir(args.out_dir)
    parts = split_dataset(read_scenes(src), args.dataset)
    out.mkdir(exist_ok=True)
    for name, scenes in parts.items():
        write_scenes(scenes, out / f"{name}.csv")
        log.info("%s: %d windows", name, len(scenes))


def _model_config(args) -> ModelConfig:
    return ModelConfig(model_kind=args.model, hidden_dim=args.hidden_dim, heads=args.heads,
                       use_residual=not args.no_residual, use_ff_output=not args.no_ff_output,
                       use_edge_features=not args.no_edge_features,
                       use_weighted_edges=args.weighted_edges, strategy=args.strategy)


def _train_config(args, model: ModelConfig) -> TrainConfig:
    return TrainConfig(model=model, batch_size=args.batch_size, max_epochs=args.epochs,
                       patience=args.patience if args.patience > 0 else None,
                       seed=args.seed if getattr(args, "seed", None) is not None else 0,
                       learning_rate=args.lr)


def cmd_train(args) -> None:
    train_p = _require_file(args.train, "training scenes")
    val_p = _require_file(args.val, "validation scenes")
    out = _output_file(args.out)
    cfg = _train_config(args, _model_config(args))
    model, hist = train(read_scenes(train_p), read_scenes(val_p), cfg)
    save_model(model, out)
    log.info("best epoch %d, validation mean displacement %.4f m", hist.best_epoch,
             min(hist.val_mean_displacement))


def _metrics_csv(label: str, m) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    w.writerow([label, m.count, repr(m.mean_displacement), repr(m.final_displacement),
                *[repr(float(v)) for v in m.per_step]])
    return buf.getvalue()


def cmd_eval(args) -> None:
    scenes_p = _require_file(args.scenes, "scene file")
    if (args.model_file is None) == (args.baseline is None):
        raise CliError("give exactly one of --model-file and --baseline")
    if args.idm_params is not None and args.baseline != "idm":
        raise CliError("--idm-params only applies to --baseline idm")
    if args.model_file is not None:
        predictor, label = load_model(_require_file(args.model_file, "model file")), "model"
    elif args.baseline == "cvm":
        predictor, label = "cvm", "cvm"
    else:
        predictor = (load_idm_params(_require_file(args.idm_params, "IDM parameter file"))
                     if args.idm_params else None)
        label = "idm"
    out = _output_file(args.out) if args.out else None
    scenes = read_scenes(scenes_p)
    if predictor is None:
        predictor = NGSIM_IDM
    m = evaluate_displacement(predictor, scenes)
    text = _metrics_csv(label, m)
    if out is None:
        sys.stdout.write(text)
    else:
        out.write_text(text, encoding="utf-8", newline="\n")


def cmd_tune_idm(args) -> None:
    scenes_p = _require_file(args.scenes, "scene file")
    out = _output_file(args.out)
    params = tune_idm(read_scenes(scenes_p), sample_budget=args.budget, seed=args.seed or 0)
    save_idm_params(params, out)
    log.info("tuned IDM parameters: %s", params)


def cmd_ablate(args) -> None:
    root = Path(args.scenes_dir)
    paths = {n: _require_file(root / f"{n}.csv", f"{n} scenes") for n in ("train", "val", "test")}
    out = _output_dir(args.out_dir)
    base = _train_config(args, ModelConfig(hidden_dim=args.hidden_dim, heads=args.heads))
    scenes = {n: read_scenes(p) for n, p in paths.items()}
    report = ablation_suite(scenes["train"], scenes["val"], scenes["test"], args.seeds, base,
                            all_connections_seeds=args.all_seeds or None, jobs=args.jobs)
    if args.with_ff:
        ff = RunSpec("ff", "baseline", replace(base, model=replace(base.model, model_kind="ff")))
        report.extend(run_multi_seed(ff, args.seeds, scenes["train"], scenes["val"],
                                     scenes["test"], args.jobs))
    emit_report(report, out)


# ---------------------------------------------------------------------------
# parser


def _positive_int(text: str) -> int:
    val = int(text)
    if val < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return val


def _add_training_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--hidden-dim", type=_positive_int, default=256)
    p.add_argument("--heads", type=_positive_int, default=4)
    p.add_argument("--batch-size", type=_positive_int, default=32)
    p.add_argument("--epochs", type=_positive_int, default=50)
    p.add_argument("--patience", type=int, default=10, help="0 disables early stopping")
    p.add_argument("--lr", type=float, default=1e-3)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trajgnn",
                                     description="Graph-network vehicle trajectory prediction.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, func, help_text, config=True):
        p = sub.add_parser(name, help=help_text)
        if config:
            p.add_argument("--config", help="flat key=value file; flags override it")
        p.set_defaults(func=func)
        return p

    p = add("ingest", cmd_ingest, "raw NGSIM/HighD CSV to canonical scenes")
    p.add_argument("--dataset", choices=["ngsim", "highd"], required=True)
    p.add_argument("--in", dest="inputs", action="append", required=True,
                   help="input CSV (repeat for several recordings)")
    p.add_argument("--meta", action="append", help="HighD tracksMeta CSV per --in")
    p.add_argument("--out", required=True)
    p.add_argument("--stride", type=_positive_int, default=5, help="window stride in seconds")
    p.add_argument("--span", type=float, default=0.5, help="smoothing span in seconds")

    p = add("synth", cmd_synth, "synthetic traffic to canonical scenes", config=False)
    p.add_argument("--config", dest="synth_config", required=True, metavar="PATH",
                   help="key=value file of synthetic generator settings")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--stride", type=_positive_int, default=5)

    p = add("split", cmd_split, "split a scene file into train/val/test")
    p.add_argument("--dataset", choices=["ngsim", "highd"], required=True)
    p.add_argument("--in", dest="inputs", action="append", required=True)
    p.add_argument("--out-dir", required=True)

    p = add("train", cmd_train, "train one model")
    p.add_argument("--model", choices=["ff", "gcn", "gat"], required=True)
    p.add_argument("--strategy", choices=[s.value for s in Strategy], default="neighbour")
    p.add_argument("--no-residual", action="store_true")
    p.add_argument("--no-ff-output", action="store_true")
    p.add_argument("--no-edge-features", action="store_true")
    p.add_argument("--weighted-edges", action="store_true")
    p.add_argument("--train", required=True)
    p.add_argument("--val", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    _add_training_flags(p)

    p = add("eval", cmd_eval, "displacement metrics of a model or baseline")
    p.add_argument("--model-file")
    p.add_argument("--baseline", choices=["cvm", "idm"])
    p.add_argument("--idm-params", help="IDM parameter file (default: NGSIM preset)")
    p.add_argument("--scenes", required=True)
    p.add_argument("--out", help="metrics CSV (default: stdout)")

    p = add("tune-idm", cmd_tune_idm, "fit IDM parameters by guided random search")
    p.add_argument("--scenes", required=True)
    p.add_argument("--budget", type=_positive_int, default=20000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = add("ablate", cmd_ablate, "run the ablation grid over several seeds")
    p.add_argument("--scenes-dir", required=True, help="directory with train/val/test.csv")
    p.add_argument("--seeds", type=parse_seeds, default=parse_seeds("0..9"))
    p.add_argument("--all-seeds", type=int, default=3,
                   help="seeds for the all-connections row (0 = all)")
    p.add_argument("--with-ff", action="store_true", help="also run the FF baseline")
    p.add_argument("--jobs", type=_positive_int, default=1)
    p.add_argument("--out-dir", required=True)
    _add_training_flags(p)
    return parser


def parse_args(argv: list[str]) -> argparse.Namespace:
    """Parse ``argv``, folding in the subcommand's ``--config`` file (flags win)."""
    parser = build_parser()
    sub_action = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    # Config files may supply required options, so those are checked after merging.
    required: dict[str, list[argparse.Action]] = {}
    for name, sub in sub_action.choices.items():
        required[name] = [a for a in sub._actions if a.required]
        for a in required[name]:
            a.required = False
    args = parser.parse_args(argv)
    if args.command != "synth" and getattr(args, "config", None):
        sub = sub_action.choices[args.command]
        values = read_config_file(_require_file(args.config, "config file"))
        sub.set_defaults(**_config_defaults(sub, values))
        args = parser.parse_args(argv)
    for a in required[args.command]:
        if getattr(args, a.dest, None) is None:
            raise CliError(f"missing required option {a.option_strings[0]}")
    return args


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    command = next((a for a in argv if not a.startswith("-")), "trajgnn")
    try:
        args = parse_args(argv)
        command = args.command
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s: %(message)s")
        args.func(args)
    except CliError as exc:
        print(f"trajgnn {command}: error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, KeyError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"trajgnn {command}: error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
