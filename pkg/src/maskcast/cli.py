"""Command-line entry point.

``maskcast [--config C] [--seed S] [--out DIR] <command> ...``

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 training failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import dataio
from .config import ExperimentConfig
from .dataio import FeatureTable, SyntheticSpec, concat_tables, split_dataset
from .errors import ConfigError, DataError, TrainingError
from .experiment import train_formulation
from .forecast_eval import EvalReport, ForecastRequest, backtest, emit_report, forecast
from .models import ARCHITECTURES, Checkpoint, load_checkpoint, save_checkpoint
from .training import METHODS

logger = logging.getLogger("maskcast")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_TRAINING = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="maskcast", description="Masked multi-step probabilistic load forecasting.")
    p.add_argument("--config", type=Path, help="experiment config (JSON)")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--out", type=Path, default=Path("runs"), help="output root (default: runs)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("ingest", help="hourly zonal CSVs -> validated daily-peak dataset")
    s.add_argument("files", nargs="*", type=Path)
    s.add_argument("--dataset", type=Path, help="output CSV (default: <out>/dataset.csv)")

    s = sub.add_parser("synth", help="write a synthetic daily dataset")
    s.add_argument("--dataset", type=Path, help="output CSV (default: <out>/synthetic.csv)")
    s.add_argument("--days", type=int)
    s.add_argument("--zones", type=int)

    s = sub.add_parser("train", help="train one formulation from the config")
    s.add_argument("--method", choices=METHODS)
    s.add_argument("--model", choices=ARCHITECTURES, help="overrides model.architecture")
    s.add_argument("--force", action="store_true", help="retrain even if an up-to-date checkpoint exists")

    s = sub.add_parser("backtest", help="rolling-origin backtest over the test split")
    s.add_argument("--checkpoint", type=Path, action="append", default=[],
                   help="repeatable; default is the config's own model and method")
    s.add_argument("--all", action="store_true", help="every checkpoint of the experiment")

    s = sub.add_parser("forecast", help="one forecast from a checkpoint")
    s.add_argument("--checkpoint", type=Path)
    s.add_argument("--origin", required=True, help="first forecast day (YYYY-MM-DD)")
    s.add_argument("--length", type=int, required=True, help="forecast length l_f >= 1")

    s = sub.add_parser("report", help="rebuild report files from saved backtest records")
    s.add_argument("--reports", type=Path, help="directory of records_*.csv (default: the experiment's)")
    s.add_argument("--max-horizon", type=int)
    s.add_argument("--plot", action="store_true")
    return p


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _require_config(args) -> ExperimentConfig:
    if args.config is None:
        raise ConfigError(f"{args.command} needs --config")
    cfg = ExperimentConfig.load(args.config, seed=args.seed)
    cfg.data.check_paths()
    return cfg


def _experiment_dir(args, cfg: ExperimentConfig) -> Path:
    return args.out / cfg.name


def _log_to_file(path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    h = logging.FileHandler(path, mode="a")
    h.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    logging.getLogger().addHandler(h)


def load_table(cfg: ExperimentConfig) -> FeatureTable:
    src = cfg.data
    if src.files:
        return dataio.downsample_daily_peak(dataio.ingest_hourly(src.files))
    if src.dataset is not None:
        return FeatureTable.read_csv(src.dataset)
    return dataio.generate_synthetic(src.synthetic)


def _split(cfg: ExperimentConfig, table: FeatureTable):
    o = cfg.split
    return split_dataset(table, o.train_end_year, o.test_year,
                         n_pretest_days=o.n_pretest_days, validation_fraction=o.validation_fraction)


def _checkpoint_record(cfg: ExperimentConfig) -> dict:
    d = cfg.to_dict()
    d.pop("evaluation")
    return d


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_ingest(args) -> int:
    if not args.files:
        raise ConfigError("ingest needs at least one input file")
    missing = [str(f) for f in args.files if not f.exists()]
    if missing:
        raise DataError(f"input files not found: {missing}")
    hourly = dataio.ingest_hourly(args.files)
    table = dataio.downsample_daily_peak(hourly)
    dest = args.dataset or args.out / "dataset.csv"
    dest.parent.mkdir(parents=True, exist_ok=True)
    table.write_csv(dest)
    summary = dataio.ingest_summary(hourly)
    print(f"{len(hourly)} hourly rows, {len(table)} days, {table.n_zones} zones: {', '.join(table.zones)}")
    for (zone, year), n in sorted(summary.items()):
        print(f"  {zone} {year}: {n} rows")
    print(f"wrote {dest}")
    return EXIT_OK


def cmd_synth(args) -> int:
    spec = SyntheticSpec()
    if args.config is not None:
        cfg = ExperimentConfig.load(args.config, seed=args.seed if args.seed is not None else 0)
        if cfg.data.synthetic is None:
            raise ConfigError("synth needs a config whose data section is 'synthetic'")
        spec = cfg.data.synthetic
    overrides = {k: v for k, v in (("n_days", args.days), ("n_zones", args.zones), ("seed", args.seed))
                 if v is not None}
    spec = dataclasses.replace(spec, **overrides)
    table = dataio.generate_synthetic(spec)
    dest = args.dataset or args.out / "synthetic.csv"
    dest.parent.mkdir(parents=True, exist_ok=True)
    table.write_csv(dest)
    print(f"{len(table)} days x {table.n_zones} zones ({table.dates[0]} .. {table.dates[-1]}); wrote {dest}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _require_config(args).with_overrides(method=args.method, architecture=args.model)
    exp = _experiment_dir(args, cfg)
    _log_to_file(exp / "logs" / "train.log")
    tag = f"{cfg.model.architecture}-{cfg.training.method}"
    ckpt_path = exp / "checkpoints" / f"{tag}.pt"
    record = _checkpoint_record(cfg)
    if ckpt_path.exists() and not args.force:
        old = load_checkpoint(ckpt_path)
        if old.extra.get("experiment") == record:
            print(f"{tag}: checkpoint up to date (best validation loss {old.extra['best_val_loss']:.6f}); "
                  "use --force to retrain")
            return EXIT_OK
    split = _split(cfg, load_table(cfg))
    logger.info("training %s on %d train / %d validation days", tag, len(split.train), len(split.validation))
    ckpt, report = train_formulation(split, cfg.model, cfg.window, cfg.training)
    ckpt.extra["experiment"] = record
    save_checkpoint(ckpt_path, ckpt)
    report.write_jsonl(exp / "logs" / f"{tag}.epochs.jsonl")
    print(f"{tag}: best validation loss {report.best_val_loss:.6f} at epoch {report.best_epoch}; wrote {ckpt_path}")
    return EXIT_OK


def _check_compatible(ckpt: Checkpoint, cfg: ExperimentConfig, table: FeatureTable, path: Path) -> None:
    if ckpt.window != cfg.window:
        raise ConfigError(f"{path}: checkpoint window {ckpt.window} does not match config {cfg.window}")
    channels = tuple(table.predictor_channels + table.forecast_channels)
    if tuple(ckpt.stats.channels) != channels:
        raise ConfigError(f"{path}: checkpoint channels {list(ckpt.stats.channels)} do not match the data")


def _resolve_checkpoints(args, cfg: ExperimentConfig) -> list[Path]:
    ckpt_dir = _experiment_dir(args, cfg) / "checkpoints"
    if args.all:
        paths = sorted(ckpt_dir.glob("*.pt"))
        if not paths:
            raise DataError(f"no checkpoints in {ckpt_dir}")
        return paths
    paths = list(args.checkpoint) or [ckpt_dir / f"{cfg.model.architecture}-{cfg.training.method}.pt"]
    missing = [str(p) for p in paths if not p.exists()]
    if missing:
        raise DataError(f"checkpoint not found: {missing}")
    return paths


def backtest_table(cfg: ExperimentConfig, split) -> tuple[FeatureTable, int]:
    """Test days prefixed with enough pre-test days to serve as history; returns (table, first test index)."""
    pre = concat_tables([split.train, split.validation])
    k = min(len(pre), cfg.window.length)
    return concat_tables([pre.slice(len(pre) - k, len(pre)), split.test]), k


def cmd_backtest(args) -> int:
    cfg = _require_config(args)
    exp = _experiment_dir(args, cfg)
    _log_to_file(exp / "logs" / "backtest.log")
    paths = _resolve_checkpoints(args, cfg)
    table, first = backtest_table(cfg, _split(cfg, load_table(cfg)))
    ev = cfg.evaluation
    reports = []
    for path in paths:
        ckpt = load_checkpoint(path)
        _check_compatible(ckpt, cfg, table, path)
        r = backtest(ckpt.method, ckpt.model, table, ckpt.stats, ckpt.window, eval_start=first,
                     max_horizon=ev.max_horizon, seed=cfg.seed, batch_size=ev.batch_size)
        logger.info("%s: %d records", r.tag, len(r.records))
        reports.append(r)
    out = exp / "reports"
    emit_report(reports, out, fan_origin=ev.fan_origin, plot=ev.plot)
    for r in sorted(reports, key=lambda r: r.tag):
        cov = "" if r.coverage is None else f", 5-95% coverage {r.coverage:.3f}"
        print(f"{r.tag}: aggregate MAPE {r.aggregate_mape:.4f}{cov}")
    print(f"reports in {out}")
    return EXIT_OK


def cmd_forecast(args) -> int:
    if args.length < 1:
        raise ConfigError("--length must be >= 1")
    cfg = _require_config(args)
    exp = _experiment_dir(args, cfg)
    path = args.checkpoint or exp / "checkpoints" / f"{cfg.model.architecture}-{cfg.training.method}.pt"
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    ckpt = load_checkpoint(path)
    table = load_table(cfg)
    _check_compatible(ckpt, cfg, table, path)
    try:
        origin = np.datetime64(args.origin, "D")
    except ValueError as exc:
        raise ConfigError(f"bad --origin {args.origin!r}") from exc
    request = ForecastRequest.from_table(table, origin, args.length)
    result = forecast(ckpt.method, ckpt.model, request, ckpt.stats, ckpt.window, seed=cfg.seed)
    t = table.index_of(origin)
    frame = result.to_frame(table.demand[t : t + args.length])
    dest = exp / "reports" / f"forecast_{ckpt.tag}_{origin}_{args.length}.csv"
    dest.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(dest, index=False, float_format="%.10g", lineterminator="\n")
    print(f"{ckpt.tag}: {args.length}-day forecast from {origin} for {len(result.zones)} zones; wrote {dest}")
    return EXIT_OK


def cmd_report(args) -> int:
    if args.reports is not None:
        src = args.reports
    else:
        src = _experiment_dir(args, _require_config(args)) / "reports"
    files = sorted(src.glob("records_*.csv"))
    if not files:
        raise DataError(f"no records_*.csv in {src}")
    reports = [EvalReport.from_records_csv(f) for f in files]
    if args.max_horizon is not None:
        if args.max_horizon < 1:
            raise ConfigError("--max-horizon must be >= 1")
        reports = [r.restrict(args.max_horizon) for r in reports]
    emit_report(reports, src, plot=args.plot)
    for r in sorted(reports, key=lambda r: r.tag):
        print(f"{r.tag}: aggregate MAPE {r.aggregate_mape:.4f}")
    return EXIT_OK


COMMANDS = {
    "ingest": cmd_ingest,
    "synth": cmd_synth,
    "train": cmd_train,
    "backtest": cmd_backtest,
    "forecast": cmd_forecast,
    "report": cmd_report,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    root = logging.getLogger()
    console = logging.StreamHandler(sys.stderr)
    console.setLevel(logging.INFO if args.verbose else logging.WARNING)
    console.setFormatter(logging.Formatter("%(levelname)s: %(message)s"))
    root.addHandler(console)
    root.setLevel(logging.INFO)
    try:
        return COMMANDS[args.command](args)
    except TrainingError as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    finally:
        root.removeHandler(console)
        for h in list(root.handlers):
            if isinstance(h, logging.FileHandler):
                root.removeHandler(h)
                h.close()


if __name__ == "__main__":
    sys.exit(main())
