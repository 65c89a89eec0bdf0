"""Command line entry point: ``pumpwatch <subcommand> ...``.

Exit codes: 0 success, 2 invalid input or config, 1 anything that fails at run time.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
import warnings
from dataclasses import fields
from pathlib import Path

import numpy as np
import yaml

from . import config as cfgmod
from . import pipeline
from .dataset import load_prepared, save_prepared
from .errors import ConfigInvalid, PumpwatchError, ValidationError
from .ingest import FEATURE_COLUMNS, ChunkSeries, aggregate_chunks, load_feature_csv, parse_trades, write_feature_csv
from .nn import load_checkpoint
from .train_eval import read_results_csv, report

log = logging.getLogger("pumpwatch")

_OVERRIDABLE = [f for f in fields(cfgmod.RunConfig) if f.name in cfgmod._TOP]


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", "-c", help="YAML run config (defaults apply to missing keys)")
    g = p.add_argument_group("config overrides")
    for f in _OVERRIDABLE:
        g.add_argument(_flag(f.name), dest=f"ov_{f.name}", metavar="VALUE", help=f"overrides `{f.name}`")
    g.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any key, e.g. model.clstm.conv_out=64")


def _override_value(name: str, raw: str):
    if name in ("seeds", "masked_columns"):
        if raw.strip() in ("", "[]"):
            return []
        return [yaml.safe_load(x) for x in raw.strip("[]").split(",")]
    return yaml.safe_load(raw)


def config_from_args(args) -> cfgmod.RunConfig:
    doc = {}
    if args.config:
        text = Path(args.config).read_text(encoding="utf-8")
        loaded = yaml.safe_load(text) or {}
        if not isinstance(loaded, dict):
            raise ConfigInvalid([f"{args.config}: config document must be a mapping"])
        doc = cfgmod.flatten(loaded)
    for f in _OVERRIDABLE:
        raw = getattr(args, f"ov_{f.name}")
        if raw is not None:
            doc[f.name] = _override_value(f.name, raw)
    for item in args.set:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigInvalid([f"--set {item!r}: expected KEY=VALUE"])
        doc[key.strip()] = _override_value(key.strip(), raw)
    return cfgmod.apply_env(cfgmod.from_dict(doc), os.environ)


# --- subcommands -------------------------------------------------------------------

def cmd_aggregate(args) -> int:
    fmt = args.format or ("jsonl" if str(args.raw).endswith((".jsonl", ".json")) else "csv")
    trades = parse_trades(Path(args.raw), format=fmt, allow_empty=True)
    spans = []
    for s in args.label_span:
        a, sep, b = s.partition(":")
        if not sep:
            raise ValidationError(f"--label-span {s!r}: expected START_MS:END_MS")
        spans.append((int(a), int(b)))
    if not trades:
        series = ChunkSeries(args.chunk_size, np.zeros((0, len(FEATURE_COLUMNS))), [])
        print(f"warning: {args.raw} contains no trades; writing a header-only file", file=sys.stderr)
    else:
        series = aggregate_chunks(
            trades, args.chunk_size, window=args.window, pump_index=args.pump_index,
            label_spans=spans, symbols=[args.symbol],
        )
    write_feature_csv(series, args.out)
    pumps = len(set(series.pump_index.tolist()))
    print(f"chunks: {len(series)}, pumps: {pumps}, positives: {int(series.labels.sum())} -> {args.out}")
    return 0


def cmd_prepare(args) -> int:
    cfg = config_from_args(args)
    out = Path(args.out or Path(cfg.output_dir) / pipeline.PREPARED_NAME)
    out.parent.mkdir(parents=True, exist_ok=True)
    data = pipeline.prepare_data(cfg)
    save_prepared(data, out)
    val_csv = out.with_name(pipeline.VAL_CSV_NAME)
    write_feature_csv(pipeline.validation_series(cfg), val_csv)
    print(
        f"train segments: {len(data.train)} ({int(data.train.y.sum())} positive), "
        f"validation segments: {len(data.val)} ({int(data.val.y.sum())} positive)"
    )
    print(f"config hash: {data.config_hash}")
    print(f"wrote {out} and {val_csv}")
    return 0


def cmd_train(args) -> int:
    cfg = config_from_args(args)
    out_dir = Path(cfg.output_dir)

    def progress(rec):
        print(
            f"epoch {rec.epoch}: loss {rec.train_loss:.6f} precision {rec.val_precision:.4f} "
            f"recall {rec.val_recall:.4f} f1 {rec.val_f1:.4f}",
            file=sys.stderr,
        )

    out = pipeline.run_training(cfg, out_dir, on_epoch=None if args.quiet else progress)
    (out_dir / "config.yaml").write_text(cfgmod.dumps(cfg), encoding="utf-8")
    print(out.summary)
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    data = load_prepared(args.dataset)
    if data is None:
        raise ValidationError(f"{args.dataset}: not a prepared dataset (or from an older format)")
    metrics, table = pipeline.evaluate(ckpt, data, args.threshold, sweep=args.sweep)
    text = pipeline.format_metrics(metrics)
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    if table is not None:
        csv_text = pipeline.sweep_csv(table)
        if args.sweep_out:
            Path(args.sweep_out).write_text(csv_text, encoding="utf-8")
        else:
            sys.stdout.write(csv_text)
    return 0


def cmd_replay(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    series = load_feature_csv(args.features, chunk_size=ckpt.extra.get("chunk_size"))
    sink = open(args.out, "w", encoding="utf-8") if args.out else sys.stdout
    alerts = 0
    try:
        sink.write(pipeline.REPLAY_HEADER + "\n")
        for ev in pipeline.replay(ckpt, series, speed=args.speed, threshold=args.threshold):
            sink.write(ev.line() + "\n")
            sink.flush()
            alerts += ev.alert
    finally:
        if sink is not sys.stdout:
            sink.close()
    print(f"replayed {len(series)} chunks, {alerts} alerts", file=sys.stderr)
    return 0


def cmd_report(args) -> int:
    rows = []
    for path in args.results:
        with open(path, newline="", encoding="utf-8") as fh:
            try:
                rows.extend(read_results_csv(fh))
            except ValueError as exc:
                raise ValidationError(f"{path}: {exc}") from None
    rep = report(rows)
    print(rep.text, end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(rep.text, encoding="utf-8")
        (out / "report.csv").write_text(rep.csv, encoding="utf-8")
        (out / "curves.csv").write_text(rep.curves_csv, encoding="utf-8")
    return 0


def cmd_init_config(args) -> int:
    text = cfgmod.dumps(cfgmod.quickstart(args.model, output_dir=args.output_dir))
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        print(f"wrote {args.out}")
    else:
        sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pumpwatch", description="Pump-and-dump detection on chunked trade data.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("aggregate", help="bucket raw trades into a feature CSV")
    p.add_argument("raw", help="trades file (.csv or .jsonl)")
    p.add_argument("--chunk-size", type=int, default=15, choices=(5, 15, 25))
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=("csv", "jsonl"))
    p.add_argument("--window", type=int, default=10, help="rolling window in chunks")
    p.add_argument("--pump-index", type=int, default=0)
    p.add_argument("--symbol", default="UNKNOWN")
    p.add_argument("--label-span", action="append", default=[], metavar="START_MS:END_MS")
    p.set_defaults(func=cmd_aggregate)

    p = sub.add_parser("prepare", help="build and cache train/validation segments")
    _add_config_args(p)
    p.add_argument("--out", help="cache path (default: <output_dir>/prepared.npz)")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train one model per seed and write checkpoints + results.csv")
    _add_config_args(p)
    p.add_argument("--quiet", "-q", action="store_true", help="no per-epoch lines")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a prepared dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True, help="prepared.npz written by prepare/train")
    p.add_argument("--threshold", type=float)
    p.add_argument("--sweep", action="store_true", help="also emit the 0.00..1.00 threshold table")
    p.add_argument("--sweep-out", help="write the sweep CSV here instead of stdout")
    p.add_argument("--out", help="write the metrics line here too")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("replay", help="stream a feature CSV through a checkpoint, one chunk at a time")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--speed", type=float, default=0.0, help="playback multiplier; 0 = no waiting")
    p.add_argument("--threshold", type=float)
    p.add_argument("--out", help="alert log path (default: stdout)")
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("report", help="summarise one or more results.csv files")
    p.add_argument("results", nargs="+")
    p.add_argument("--out", help="directory for report.txt, report.csv and curves.csv")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("init-config", help="write a quick-start config for the synthetic fixture")
    p.add_argument("--model", default="clstm", choices=cfgmod.MODELS)
    p.add_argument("--output-dir", default="runs/quickstart")
    p.add_argument("--out")
    p.set_defaults(func=cmd_init_config)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            return args.func(args)
    except ConfigInvalid as exc:
        for problem in exc.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return 2
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        where = f"{exc.filename}: " if exc.filename else ""
        print(f"error: {where}{exc.strerror or exc}", file=sys.stderr)
        return 1
    except (PumpwatchError, ArithmeticError, RuntimeError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
