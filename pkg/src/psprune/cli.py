"""``psprune`` command line.

Failures print one line to stderr, ``error kind=<kind> reason=<json string>``,
and exit with 1 (config), 2 (data) or 3 (divergence).
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .compact import CompactionError, compression_report, fold_and_compact
from .config import (DATA_ROOT_ENV, RunConfig, arch_dict, load_config, load_datasets, resolve_data_path,
                     load_file_dataset)
from .data import DataError, Dataset, IDX_IMAGES_MAGIC, make_synthetic, subtract_mean
from .layers import ModelError, build_model
from .train import ConfigError, RunLog, TrainingDiverged, ablation_sweep, evaluate, sweep_csv, train

EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 1, 2, 3


class CliError(Exception):
    def __init__(self, code: int, kind: str, reason: str):
        super().__init__(reason)
        self.code, self.kind, self.reason = code, kind, reason


def _fail(code, kind, reason):
    raise CliError(code, kind, str(reason))


# ------------------------------------------------------------------ train

def _build(cfg: RunConfig, input_shape):
    return build_model(arch_dict(cfg), cfg.data["num_classes"], input_shape, cfg.train.seed)


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    train_ds, val_ds = load_datasets(cfg)
    model = _build(cfg, train_ds.input_shape)
    run_id = args.run_id or Path(args.config).stem
    log_path, ckpt_path = cfg.out_path("log"), cfg.out_path("checkpoint")
    log_path.parent.mkdir(parents=True, exist_ok=True)
    try:
        model, log = train(model, train_ds, cfg.train, val_ds, run_id=run_id)
    except TrainingDiverged as exc:
        _fail(EXIT_DIVERGED, "divergence", f"{exc}")
    log_path.write_text(log.to_jsonl())
    save_checkpoint(ckpt_path, Checkpoint(model, cfg.to_dict(), train_ds.mean, {}, {"run_id": run_id}))
    last = log.records[-1] if log.records else {}
    print(f"checkpoint={ckpt_path} log={log_path} epochs={len(log.records)} "
          f"val_error={last.get('val_error', float('nan')):.2f} sparsity={last.get('total_sparsity', 0.0):.4f}")
    return 0


# ------------------------------------------------------------ prune-export

def cmd_prune_export(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    if ckpt.model.compacted:
        _fail(EXIT_CONFIG, "config", f"checkpoint {args.ckpt} is already compacted")
    original = ckpt.model
    compact, plan = fold_and_compact(original)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out, Checkpoint(compact, ckpt.config, ckpt.data_mean, plan.to_dict(), ckpt.extra))
    report = compression_report(original, compact, plan)
    json_path, csv_path = out.with_suffix(".report.json"), out.with_suffix(".report.csv")
    json_path.write_text(report.to_json())
    csv_path.write_text(report.to_csv())
    t = report.total
    print(f"compacted={out} params={t['params_before']}->{t['params_after']} "
          f"macs={t['macs_before']}->{t['macs_after']} layers={t['layers_before']}->{t['layers_after']} "
          f"report={json_path}")
    return 0


# ------------------------------------------------------------------- eval

def _sniff_and_load(path: Path, num_classes: int) -> Dataset:
    if not path.exists():
        _fail(EXIT_DATA, "data", f"dataset file not found: {path}")
    with open(path, "rb") as f:
        head = f.read(4)
    source = "idx" if int.from_bytes(head.ljust(4, b"\0"), "big") == IDX_IMAGES_MAGIC else "cifar"
    return load_file_dataset(source, path, num_classes, "val")


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    model = ckpt.model
    if args.data == "synthetic":
        cfg = RunConfig.from_dict(ckpt.config)
        ds = make_synthetic(cfg.synthetic_spec(), cfg.data["seed"], "val")
        num_classes = ds.num_classes
    else:
        num_classes = int(ckpt.config.get("data", {}).get("num_classes", model.num_classes))
        ds = _sniff_and_load(resolve_data_path(args.data, Path(".")), num_classes)
    if ckpt.data_mean is not None:
        ds = subtract_mean(ds, ckpt.data_mean)
    if ds.input_shape != tuple(model.input_shape):
        _fail(EXIT_DATA, "data", f"dataset images {ds.input_shape} do not match model input {tuple(model.input_shape)}")
    top1, top5 = evaluate(model, ds)
    line = f"top1_error={top1:.2f}"
    if top5 is not None:
        line += f" top5_error={top5:.2f}"
    print(line + f" samples={len(ds)}")
    return 0


# ----------------------------------------------------------------- report

REPORT_COLUMNS = ["run_id", "epoch", "lr", "train_loss", "val_error", "val_top5_error", "total_sparsity"]


def read_logs(paths) -> list[RunLog]:
    logs = []
    for p in paths:
        try:
            text = Path(p).read_text()
        except OSError as exc:
            _fail(EXIT_DATA, "data", f"cannot read log {p}: {exc.strerror}")
        try:
            logs.append(RunLog.from_jsonl(text))
        except (ValueError, KeyError) as exc:
            _fail(EXIT_DATA, "data", f"log {p}: {exc}")
    versions = {r.get("format_version") for log in logs for r in log.records}
    if len(versions) > 1:
        _fail(EXIT_DATA, "data", f"mixed log format versions {sorted(map(str, versions))}")
    return logs


def report_csv(logs) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for log in logs:
        for r in log.records:
            w.writerow({k: r.get(k, "") if r.get(k) is not None else "" for k in REPORT_COLUMNS})
    return buf.getvalue()


def histogram_csv(hist: dict) -> str:
    counts = hist["counts"]
    edges = np.linspace(hist["lo"], hist["hi"], len(counts) + 1)
    rows = ["bin_lo,bin_hi,count"] + [f"{edges[i]!r},{edges[i + 1]!r},{c}" for i, c in enumerate(counts)]
    return "\n".join(rows) + "\n"


def cmd_report(args) -> int:
    logs = read_logs(args.logs)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report_csv(logs))
    written = 0
    wanted_epochs = set(args.hist_epoch or [])
    for log in logs:
        for r in log.records:
            if wanted_epochs and r["epoch"] not in wanted_epochs:
                continue
            if not args.hist_layer and not wanted_epochs:
                continue
            for layer, hist in r.get("alpha_hist", {}).items():
                if args.hist_layer and layer not in args.hist_layer:
                    continue
                hp = out.with_name(f"{out.stem}.hist.{log.run_id}.{layer}.e{r['epoch']}.csv")
                hp.write_text(histogram_csv(hist))
                written += 1
    print(f"report={out} rows={sum(len(l.records) for l in logs)} histograms={written}")
    return 0


# ------------------------------------------------------------------ sweep

def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    train_ds, val_ds = load_datasets(cfg)
    eps = [float(v) for v in args.epsilons.split(",")] if args.epsilons else None
    lams = [float(v) for v in args.lambdas.split(",")] if args.lambdas else None
    try:
        rows = ablation_sweep(lambda: _build(cfg, train_ds.input_shape), train_ds, val_ds, cfg.train, eps, lams)
    except TrainingDiverged as exc:
        _fail(EXIT_DIVERGED, "divergence", f"{exc}")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(sweep_csv(rows))
    print(f"sweep={out} levels={len(rows)}")
    return 0


# ------------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="psprune", description="Structured pruning with learned structure parameters.",
                                epilog=f"Relative dataset paths resolve against ${DATA_ROOT_ENV} when it is set.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--run-id", default=None, help="run id recorded in the log (default: config file stem)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("prune-export", help="compact a trained checkpoint and write a compression report")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_prune_export)

    v = sub.add_parser("eval", help="top-1/top-5 error of a checkpoint")
    v.add_argument("--ckpt", required=True)
    v.add_argument("--data", required=True, help="IDX or CIFAR binary file, or 'synthetic'")
    v.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="merge run logs into one CSV plus histogram files")
    r.add_argument("logs", nargs="+")
    r.add_argument("--out", required=True)
    r.add_argument("--hist-layer", action="append", help="export alpha histograms for this layer (repeatable)")
    r.add_argument("--hist-epoch", action="append", type=int, help="export histograms at this epoch (repeatable)")
    r.set_defaults(func=cmd_report)

    s = sub.add_parser("sweep", help="sparsity vs error over an epsilon or l1-strength sweep")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    axis = s.add_mutually_exclusive_group(required=True)
    axis.add_argument("--epsilons", help="comma-separated thresholds")
    axis.add_argument("--lambdas", help="comma-separated l1 strengths")
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        err = exc
    except (ConfigError, ModelError) as exc:
        err = CliError(EXIT_CONFIG, "config", str(exc))
    except (DataError, CheckpointError) as exc:
        err = CliError(EXIT_DATA, "data", str(exc))
    except CompactionError as exc:
        err = CliError(EXIT_CONFIG, "compaction", str(exc))
    except TrainingDiverged as exc:
        err = CliError(EXIT_DIVERGED, "divergence", str(exc))
    print(f"error kind={err.kind} reason={json.dumps(err.reason)}", file=sys.stderr)
    return err.code


if __name__ == "__main__":
    sys.exit(main())
