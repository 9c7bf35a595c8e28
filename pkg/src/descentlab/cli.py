"""Command-line entry point.

Exit codes: 0 success, 2 configuration or input error, 3 runtime abort.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, ExperimentConfig, dump_config, validate_config
from .datagen import Dataset
from .metrics import KnnDatConfig, ScoredSample, knn_dat, reconstruction_scores, roc_auc
from .neuralnet import AutoencoderModel, load_model, save_model
from .plotting import Series, render_svg
from .sweep import (
    CurveTable,
    RunResult,
    aggregate,
    realize,
    schedule,
    write_embeddings,
    write_runs_csv,
)

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
METRIC_COLUMNS = ["metric", "value", "dataset", "model_id"]

log = logging.getLogger("descentlab")


class InputError(Exception):
    pass


def _parallelism(args, cfg: ExperimentConfig) -> int:
    if getattr(args, "parallelism", None):
        return args.parallelism
    env = os.environ.get("DESCENTLAB_THREADS")
    if env:
        try:
            value = int(env)
        except ValueError:
            raise InputError(f"DESCENTLAB_THREADS must be an integer, got {env!r}") from None
        if value < 1:
            raise InputError("DESCENTLAB_THREADS must be at least 1")
        return value
    return cfg.parallelism


def _load_cfg(args, command: str | None = None) -> ExperimentConfig:
    if not Path(args.config).exists():
        raise InputError(f"config file not found: {args.config}")
    cfg = validate_config(args.config, profile=getattr(args, "profile", None), command=command)
    if getattr(args, "seed_list", None):
        try:
            seeds = tuple(int(s) for s in args.seed_list.split(","))
        except ValueError:
            raise InputError(f"--seed-list must be comma-separated integers, got {args.seed_list!r}") from None
        cfg = replace(cfg, sweep=replace(cfg.sweep, seeds=seeds))
        cfg.raw["sweep"]["seeds"] = list(seeds)
    return cfg


def _out_dir(args, cfg: ExperimentConfig) -> Path:
    out = Path(args.out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_validate(args) -> int:
    cfg = _load_cfg(args)
    if args.emit_defaults:
        sys.stdout.write(dump_config(cfg))
    else:
        print(f"ok: {cfg.scenario} / axis={cfg.sweep.axis} / {len(cfg.sweep.run_keys())} runs")
    return EXIT_OK


def cmd_generate(args) -> int:
    cfg = _load_cfg(args)
    out = _out_dir(args, cfg)
    spec = cfg.sweep
    for seed in spec.seeds:
        real = realize(spec.scenario, spec.params, spec.data, seed)
        d = out / f"seed_{seed}"
        d.mkdir(exist_ok=True)
        real.train.to_csv(d / "train.csv")
        real.test.to_csv(d / "test.csv")
        if real.auc_set is not None:
            real.auc_set.to_csv(d / "anomaly_eval.csv")
        meta = {"train": real.train.meta, "test": real.test.meta}
        if real.train.noisy_feature_mask is not None:
            meta["noisy_feature_mask"] = real.train.noisy_feature_mask.astype(int).tolist()
        (d / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True, default=str))
        print(f"seed {seed}: {real.train.n_rows} train / {real.test.n_rows} test rows -> {d}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _load_cfg(args, command=args.kind)
    out = _out_dir(args, cfg)
    spec = cfg.sweep
    parallelism = _parallelism(args, cfg)
    (out / "config.yaml").write_text(dump_config(cfg))

    keys = spec.run_keys()
    results: list[RunResult] = []
    started = time.time()
    for i, res in enumerate(schedule(spec, keys, parallelism), start=1):
        results.append(res)
        print(f"[{i}/{len(keys)}] {res.key.run_id} {res.status} test_loss={res.test_loss:.4g}", flush=True)
        if spec.export_embeddings and res.embeddings:
            write_embeddings(out / "embeddings", res)
        if spec.save_checkpoints and res.params is not None:
            (out / "checkpoints").mkdir(exist_ok=True)
            model = AutoencoderModel(_arch_for(spec, res), res.params)
            save_model(out / "checkpoints" / f"{res.key.run_id}.npz", model, seed=res.key.seed)

    results.sort(key=lambda r: r.key)
    write_runs_csv(out / "runs.csv", spec, results)
    curve = aggregate(spec, results)
    curve.to_csv(out / "curve.csv")
    failed = [r.key.run_id for r in results if r.status != "ok"]
    status = {
        "complete": not failed,
        "n_runs": len(results),
        "n_failed": len(failed),
        "failed": failed,
        "errors": {r.key.run_id: r.error for r in results if r.status != "ok"},
        "scenario_hash": spec.scenario_hash,
        "parallelism": parallelism,
        "elapsed_seconds": round(time.time() - started, 3),
    }
    (out / "status.json").write_text(json.dumps(status, indent=2))
    print(f"wrote {out / 'runs.csv'} and {out / 'curve.csv'} ({len(failed)} failed)")
    return EXIT_OK if not failed or len(failed) < len(results) else EXIT_RUNTIME


def _n_features(spec) -> int:
    if spec.scenario == "real":
        return realize(spec.scenario, spec.params, spec.data, spec.seeds[0]).train.n_features
    return spec.data.ambient_dim


def _arch_for(spec, res: RunResult):
    from .neuralnet import Architecture

    return Architecture(_n_features(spec), res.hidden_dim, res.bottleneck_dim, spec.activation)


def _append_metrics(path: str | None, rows: list[list]) -> None:
    if path is None:
        w = csv.writer(sys.stdout)
        w.writerow(METRIC_COLUMNS)
        w.writerows(rows)
        return
    new = not Path(path).exists()
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(METRIC_COLUMNS)
        w.writerows(rows)


def _read_embeddings(paths: list[str]) -> tuple[np.ndarray, np.ndarray]:
    blocks, labels = [], []
    for path in paths:
        if not Path(path).exists():
            raise InputError(f"embeddings file not found: {path}")
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if "batch" not in header:
                raise InputError(f"{path}: no 'batch' column")
            bi = header.index("batch")
            cols = [j for j, h in enumerate(header) if h.startswith("e")]
            for line in reader:
                blocks.append([float(line[j]) for j in cols])
                labels.append(line[bi])
    _, ids = np.unique(np.array(labels), return_inverse=True)
    return np.array(blocks, dtype=np.float64), ids


def cmd_eval(args) -> int:
    rows = []
    if args.metric == "knn-dat":
        if not args.embeddings:
            raise InputError("eval knn-dat needs --embeddings")
        emb, labels = _read_embeddings(args.embeddings)
        value = knn_dat(emb, labels, KnnDatConfig(args.k))
        rows.append(["knn_dat", repr(value), ";".join(args.embeddings), args.model_id or ""])
    else:
        if args.scores:
            if not Path(args.scores).exists():
                raise InputError(f"scores file not found: {args.scores}")
            with open(args.scores, newline="") as fh:
                scored = [ScoredSample(float(r["score"]), r["label"]) for r in csv.DictReader(fh)]
            dataset = args.scores
        else:
            if not (args.data and args.checkpoint):
                raise InputError("eval roc-auc needs --scores, or --data with --checkpoint")
            for p in (args.data, args.checkpoint):
                if not Path(p).exists():
                    raise InputError(f"file not found: {p}")
            ds = Dataset.from_csv(args.data)
            model, _ = load_model(args.checkpoint)
            scored = reconstruction_scores(model, ds.samples, ds.flags)
            dataset = args.data
        rows.append(["roc_auc", repr(roc_auc(scored)), dataset, args.model_id or args.checkpoint or ""])
    _append_metrics(args.out, rows)
    return EXIT_OK


def cmd_plot(args) -> int:
    series = []
    labels = args.label or []
    for i, path in enumerate(args.curve):
        if not Path(path).exists():
            raise InputError(f"curve file not found: {path}")
        table = CurveTable.from_csv(path)
        if table.axis == "grid":
            raise InputError(f"{path}: grid curves are matrices; plot a 1-d sweep")
        metrics = ["train_loss", "test_loss"] if args.metric == "both" else [args.metric]
        base = labels[i] if i < len(labels) else Path(path).parent.name or Path(path).stem
        for m in metrics:
            if m not in table.metrics:
                raise InputError(f"{path}: no metric {m!r} (have {table.metrics})")
            label = base if len(metrics) == 1 else f"{base} {m}"
            series.append(Series(label, table.x(), table.mean(m), table.stderr(m)))
        xlabel = table.axis
    svg = render_svg(series, title=args.title or "", xlabel=xlabel,
                     ylabel=args.metric if args.metric != "both" else "normalized loss", log_y=args.log_y)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(svg)
    print(f"wrote {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="descentlab", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"descentlab {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_help="output directory (defaults to output_dir in the config)"):
        sp.add_argument("--config", required=True)
        sp.add_argument("--out", help=out_help)
        sp.add_argument("--profile", choices=("desk", "paper"))
        sp.add_argument("--seed-list", help="comma-separated seeds, e.g. 0,1,2")

    v = sub.add_parser("validate", help="check a config and optionally print it fully defaulted")
    v.add_argument("--config", required=True)
    v.add_argument("--profile", choices=("desk", "paper"))
    v.add_argument("--seed-list")
    v.add_argument("--emit-defaults", action="store_true")
    v.set_defaults(func=cmd_validate)

    g = sub.add_parser("generate", help="write dataset CSVs for each seed")
    common(g)
    g.set_defaults(func=cmd_generate)

    s = sub.add_parser("sweep", help="run a model-, epoch- or sample-wise sweep")
    s.add_argument("kind", choices=("model-wise", "epoch-wise", "sample-wise"))
    common(s)
    s.add_argument("--parallelism", type=int, help="worker processes (env DESCENTLAB_THREADS)")
    s.set_defaults(func=cmd_sweep)

    e = sub.add_parser("eval", help="compute roc-auc or knn-dat from exported files")
    e.add_argument("metric", choices=("roc-auc", "knn-dat"))
    e.add_argument("--embeddings", nargs="+", help="embedding CSVs with e* and batch columns")
    e.add_argument("--k", type=int, default=10)
    e.add_argument("--scores", help="CSV with score,label columns")
    e.add_argument("--data", help="dataset CSV (f*, flag, batch)")
    e.add_argument("--checkpoint", help="model checkpoint (.npz)")
    e.add_argument("--model-id", default="")
    e.add_argument("--out", help="metrics CSV to append to (stdout if omitted)")
    e.set_defaults(func=cmd_eval)

    pl = sub.add_parser("plot", help="render curve.csv files to SVG")
    pl.add_argument("--curve", nargs="+", required=True)
    pl.add_argument("--label", nargs="+")
    pl.add_argument("--metric", default="test_loss", help="train_loss, test_loss, both, or an extra metric")
    pl.add_argument("--log-y", action="store_true")
    pl.add_argument("--title")
    pl.add_argument("--out", required=True)
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(exc, file=sys.stderr)
        return EXIT_CONFIG
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        print(f"aborted: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
