"""``pupet`` command line: train, evaluate, sweep, privatize and the inspection exports.

Exit codes: 0 ok, 2 config error, 3 data error, 4 training divergence,
5 checkpoint/schema mismatch.  Failures print one JSON error record to stderr.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import platform
import sys
from collections import Counter
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import adversaries as advs
from . import artifacts, experiment, metrics, tradeoff
from . import datatype as dt
from .config import ConfigError, ExperimentConfig, dump_config, load_config, load_dataset
from .ingest import IngestError, csv_rows
from .models import load_models, save_models
from .trainer import DivergenceError, train

log = logging.getLogger("pupet")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED, EXIT_SCHEMA = 0, 2, 3, 4, 5
OUTPUT_ROOT_ENV = "PUPET_OUTPUT_ROOT"
MODEL_FILE, ADVERSARY_FILE = "model.ckpt", "adversaries.ckpt"


class SchemaMismatch(RuntimeError):
    pass


class CommandError(Exception):
    def __init__(self, code: int, kind: str, message: str, **detail):
        super().__init__(message)
        self.code, self.kind, self.detail = code, kind, detail


# -- manifest ----------------------------------------------------------------------

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def source_digest() -> str:
    """Content hash over the package's own source files."""
    h = hashlib.sha256()
    root = Path(__file__).parent
    for p in sorted(root.rglob("*.py")) + sorted(root.rglob("*.json")):
        h.update(p.relative_to(root).as_posix().encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def run_hash(cfg: ExperimentConfig, data_digest: str, command: str) -> str:
    blob = json.dumps({"command": command, "config": cfg.digest(), "seed": cfg.output.seed,
                       "data": data_digest, "source": source_digest()}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()


def write_manifest(out: Path, command: str, cfg: ExperimentConfig, data_digest: str | None,
                   outputs: list, **extra) -> dict:
    """Merge this command's record into ``out/manifest.json`` (one entry per command)."""
    path = out / "manifest.json"
    manifest = json.loads(path.read_text()) if path.exists() else {}
    entry = {
        "config": cfg.to_dict(),
        "config_text": dump_config(cfg),
        "seed": cfg.output.seed,
        "data_digest": data_digest,
        "source_digest": source_digest(),
        "run_hash": run_hash(cfg, data_digest or "", command),
        "outputs": {Path(p).name: sha256_file(p) for p in outputs if Path(p).exists()},
        "python": platform.python_version(),
        "numpy": np.__version__,
        **extra,
    }
    manifest[command] = entry
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=list) + "\n")
    return entry


# -- shared helpers -------------------------------------------------------------------

def output_dir(cfg: ExperimentConfig, override=None) -> Path:
    out = Path(override or cfg.output.dir)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not out.is_absolute():
        out = Path(root) / out
    out.mkdir(parents=True, exist_ok=True)
    return out


def _stats_dict(stats):
    return None if stats is None else stats.to_dict()


def _checkpoint_extra(dataset) -> dict:
    return {"schema": dataset.schema.to_dict(), "layout": dataset.meta.get("layout"),
            "norm_stats": _stats_dict(dataset.stats), "data_digest": dataset.data_digest}


def _open_checkpoint(path, dataset=None):
    path = Path(path)
    if not path.exists():
        raise CommandError(EXIT_DATA, "missing_path", f"checkpoint not found: {path}", path=str(path))
    gen, clfs, header = load_models(path)
    if dataset is not None and header.get("schema_digest") != dataset.schema.digest:
        raise SchemaMismatch(f"checkpoint {path} was trained on schema {header.get('schema_digest', '?')[:12]}, "
                             f"config dataset has {dataset.schema.digest[:12]}")
    return gen, clfs, header


def _header_schema(header) -> dt.DatasetSchema:
    s = header["schema"]
    return dt.DatasetSchema.build(s["features"], s["private"], s["utility"], s.get("name", "dataset"))


def _seed_rng(cfg: ExperimentConfig, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([cfg.output.seed, stream]))


# -- commands -------------------------------------------------------------------------

def cmd_train(cfg: ExperimentConfig, out: Path) -> dict:
    dataset = load_dataset(cfg.dataset)
    seed = cfg.output.seed
    gen, adv, util = experiment.build_models(dataset, cfg.run, seed)
    tcfg = replace(cfg.training, seed=seed)
    try:
        _, trace = train(gen, adv, util, dataset.train, tcfg)
    except DivergenceError as err:
        err.dump(out / "divergence.json")
        raise
    trace.write_csv(out / "trace.csv")
    save_models(out / MODEL_FILE, gen, {"adversary": adv, "utility": util}, dataset.schema.digest,
                **_checkpoint_extra(dataset))
    entry = write_manifest(out, "train", cfg, dataset.data_digest, [out / MODEL_FILE, out / "trace.csv"],
                           n_train=len(dataset.train), n_test=len(dataset.test), steps=len(trace.steps))
    return {"checkpoint": str(out / MODEL_FILE), "run_hash": entry["run_hash"], "steps": len(trace.steps)}


def cmd_evaluate(cfg: ExperimentConfig, out: Path, checkpoint) -> dict:
    dataset = load_dataset(cfg.dataset)
    gen, clfs, _ = _open_checkpoint(checkpoint, dataset)
    reports, strong = experiment.evaluate(gen, clfs.get("adversary"), clfs.get("utility"), dataset,
                                          cfg.run, cfg.output.seed)
    advs.write_report(out / "report.csv", list(reports.values()))
    save_models(out / ADVERSARY_FILE, gen, {f"strong-{c}-{t}": m for (c, t), m in strong.items()},
                dataset.schema.digest, **_checkpoint_extra(dataset))
    summary = {c: {"private_acc": r.private_acc, "utility_acc": r.utility_acc,
                   "private_auroc": r.best_private.auroc, "utility_auroc": r.best_utility.auroc,
                   "private_kind": r.best_private.tag, "utility_kind": r.best_utility.tag,
                   "private_best_guess": r.private_best_guess, "utility_best_guess": r.utility_best_guess}
               for c, r in reports.items()}
    (out / "evaluation.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    write_manifest(out, "evaluate", cfg, dataset.data_digest,
                   [out / "report.csv", out / ADVERSARY_FILE, out / "evaluation.json"],
                   checkpoint=str(checkpoint), checkpoint_sha256=sha256_file(checkpoint))
    return summary


def cmd_sweep(cfg: ExperimentConfig, out: Path) -> dict:
    dataset = load_dataset(cfg.dataset)
    key = run_hash(cfg, dataset.data_digest, "sweep")
    workers = cfg.sweep.workers or tradeoff.default_workers()
    points, raw = tradeoff.sweep(experiment.CellRunner(dataset, cfg.run), cfg.sweep.lambdas,
                                 cfg.sweep.seeds, out_dir=out / "work" / key[:16], workers=workers)
    tradeoff.write_raw_csv(out / "raw.csv", raw)
    tradeoff.write_points_csv(out / "points.csv", points, "mean")
    bgp, bgu = metrics.best_guess(dataset.test.xp), metrics.best_guess(dataset.test.xu)
    curves, hull_rows, raw_hull_rows = {}, [], []
    raws = tradeoff.raw_points(raw)
    for cond in sorted({p.condition for p in points}):
        mean_pts = [p for p in points if p.condition == cond]
        raw_pts = [p for p in raws if p.condition == cond]
        curves[f"{cond}:mean"] = tradeoff.upper_hull(mean_pts, bgp, bgu)
        curves[f"{cond}:raw"] = tradeoff.upper_hull(raw_pts, bgp, bgu)
        hull_rows += curves[f"{cond}:mean"].vertices
        raw_hull_rows += curves[f"{cond}:raw"].vertices
    tradeoff.write_points_csv(out / "hull.csv", hull_rows, "hull")
    tradeoff.write_points_csv(out / "raw_hull.csv", raw_hull_rows, "raw_hull")
    tradeoff.write_plot_data(out / "plot.json", curves)
    files = [out / n for n in ("raw.csv", "points.csv", "hull.csv", "raw_hull.csv", "plot.json")]
    failed = sum(r.get("status") != "ok" for r in raw)
    write_manifest(out, "sweep", cfg, dataset.data_digest, files, cells_dir=str(Path("work") / key[:16] / "cells"),
                   workers=workers, failed_cells=failed)
    return {"points": len(points), "raw_rows": len(raw), "failed_cells": failed}


def _read_privatize_input(path, schema: dt.DatasetSchema, layout: dict, stats):
    """Encode input rows; schema violations are collected, not fatal."""
    missing = set(layout.get("missing", ["?"]))
    xs, xps, xus, lines, skipped = [], [], [], [], []
    needed = [f.name for f in schema.released] + [schema.private.name, schema.utility.name]


    def bad_row(lineno, message):
        skipped.append({"line": lineno, "reason": f"malformed row: {message}"})
        log.warning("privatize: skipping line %d: %s", lineno, message)

    for lineno, rec in csv_rows(path, layout, on_error=bad_row):
        try:
            absent = [c for c in needed if rec.get(c, "") in missing or rec.get(c, "") == ""]
            if absent:
                raise ValueError(f"missing value for {', '.join(absent)}")
            values = {f.name: rec[f.name] if f.categorical else float(rec[f.name]) for f in schema.released}
            x = schema.encode_record(values)
            xp, xu = schema.private.index(rec[schema.private.name]), schema.utility.index(rec[schema.utility.name])
        except (ValueError, KeyError) as err:
            skipped.append({"line": lineno, "reason": f"schema violation: {err}"})
            log.warning("privatize: skipping line %d: %s", lineno, err)
            continue
        xs.append(x)
        xps.append(xp)
        xus.append(xu)
        lines.append(lineno)
    x = np.array(xs).reshape(-1, schema.width)
    if stats is not None and len(x):
        x = dt.normalize_apply(x, stats)
    return dt.RecordBatch(x, np.array(xps, dtype=np.int64), np.array(xus, dtype=np.int64)), lines, skipped


def cmd_privatize(cfg: ExperimentConfig, out: Path, checkpoint, input_csv, output_csv=None,
                  condition: str = advs.AWARE) -> dict:
    gen, _, header = _open_checkpoint(checkpoint)
    if "schema" not in header:
        raise SchemaMismatch(f"checkpoint {checkpoint} carries no schema; retrain with `pupet train`")
    schema = _header_schema(header)
    if schema.digest != header["schema_digest"]:
        raise SchemaMismatch(f"checkpoint {checkpoint}: embedded schema does not match its digest")
    layout = dict(header.get("layout") or {"header": True})
    stats = dt.NormStats.from_dict(header["norm_stats"]) if header.get("norm_stats") else None
    if not Path(input_csv).exists():
        raise CommandError(EXIT_DATA, "missing_path", f"input not found: {input_csv}", path=str(input_csv))
    batch, lines, skipped = _read_privatize_input(input_csv, schema, layout, stats)
    output_csv = Path(output_csv) if output_csv else out / "privatized.csv"
    names = [f.name for f in schema.released]
    with open(output_csv, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["line", *names])
        if len(batch):
            xhat = advs.release(gen, batch, schema, condition, _seed_rng(cfg, 4))
            if condition == advs.AWARE:
                dt.check_batch(dt.RecordBatch(xhat, batch.xp, batch.xu, dt.AWARE), schema)
            if stats is not None:
                xhat = dt.normalize_invert(xhat, stats)
            for lineno, vec in zip(lines, xhat):
                rec = schema.decode_vector(vec)
                w.writerow([lineno, *(rec[n] if isinstance(rec[n], str) else repr(rec[n]) for n in names)])
    report = {"input": str(input_csv), "output": str(output_csv), "condition": condition,
              "rows_in": len(lines) + len(skipped), "rows_out": len(lines), "skipped": len(skipped),
              "skip_reasons": dict(Counter(s["reason"].split(":")[0] for s in skipped)), "skipped_rows": skipped}
    (out / "privatize_report.json").write_text(json.dumps(report, indent=2) + "\n")
    write_manifest(out, "privatize", cfg, None, [output_csv, out / "privatize_report.json"],
                   checkpoint=str(checkpoint), checkpoint_sha256=sha256_file(checkpoint),
                   input_sha256=sha256_file(input_csv))
    return {k: v for k, v in report.items() if k != "skipped_rows"}


def _export_batch(dataset, split: str):
    return dataset.train if split == "train" else dataset.test


def cmd_export_latents(cfg: ExperimentConfig, out: Path, checkpoint, before: bool = False,
                       split: str = "test") -> dict:
    dataset = load_dataset(cfg.dataset)
    if before:  # the same seeded initialisation `train` starts from
        gen = experiment.build_models(dataset, cfg.run, cfg.output.seed)[0]
    else:
        gen = _open_checkpoint(checkpoint, dataset)[0]
    path = out / ("latents_before.csv" if before else "latents.csv")
    try:
        rows = artifacts.export_latents(gen, _export_batch(dataset, split), path)
    except ValueError as err:
        raise CommandError(EXIT_CONFIG, "config", str(err)) from None
    write_manifest(out, "export-latents-before" if before else "export-latents", cfg, dataset.data_digest, [path])
    return {"rows": len(rows), "path": str(path)}


def cmd_export_distortion(cfg: ExperimentConfig, out: Path, checkpoint, bins: int = 30) -> dict:
    dataset = load_dataset(cfg.dataset)
    gen = _open_checkpoint(checkpoint, dataset)[0]
    sample = artifacts.export_distortion(gen, dataset.test, dataset.schema, bins, _seed_rng(cfg, 5))
    artifacts.write_distortion(sample, out)
    write_manifest(out, "export-distortion", cfg, dataset.data_digest,
                   [out / "distortion_hist.csv", out / "distortion_moments.csv"])
    return {"features": len(sample.columns), "rows": len(sample.diffs)}


def cmd_export_samples(cfg: ExperimentConfig, out: Path, checkpoint, limit: int = 64) -> dict:
    dataset = load_dataset(cfg.dataset)
    gen = _open_checkpoint(checkpoint, dataset)[0]
    path = out / "samples.csv"
    try:
        orig, _ = artifacts.export_samples(gen, dataset.test.take(np.arange(min(limit, len(dataset.test)))),
                                           dataset.schema, path, _seed_rng(cfg, 6))
    except ValueError as err:
        raise CommandError(EXIT_CONFIG, "config", str(err)) from None
    write_manifest(out, "export-samples", cfg, dataset.data_digest, [path])
    return {"pairs": len(orig), "path": str(path)}


# -- entry point ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pupet", description="Adversarially trained privatizer: train, evaluate, sweep.")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, help_, checkpoint=False):
        p = sub.add_parser(name, help=help_)
        p.add_argument("-c", "--config", help="sectioned key = value config file")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override one config value (repeatable)")
        p.add_argument("-o", "--out", help="output directory (default: [output] dir)")
        if checkpoint:
            p.add_argument("--checkpoint", help=f"generator checkpoint (default: OUT/{MODEL_FILE})")
        return p

    add("train", "train one generator and write a checkpoint")
    add("evaluate", "attack a checkpoint with the adversary suite", checkpoint=True)
    add("sweep", "lambda_P x seed grid and utility-privacy tradeoff curves")
    p = add("privatize", "release privatized rows for a CSV", checkpoint=True)
    p.add_argument("input", help="CSV with features plus private and utility labels")
    p.add_argument("--output", help="privatized CSV (default: OUT/privatized.csv)")
    p.add_argument("--condition", choices=advs.CONDITIONS, default=advs.AWARE)
    p = add("export-latents", "2-D latent means with private labels", checkpoint=True)
    p.add_argument("--before", action="store_true", help="export the untrained (initial) generator")
    p.add_argument("--split", choices=("train", "test"), default="test")
    p = add("export-distortion", "histograms and moments of X_hat - X", checkpoint=True)
    p.add_argument("--bins", type=int, default=30)
    p = add("export-samples", "paired original / privatized image rows", checkpoint=True)
    p.add_argument("--limit", type=int, default=64)
    return ap


def _dispatch(args, cfg: ExperimentConfig, out: Path) -> dict:
    ckpt = getattr(args, "checkpoint", None) or out / MODEL_FILE
    if args.command == "train":
        return cmd_train(cfg, out)
    if args.command == "evaluate":
        return cmd_evaluate(cfg, out, ckpt)
    if args.command == "sweep":
        return cmd_sweep(cfg, out)
    if args.command == "privatize":
        return cmd_privatize(cfg, out, ckpt, args.input, args.output, args.condition)
    if args.command == "export-latents":
        return cmd_export_latents(cfg, out, ckpt, args.before, args.split)
    if args.command == "export-distortion":
        return cmd_export_distortion(cfg, out, ckpt, args.bins)
    return cmd_export_samples(cfg, out, ckpt, args.limit)


def _fail(code: int, kind: str, message: str, **detail) -> int:
    record = {"error": kind, "exit_code": code, "message": message, **{k: v for k, v in detail.items() if v is not None}}
    print(json.dumps(record, default=str), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config, args.set)
        out = output_dir(cfg, args.out)
        result = _dispatch(args, cfg, out)
    except ConfigError as err:
        return _fail(EXIT_CONFIG, "config", str(err))
    except IngestError as err:
        return _fail(EXIT_DATA, err.kind, str(err), path=err.path, **err.detail)
    except (dt.SchemaError, dt.UnknownCategoryError) as err:
        return _fail(EXIT_DATA, "schema", str(err))
    except DivergenceError as err:
        return _fail(EXIT_DIVERGED, "divergence", str(err), dump="divergence.json")
    except SchemaMismatch as err:
        return _fail(EXIT_SCHEMA, "schema_mismatch", str(err))
    except CommandError as err:
        return _fail(err.code, err.kind, str(err), **err.detail)
    print(json.dumps(result, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
