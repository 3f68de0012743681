"""Experiment execution: build datasets from a validated config, run the
named experiment against the output directory's record store, and write
the manifest plus derived CSVs.

Seeds are independent jobs, so with --workers > 1 each seed's pipeline
runs in its own process against the shared store; the parent then
replays the experiment, resolving everything from cache, and is the
single writer of the manifest and derived files. Artifacts are
identical whatever the worker count.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .config import config_digest, optim_from_config
from .datasets import DatasetBundle, bundle_from_idx
from .export import write_curve_csv, write_records_csv, write_subsample_csv
from .precision import precision
from .synthetic import make_synthetic
from .transfer import (JobAudit, RecordStore, class_generality,
                       generality_curve, generality_matrix,
                       subsample_generality, _base_for)

MANIFEST_FORMAT = 1


def build_bundle(ref: dict, base_dir: Path) -> DatasetBundle:
    if "synthetic" in ref:
        s = ref["synthetic"]
        return make_synthetic(s["family"],
                              {"train": s["train"], "valid": s["valid"],
                               "test": s["test"]}, s["seed"])
    s = ref["idx"]
    return bundle_from_idx(
        s["name"],
        base_dir / s["train_images"], base_dir / s["train_labels"],
        base_dir / s["test_images"], base_dir / s["test_labels"],
        valid_count=s["valid_count"], seed=s["split_seed"])


def _execute(cfg: dict, seeds, store: RecordStore, audit: JobAudit,
             base_dir: Path) -> dict:
    """Run the configured experiment; returns {records, rows, summaries}."""
    arch = cfg["arch"]
    optim = optim_from_config(cfg)
    experiment = cfg["experiment"]
    data = cfg["data"]
    out: dict = {"records": [], "rows": [], "summaries": []}

    if experiment == "train-base":
        bundle = build_bundle(data["train"], base_dir)
        for seed in seeds:
            result = _base_for(bundle, arch, optim, seed, store, audit)
            out["summaries"].append({"dataset": bundle.name, "seed": seed,
                                     "accuracy": result.accuracy,
                                     "checkpoint": result.job_key})
    elif experiment == "retrain":
        base_bundle = build_bundle(data["base"], base_dir)
        retrain_bundle = build_bundle(data["retrain"], base_dir)
        curve = generality_curve(base_bundle, retrain_bundle, arch, optim,
                                 seeds, store, audit,
                                 free_layer_values=[cfg["free_layers"]])
        out["records"] = list(curve.records)
    elif experiment == "curve":
        base_bundle = build_bundle(data["base"], base_dir)
        retrain_bundle = build_bundle(data["retrain"], base_dir)
        curve = generality_curve(base_bundle, retrain_bundle, arch, optim,
                                 seeds, store, audit)
        out["records"] = list(curve.records)
    elif experiment == "class-gen":
        bundle = build_bundle(data["dataset"], base_dir)
        curve = class_generality(bundle, cfg["base_classes"], arch, optim,
                                 seeds, store, audit)
        out["records"] = list(curve.records)
    elif experiment == "subsample":
        bundle = build_bundle(data["dataset"], base_dir)
        table = subsample_generality(bundle, cfg["base_classes"],
                                     cfg["per_class"], arch, optim, seeds,
                                     store, audit)
        out["records"] = list(table.records)
        out["rows"] = list(table.rows)
    elif experiment == "matrix":
        bundles = [build_bundle(r, base_dir) for r in data["datasets"]]
        matrix = generality_matrix(bundles, arch, optim, seeds, store, audit)
        for curve in matrix.values():
            out["records"].extend(curve.records)
    else:
        raise ValueError(f"unknown experiment {experiment!r}")
    return out


def _worker(cfg_json: str, out_dir: str, base_dir: str, seed: int) -> tuple[int, int]:
    cfg = json.loads(cfg_json)
    with precision(cfg["precision"]):
        audit = JobAudit()
        store = RecordStore(Path(out_dir) / "store")
        _execute(cfg, [seed], store, audit, Path(base_dir))
    return audit.executed, audit.cached


def run_experiment(cfg: dict, out_dir, base_dir=None, workers: int = 1) -> dict:
    """Execute a normalized config; returns the manifest dictionary."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    base_dir = Path(base_dir) if base_dir else Path(".")
    seeds = cfg["seeds"]
    digest = config_digest(cfg)

    worker_executed = 0
    if workers > 1 and len(seeds) > 1:
        cfg_json = json.dumps(cfg)
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_worker, cfg_json, str(out_dir), str(base_dir), s)
                       for s in seeds]
            for future in futures:
                executed, _ = future.result()
                worker_executed += executed

    with precision(cfg["precision"]):
        audit = JobAudit()
        store = RecordStore(out_dir / "store")
        result = _execute(cfg, seeds, store, audit, base_dir)

    executed = audit.executed + worker_executed
    cached = audit.cached - worker_executed
    artifacts = [f"store/{p}" for p in sorted(store.touched)]

    records = result["records"]
    if records:
        write_records_csv(records, out_dir / "records.csv")
        write_curve_csv(records, out_dir / "curve.csv")
        artifacts += ["records.csv", "curve.csv"]
    if result["rows"]:
        _write_subsample_rows(result["rows"], out_dir / "subsample_rows.csv")
        write_subsample_csv(result["rows"], out_dir / "subsample.csv")
        artifacts += ["subsample_rows.csv", "subsample.csv"]
    if result["summaries"]:
        (out_dir / "summary.json").write_text(
            json.dumps(result["summaries"], sort_keys=True, indent=1))
        artifacts.append("summary.json")

    manifest = {
        "format": MANIFEST_FORMAT,
        "experiment": cfg["experiment"],
        "config_digest": digest,
        "jobs": {"executed": executed, "cached": cached},
        "artifacts": sorted(artifacts),
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1))
    return manifest


def _write_subsample_rows(rows, path) -> None:
    import csv
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["per_class", "init", "free_layers", "seed", "accuracy"])
        for r in sorted(rows, key=lambda r: (r.per_class, r.init, r.free_layers, r.seed)):
            writer.writerow([r.per_class, r.init, r.free_layers, r.seed,
                             repr(r.accuracy)])
