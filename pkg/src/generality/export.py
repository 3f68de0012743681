"""Result exports: tidy CSVs for plotting and first-layer filter grids.

curve            (base, retrain, free_layers, g_mean, g_min, g_max,
                  scratch_reference)
errors-vs-epoch  (run_id, epoch, valid_error)
subsample        (per_class, init, free_layers, accuracy) with accuracy
                 averaged over seeds
records          (base, retrain, free_layers, seed, scratch_accuracy,
                  transfer_accuracy, generality), one row per record

Filter grids are written as binary PGM (P5): one tile per kernel,
channel-averaged, each tile min-max normalized to [0, 1] (a constant
tile maps to mid-gray), 1-pixel separators.
"""

from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint
from .transfer import RecordStore


class ExportError(RuntimeError):
    pass


def write_records_csv(records, path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["base", "retrain", "free_layers", "seed",
                         "scratch_accuracy", "transfer_accuracy", "generality"])
        for r in sorted(records, key=lambda r: (r.base_id, r.retrain_id,
                                                r.free_layers, r.seed)):
            writer.writerow([r.base_id, r.retrain_id, r.free_layers, r.seed,
                             repr(r.scratch_accuracy), repr(r.transfer_accuracy),
                             repr(r.generality)])


def write_curve_csv(records, path) -> None:
    """Aggregate records into one curve row per (pair, free_layers)."""
    groups: dict = defaultdict(list)
    for r in records:
        groups[r.base_id, r.retrain_id, r.free_layers].append(r)
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["base", "retrain", "free_layers", "g_mean", "g_min",
                         "g_max", "scratch_reference"])
        for (base, retrain, fl) in sorted(groups):
            rs = groups[base, retrain, fl]
            gs = [r.generality for r in rs]
            ref = float(np.mean([r.scratch_accuracy for r in rs]))
            writer.writerow([base, retrain, fl, repr(float(np.mean(gs))),
                             repr(min(gs)), repr(max(gs)), repr(ref)])


def write_errors_csv(store: RecordStore, path) -> None:
    """One row per epoch per stored training history."""
    histories = sorted((store.root / "histories").glob("*.csv"))
    if not histories:
        raise ExportError(f"no training histories under {store.root}")
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["run_id", "epoch", "valid_error"])
        for hist in histories:
            with hist.open() as src:
                for row in csv.DictReader(src):
                    writer.writerow([hist.stem, row["epoch"], row["valid_error"]])


def write_subsample_csv(rows, path) -> None:
    """rows are SubsampleRow items; accuracy is averaged over seeds."""
    groups: dict = defaultdict(list)
    for r in rows:
        groups[r.per_class, r.init, r.free_layers].append(r.accuracy)
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["per_class", "init", "free_layers", "accuracy"])
        for key in sorted(groups):
            writer.writerow([key[0], key[1], key[2],
                             repr(float(np.mean(groups[key])))])


def _normalize_tile(tile: np.ndarray) -> np.ndarray:
    lo, hi = float(tile.min()), float(tile.max())
    if hi - lo < 1e-12:
        return np.full_like(tile, 0.5, dtype=np.float64)
    return (tile.astype(np.float64) - lo) / (hi - lo)


def filter_grid(kernels: np.ndarray, pad: int = 1) -> np.ndarray:
    """Tile [K,C,R,S] kernels into one [0,1] image, channel-averaged."""
    count = kernels.shape[0]
    tiles = [_normalize_tile(kernels[k].mean(axis=0)) for k in range(count)]
    rows, cols = tiles[0].shape
    ncols = int(np.ceil(np.sqrt(count)))
    nrows = int(np.ceil(count / ncols))
    grid = np.zeros((nrows * (rows + pad) - pad, ncols * (cols + pad) - pad))
    for k, tile in enumerate(tiles):
        r, c = divmod(k, ncols)
        grid[r * (rows + pad): r * (rows + pad) + rows,
             c * (cols + pad): c * (cols + pad) + cols] = tile
    return grid


def write_pgm(image: np.ndarray, path) -> None:
    """Binary PGM (P5), 8-bit, from a [0,1] grayscale image."""
    data = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    with Path(path).open("wb") as fh:
        fh.write(f"P5\n{data.shape[1]} {data.shape[0]}\n255\n".encode())
        fh.write(data.tobytes())


def export_filters(checkpoint_path, layer_index: int, out_path) -> None:
    """Write the named conv layer's kernels as a tiled PGM grid."""
    net, _ = load_checkpoint(checkpoint_path)
    if not 0 <= layer_index < len(net.specs):
        raise ExportError(f"layer index {layer_index} out of range "
                          f"[0, {len(net.specs)})")
    if net.specs[layer_index].kind != "conv":
        raise ExportError(
            f"layer {layer_index} is {net.specs[layer_index].kind!r}, not a conv layer")
    write_pgm(filter_grid(net.params[layer_index, "w"]), out_path)


def export_plot_data(results_dir, what: str, out_dir=None) -> Path:
    """Re-derive one tidy CSV from a results directory's record store."""
    results_dir = Path(results_dir)
    store_root = results_dir / "store"
    if not store_root.exists():
        raise ExportError(f"no record store under {results_dir}")
    store = RecordStore(store_root)
    out_dir = Path(out_dir) if out_dir else results_dir / "export"
    out_dir.mkdir(parents=True, exist_ok=True)

    if what == "curve":
        records = store.all_records()
        if not records:
            raise ExportError(f"no records under {store_root}")
        target = out_dir / "curve.csv"
        write_curve_csv(records, target)
    elif what == "errors-vs-epoch":
        target = out_dir / "errors_vs_epoch.csv"
        write_errors_csv(store, target)
    elif what == "subsample":
        rows_path = results_dir / "subsample_rows.csv"
        if not rows_path.exists():
            raise ExportError(f"no subsample table at {rows_path}")
        target = out_dir / "subsample.csv"
        _aggregate_subsample(rows_path, target)
    else:
        raise ExportError(f"unknown export kind {what!r}")
    return target


def _aggregate_subsample(rows_path: Path, target: Path) -> None:
    groups: dict = defaultdict(list)
    with rows_path.open() as fh:
        for row in csv.DictReader(fh):
            key = (int(row["per_class"]), row["init"], int(row["free_layers"]))
            groups[key].append(float(row["accuracy"]))
    with target.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["per_class", "init", "free_layers", "accuracy"])
        for key in sorted(groups):
            writer.writerow([key[0], key[1], key[2],
                             repr(float(np.mean(groups[key])))])
