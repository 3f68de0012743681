"""Transfer pipelines and the dataset-generality metric.

The basic experiment is run between a base dataset and a retrain
dataset: train a network from random initialization on the base data,
freeze all but the rear ``free_layers`` of it, re-initialize the
classifier, retrain on the second dataset, and compare the resulting
test accuracy against training on the second dataset from scratch:

    generality = transfer_accuracy / scratch_accuracy

A record stores exactly that ratio; curves collect one record per
free-layer count and seed. The RecordStore persists every record as a
JSON document plus cached base checkpoints and per-epoch histories, so
re-running an experiment with an unchanged configuration trains
nothing.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .datasets import DatasetBundle, partition_by_classes, subsample_per_class
from .network import Network, build_network, freeze_for_transfer
from .optimizer import History, OptimConfig, derive_seed, evaluate, train


class FreezeViolationError(RuntimeError):
    """A frozen parameter changed during retraining (post-check failed)."""


@dataclass(frozen=True)
class GeneralityRecord:
    """One measurement: how well base-dataset features serve a retrain dataset."""

    base_id: str
    retrain_id: str
    free_layers: int
    seed: int
    scratch_accuracy: float    # test accuracy trained from random init
    transfer_accuracy: float   # test accuracy retrained on top of the base net
    generality: float          # transfer_accuracy / scratch_accuracy
    config_digest: str
    arch: str

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, blob: str) -> "GeneralityRecord":
        return cls(**json.loads(blob))


def generality_ratio(transfer_accuracy: float, scratch_accuracy: float) -> float:
    """The generality metric: exact ratio of the two test accuracies."""
    if scratch_accuracy <= 0:
        raise ZeroDivisionError(
            "scratch accuracy must be positive to form a generality ratio")
    return transfer_accuracy / scratch_accuracy


@dataclass(frozen=True)
class CurvePoint:
    free_layers: int
    g_mean: float
    g_min: float
    g_max: float


@dataclass(frozen=True)
class GeneralityCurve:
    """Records for every free-layer count, usually across several seeds."""

    base_id: str
    retrain_id: str
    records: tuple[GeneralityRecord, ...]

    def free_layer_values(self) -> list[int]:
        return sorted({r.free_layers for r in self.records})

    def seeds(self) -> list[int]:
        return sorted({r.seed for r in self.records})

    def at(self, free_layers: int, seed: int) -> GeneralityRecord:
        for r in self.records:
            if r.free_layers == free_layers and r.seed == seed:
                return r
        raise KeyError((free_layers, seed))

    def aggregate(self) -> list[CurvePoint]:
        points = []
        for fl in self.free_layer_values():
            gs = [r.generality for r in self.records if r.free_layers == fl]
            points.append(CurvePoint(fl, float(np.mean(gs)), min(gs), max(gs)))
        return points

    def reference_accuracy(self) -> float:
        """Mean from-scratch accuracy of the retrain dataset."""
        per_seed = {r.seed: r.scratch_accuracy for r in self.records}
        return float(np.mean(list(per_seed.values())))


@dataclass
class JobAudit:
    """Counts of training jobs actually executed vs resolved from cache."""

    executed: int = 0
    cached: int = 0


@dataclass
class TrainResult:
    net: Optional[Network]
    accuracy: float
    history: Optional[History]
    job_key: str


class RecordStore:
    """Flat-file persistence: records, base checkpoints, histories.

    Every artifact is keyed by a content hash of the job description, so
    identical jobs resolve from disk. Writes go through a temp file and
    an atomic rename.
    """

    def __init__(self, root):
        self.root = Path(root)
        self.touched: set[str] = set()
        for sub in ("records", "checkpoints", "histories", "summaries"):
            (self.root / sub).mkdir(parents=True, exist_ok=True)

    @staticmethod
    def job_key(doc: dict) -> str:
        blob = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:24]

    def touch(self, key: str) -> None:
        """Mark every file of a job as belonging to the current run."""
        for path in (self.checkpoint_path(key), self.history_path(key),
                     self.summary_path(key), self.record_path(key)):
            if path.exists():
                self.touched.add(str(path.relative_to(self.root)))

    def checkpoint_path(self, key: str) -> Path:
        return self.root / "checkpoints" / f"{key}.ckpt"

    def history_path(self, key: str) -> Path:
        return self.root / "histories" / f"{key}.csv"

    def summary_path(self, key: str) -> Path:
        return self.root / "summaries" / f"{key}.json"

    def load_summary(self, key: str) -> Optional[dict]:
        path = self.summary_path(key)
        if not path.exists():
            return None
        return json.loads(path.read_text())

    def save_summary(self, key: str, doc: dict) -> None:
        _atomic_write(self.summary_path(key), json.dumps(doc, sort_keys=True, indent=1))

    def record_path(self, key: str) -> Path:
        return self.root / "records" / f"{key}.json"

    def load_record(self, key: str) -> Optional[GeneralityRecord]:
        path = self.record_path(key)
        if not path.exists():
            return None
        return GeneralityRecord.from_json(path.read_text())

    def save_record(self, key: str, record: GeneralityRecord) -> None:
        _atomic_write(self.record_path(key), record.to_json())

    def all_records(self) -> list[GeneralityRecord]:
        return [GeneralityRecord.from_json(p.read_text())
                for p in sorted((self.root / "records").glob("*.json"))]


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def _arch_name(arch) -> str:
    return arch if isinstance(arch, str) else "custom"


def train_base(bundle: DatasetBundle, arch, cfg: OptimConfig, seed: int,
               store: Optional[RecordStore] = None,
               audit: Optional[JobAudit] = None) -> TrainResult:
    """Train a network from seeded random initialization on the bundle.

    Returns the trained network with its test accuracy at the best
    validation epoch. With a store, the checkpoint and summary are
    persisted and identical jobs resolve from disk without training.
    """
    key = ""
    if store is not None:
        key = store.job_key({"job": "train-base", "data": bundle.digest(),
                             "arch": _arch_name(arch), "optim": cfg.digest(),
                             "seed": seed})
        summary = store.load_summary(key)
        if summary is not None and store.checkpoint_path(key).exists():
            if audit is not None:
                audit.cached += 1
            net, _ = load_checkpoint(store.checkpoint_path(key))
            store.touch(key)
            return TrainResult(net, summary["accuracy"], None, key)

    net = build_network(arch, bundle.num_classes, bundle.input_shape,
                        derive_seed(seed, "init"))
    trained, history = train(net, bundle, cfg, seed)
    if history.epochs:
        accuracy = history.epochs[history.best_epoch].test_accuracy
    else:
        accuracy = evaluate(trained, bundle.splits["test"])
    if audit is not None:
        audit.executed += 1

    if store is not None:
        save_checkpoint(trained, store.checkpoint_path(key),
                        epoch=history.best_epoch, history=history.to_jsonable())
        history.to_csv(store.history_path(key))
        store.save_summary(key, {"job": "train-base", "data": bundle.name,
                                 "accuracy": accuracy, "seed": seed,
                                 "best_epoch": history.best_epoch})
        store.touch(key)
    return TrainResult(trained, accuracy, history, key)


def retrain_transfer(base_net: Network, bundle: DatasetBundle, free_layers: int,
                     cfg: OptimConfig, seed: int) -> TrainResult:
    """Retrain a base network on another dataset under the freeze plan.

    The first N - free_layers freezable units stay fixed; the classifier
    is re-initialized for the retrain class count. After training, every
    frozen parameter is verified bitwise against the base network.
    """
    if bundle.input_shape != base_net.input_shape:
        raise ValueError(
            f"retrain data shape {bundle.input_shape} != base network input "
            f"{base_net.input_shape}")
    prepared = freeze_for_transfer(base_net, free_layers, bundle.num_classes,
                                   derive_seed(seed, "classifier-reinit"))
    trained, history = train(prepared, bundle, cfg, seed)
    _verify_frozen(base_net, trained)
    if history.epochs:
        accuracy = history.epochs[history.best_epoch].test_accuracy
    else:
        accuracy = evaluate(trained, bundle.splits["test"])
    return TrainResult(trained, accuracy, history, "")


def _verify_frozen(base: Network, retrained: Network) -> None:
    for (i, name) in retrained.params:
        if not retrained.frozen[i]:
            continue
        if not np.array_equal(retrained.params[i, name], base.params[i, name]):
            raise FreezeViolationError(
                f"frozen parameter ({i}, {name}) changed during retraining")
    for i, stats in retrained.running.items():
        if retrained.frozen[i]:
            if not (np.array_equal(stats.mean, base.running[i].mean)
                    and np.array_equal(stats.var, base.running[i].var)):
                raise FreezeViolationError(
                    f"frozen batchnorm statistics of layer {i} changed during retraining")


def _cached_retrain(base: TrainResult, base_bundle: DatasetBundle,
                    bundle: DatasetBundle, free_layers: int, cfg: OptimConfig,
                    master_seed: int, scratch_accuracy: float, arch,
                    store: Optional[RecordStore],
                    audit: Optional[JobAudit]) -> GeneralityRecord:
    record_key = ""
    if store is not None:
        record_key = store.job_key({
            "job": "retrain", "base": base.job_key,
            "base_data": base_bundle.digest(), "data": bundle.digest(),
            "free_layers": free_layers, "optim": cfg.digest(),
            "seed": master_seed})
        cached = store.load_record(record_key)
        if cached is not None:
            if audit is not None:
                audit.cached += 1
            store.touch(record_key)
            return cached

    seed = derive_seed(master_seed, "retrain", base_bundle.name, bundle.name,
                       free_layers)
    result = retrain_transfer(base.net, bundle, free_layers, cfg, seed)
    if audit is not None:
        audit.executed += 1
    record = GeneralityRecord(
        base_id=base_bundle.name, retrain_id=bundle.name,
        free_layers=free_layers, seed=master_seed,
        scratch_accuracy=scratch_accuracy,
        transfer_accuracy=result.accuracy,
        generality=generality_ratio(result.accuracy, scratch_accuracy),
        config_digest=cfg.digest(), arch=_arch_name(arch))
    if store is not None:
        store.save_record(record_key, record)
        if result.history is not None:
            result.history.to_csv(store.history_path(record_key))
        store.touch(record_key)
    return record


def _base_for(bundle: DatasetBundle, arch, cfg: OptimConfig, master_seed: int,
              store, audit) -> TrainResult:
    # the seed depends only on the dataset, so the diagonal pair and the
    # denominator share one training
    return train_base(bundle, arch, cfg,
                      derive_seed(master_seed, "train-base", bundle.digest()),
                      store, audit)


def generality_curve(base_bundle: DatasetBundle, retrain_bundle: DatasetBundle,
                     arch, cfg: OptimConfig, seeds: Sequence[int],
                     store: Optional[RecordStore] = None,
                     audit: Optional[JobAudit] = None,
                     free_layer_values: Optional[Sequence[int]] = None) -> GeneralityCurve:
    """Generality of the base dataset with respect to the retrain dataset
    for every free-layer count (or a chosen subset), per seed."""
    records = []
    for master_seed in seeds:
        denominator = _base_for(retrain_bundle, arch, cfg, master_seed, store, audit)
        base = _base_for(base_bundle, arch, cfg, master_seed, store, audit)
        if free_layer_values is None:
            free_layer_values_seed = range(base.net.n_freezable + 1)
        else:
            free_layer_values_seed = free_layer_values
        for free_layers in free_layer_values_seed:
            records.append(_cached_retrain(
                base, base_bundle, retrain_bundle, free_layers, cfg,
                master_seed, denominator.accuracy, arch, store, audit))
    return GeneralityCurve(base_bundle.name, retrain_bundle.name, tuple(records))


def class_generality(bundle: DatasetBundle, base_classes: Sequence[int],
                     arch, cfg: OptimConfig, seeds: Sequence[int],
                     store: Optional[RecordStore] = None,
                     audit: Optional[JobAudit] = None) -> GeneralityCurve:
    """Generality between disjoint class subsets of one dataset.

    The base-classes part plays the base role; the complement part is
    retrained for every free-layer count against its own from-scratch
    reference.
    """
    part_base, part_rest = partition_by_classes(bundle, base_classes)
    return generality_curve(part_base, part_rest, arch, cfg, seeds, store, audit)


@dataclass(frozen=True)
class SubsampleRow:
    per_class: int
    init: str          # "random" or "base"
    free_layers: int
    seed: int
    accuracy: float


@dataclass(frozen=True)
class SubsampleTable:
    base_id: str
    retrain_id: str
    rows: tuple[SubsampleRow, ...]
    records: tuple[GeneralityRecord, ...]

    def accuracy(self, per_class: int, init: str, free_layers: int) -> float:
        values = [r.accuracy for r in self.rows
                  if r.per_class == per_class and r.init == init
                  and r.free_layers == free_layers]
        if not values:
            raise KeyError((per_class, init, free_layers))
        return float(np.mean(values))


def subsample_generality(bundle: DatasetBundle, base_classes: Sequence[int],
                         per_class_counts: Sequence[int], arch,
                         cfg: OptimConfig, seeds: Sequence[int],
                         store: Optional[RecordStore] = None,
                         audit: Optional[JobAudit] = None) -> SubsampleTable:
    """The sub-sample grid: retrain the complement classes with only
    per_class training samples each, from random init (all layers free)
    and on top of the base-classes network at every free-layer count.
    """
    part_base, part_rest = partition_by_classes(bundle, base_classes)
    rows: list[SubsampleRow] = []
    records: list[GeneralityRecord] = []
    for master_seed in seeds:
        base = _base_for(part_base, arch, cfg, master_seed, store, audit)
        n_freezable = base.net.n_freezable
        for per_class in per_class_counts:
            sub = subsample_per_class(
                part_rest, per_class,
                seed=derive_seed(master_seed, "subsample", per_class))
            sub = DatasetBundle(f"{part_rest.name}-p{per_class}", sub.splits,
                                sub.class_names, sub.provenance)
            scratch = _base_for(sub, arch, cfg, master_seed, store, audit)
            # random initializations train with every layer free
            rows.append(SubsampleRow(per_class, "random", n_freezable,
                                     master_seed, scratch.accuracy))
            for free_layers in range(n_freezable + 1):
                record = _cached_retrain(base, part_base, sub, free_layers, cfg,
                                         master_seed, scratch.accuracy, arch,
                                         store, audit)
                rows.append(SubsampleRow(per_class, "base", free_layers,
                                         master_seed, record.transfer_accuracy))
                records.append(record)
    return SubsampleTable(part_base.name, part_rest.name, tuple(rows), tuple(records))


def generality_matrix(bundles: Sequence[DatasetBundle], arch, cfg: OptimConfig,
                      seeds: Sequence[int], store: RecordStore,
                      audit: Optional[JobAudit] = None) -> dict:
    """Curves for every ordered dataset pair, diagonals included.

    Base trainings are shared across pairs through the store.
    """
    if len(bundles) < 2:
        raise ValueError("a generality matrix needs at least two datasets")
    names = [b.name for b in bundles]
    if len(set(names)) != len(names):
        raise ValueError(f"dataset names must be distinct, got {names}")
    shapes = {b.input_shape for b in bundles}
    if len(shapes) > 1:
        raise ValueError(f"datasets must share one input shape, got {shapes}")
    matrix = {}
    for base_bundle in bundles:
        for retrain_bundle in bundles:
            matrix[base_bundle.name, retrain_bundle.name] = generality_curve(
                base_bundle, retrain_bundle, arch, cfg, seeds, store, audit)
    return matrix
