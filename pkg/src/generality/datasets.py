"""Dataset ingestion, normalization, class partitioning, and sub-sampling.

A DatasetBundle holds train/valid/test splits of (images, labels) arrays
with class metadata and a provenance log. Images are [N, C, H, W] floats
in [0, 1]; labels are dense integer class ids. All operations are pure
functions of their inputs plus a seed, and bundles are treated as
immutable once constructed.

IDX files are parsed exactly as published: big-endian magic (0x00000803
for uint8 image tensors, 0x00000801 for label vectors), dimension sizes,
then the raw uint8 payload.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .precision import get_dtype

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxError(ValueError):
    pass


class IdxMagicError(IdxError):
    pass


class IdxTruncatedError(IdxError):
    pass


class IdxCountMismatchError(IdxError):
    pass


Split = tuple[np.ndarray, np.ndarray]  # (images [N,C,H,W], labels [N])


@dataclass
class DatasetBundle:
    name: str
    splits: dict[str, Split]
    class_names: tuple[str, ...]
    provenance: tuple[str, ...] = ()

    def __post_init__(self):
        for split_name, (images, labels) in self.splits.items():
            if len(images) != len(labels):
                raise ValueError(
                    f"{self.name}/{split_name}: {len(images)} images vs "
                    f"{len(labels)} labels")
            if len(labels) and labels.max() >= len(self.class_names):
                raise ValueError(
                    f"{self.name}/{split_name}: label {labels.max()} out of range "
                    f"for {len(self.class_names)} classes")

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def input_shape(self) -> tuple[int, int, int]:
        images = self.splits["train"][0]
        return tuple(images.shape[1:])

    def split_size(self, name: str) -> int:
        return len(self.splits[name][1])

    def digest(self) -> str:
        """Content hash over all splits, labels, and class names."""
        h = hashlib.sha256()
        h.update(repr(self.class_names).encode())
        for split_name in sorted(self.splits):
            images, labels = self.splits[split_name]
            h.update(split_name.encode())
            h.update(str(images.dtype).encode())
            h.update(str(images.shape).encode())
            h.update(np.ascontiguousarray(images).tobytes())
            h.update(np.ascontiguousarray(labels).tobytes())
        return h.hexdigest()

    def with_provenance(self, note: str) -> "DatasetBundle":
        return DatasetBundle(self.name, self.splits, self.class_names,
                             self.provenance + (note,))


def _read_idx_header(blob: bytes, path, expected_magic: int, expected_ndim: int):
    if len(blob) < 4:
        raise IdxTruncatedError(f"{path}: file shorter than the magic number")
    (magic,) = struct.unpack(">I", blob[:4])
    if magic != expected_magic:
        raise IdxMagicError(
            f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    header_len = 4 + 4 * expected_ndim
    if len(blob) < header_len:
        raise IdxTruncatedError(f"{path}: truncated dimension header")
    dims = struct.unpack(f">{expected_ndim}I", blob[4:header_len])
    payload = blob[header_len:]
    expected = int(np.prod(dims))
    if len(payload) < expected:
        raise IdxTruncatedError(
            f"{path}: payload holds {len(payload)} bytes, header promises {expected}")
    return dims, payload[:expected]


def read_idx_images(path) -> np.ndarray:
    """uint8 image tensor [N, H, W] from an IDX file."""
    blob = Path(path).read_bytes()
    dims, payload = _read_idx_header(blob, path, IDX_IMAGES_MAGIC, 3)
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def read_idx_labels(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    dims, payload = _read_idx_header(blob, path, IDX_LABELS_MAGIC, 1)
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def write_idx_images(path, images: np.ndarray) -> None:
    """Write a uint8 [N, H, W] tensor in IDX layout."""
    if images.ndim != 3 or images.dtype != np.uint8:
        raise IdxError(f"write_idx_images wants uint8 [N,H,W], got "
                       f"{images.dtype} {images.shape}")
    with Path(path).open("wb") as fh:
        fh.write(struct.pack(">I3I", IDX_IMAGES_MAGIC, *images.shape))
        fh.write(images.tobytes())


def write_idx_labels(path, labels: np.ndarray) -> None:
    if labels.ndim != 1:
        raise IdxError(f"write_idx_labels wants a 1-d vector, got {labels.shape}")
    with Path(path).open("wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)))
        fh.write(labels.astype(np.uint8).tobytes())


def load_idx_split(images_path, labels_path) -> Split:
    """One split from an IDX image/label file pair, pixels scaled to [0, 1]."""
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if len(images) != len(labels):
        raise IdxCountMismatchError(
            f"{images_path} holds {len(images)} images but {labels_path} "
            f"holds {len(labels)} labels")
    scaled = images.astype(get_dtype()) / 255.0
    return scaled[:, None, :, :], labels.astype(np.int64)


def bundle_from_idx(name: str, train_images, train_labels, test_images,
                    test_labels, valid_count: int, seed: int,
                    class_names=None) -> DatasetBundle:
    """Assemble a bundle from IDX files, carving a stratified validation
    split out of the training data."""
    train = load_idx_split(train_images, train_labels)
    test = load_idx_split(test_images, test_labels)
    n_classes = int(max(train[1].max(), test[1].max())) + 1
    names = tuple(class_names) if class_names else tuple(str(i) for i in range(n_classes))
    bundle = DatasetBundle(
        name, {"train": train, "valid": (train[0][:0], train[1][:0]), "test": test},
        names, provenance=(f"idx:{train_images}", f"idx:{test_images}"))
    return split_train_valid(bundle, valid_count, seed)


def split_train_valid(bundle: DatasetBundle, valid_count: int,
                      seed: int) -> DatasetBundle:
    """Seeded, label-stratified carve-out of a validation split."""
    images, labels = bundle.splits["train"]
    if valid_count >= len(labels):
        raise ValueError(
            f"valid_count {valid_count} must be smaller than the train split "
            f"({len(labels)})")
    if valid_count == 0:
        return bundle

    rng = np.random.default_rng(seed)
    classes, counts = np.unique(labels, return_counts=True)
    # largest-remainder allocation so the carve-out is exactly valid_count
    quota = counts * (valid_count / len(labels))
    take = np.floor(quota).astype(int)
    remainder = quota - take
    for idx in np.argsort(-remainder)[: valid_count - take.sum()]:
        take[idx] += 1

    valid_idx = []
    for cls, n in zip(classes, take):
        members = np.flatnonzero(labels == cls)
        valid_idx.append(rng.choice(members, size=n, replace=False))
    valid_idx = np.sort(np.concatenate(valid_idx))
    mask = np.zeros(len(labels), dtype=bool)
    mask[valid_idx] = True

    splits = dict(bundle.splits)
    splits["train"] = (images[~mask], labels[~mask])
    splits["valid"] = (images[mask], labels[mask])
    out = DatasetBundle(bundle.name, splits, bundle.class_names, bundle.provenance)
    return out.with_provenance(f"valid-carve:{valid_count}:seed={seed}")


def partition_by_classes(bundle: DatasetBundle,
                         classes_a) -> tuple[DatasetBundle, DatasetBundle]:
    """Split a bundle into (classes_a, complement) with dense relabeling.

    Every split is filtered; labels are remapped to [0, len(part)) in
    ascending original-id order.
    """
    classes_a = sorted(set(int(c) for c in classes_a))
    all_classes = list(range(bundle.num_classes))
    unknown = [c for c in classes_a if c not in all_classes]
    if unknown:
        raise ValueError(f"unknown class ids {unknown}")
    if not classes_a or len(classes_a) == len(all_classes):
        raise ValueError("classes_a must be a nonempty proper subset")
    classes_b = [c for c in all_classes if c not in classes_a]

    def extract(keep: list[int], tag: str) -> DatasetBundle:
        remap = {orig: dense for dense, orig in enumerate(keep)}
        splits = {}
        for split_name, (images, labels) in bundle.splits.items():
            mask = np.isin(labels, keep)
            relabeled = np.array([remap[int(l)] for l in labels[mask]], dtype=np.int64)
            splits[split_name] = (images[mask], relabeled)
        names = tuple(bundle.class_names[c] for c in keep)
        part = DatasetBundle(f"{bundle.name}{tag}", splits, names, bundle.provenance)
        return part.with_provenance(f"classes:{keep}")

    label_a = "[" + ",".join(str(c) for c in classes_a) + "]"
    label_b = "[" + ",".join(str(c) for c in classes_b) + "]"
    return extract(classes_a, label_a), extract(classes_b, label_b)


def subsample_per_class(bundle: DatasetBundle, per_class: int,
                        seed: int) -> DatasetBundle:
    """Keep exactly per_class seeded train samples per class.

    Validation and test splits are untouched.
    """
    images, labels = bundle.splits["train"]
    rng = np.random.default_rng(seed)
    chosen = []
    for cls in range(bundle.num_classes):
        members = np.flatnonzero(labels == cls)
        if len(members) < per_class:
            raise ValueError(
                f"class {cls} has {len(members)} train samples, need {per_class}")
        chosen.append(rng.choice(members, size=per_class, replace=False))
    keep = np.sort(np.concatenate(chosen))
    splits = dict(bundle.splits)
    splits["train"] = (images[keep], labels[keep])
    out = DatasetBundle(bundle.name, splits, bundle.class_names, bundle.provenance)
    return out.with_provenance(f"subsample:{per_class}-per-class:seed={seed}")


def batches(split: Split, batch_size: int, rng: np.random.Generator):
    """Seeded-shuffle mini-batches; the final partial batch is kept."""
    images, labels = split
    if batch_size <= 0:
        raise ValueError(f"batch_size must be positive, got {batch_size}")
    if batch_size > len(labels):
        raise ValueError(
            f"batch_size {batch_size} exceeds split size {len(labels)}")
    order = rng.permutation(len(labels))
    for start in range(0, len(order), batch_size):
        pick = order[start:start + batch_size]
        yield images[pick], labels[pick]


def export_bundle_to_idx(bundle: DatasetBundle, directory) -> list[Path]:
    """Write each split as an IDX image/label file pair (for interchange)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for split_name, (images, labels) in bundle.splits.items():
        if len(labels) == 0:
            continue
        quantized = np.clip(np.rint(images[:, 0] * 255.0), 0, 255).astype(np.uint8)
        img_path = directory / f"{split_name}-images.idx"
        lab_path = directory / f"{split_name}-labels.idx"
        write_idx_images(img_path, quantized)
        write_idx_labels(lab_path, labels)
        written += [img_path, lab_path]
    return written
