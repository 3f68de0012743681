"""Versioned binary checkpoints for networks.

Byte layout (all integers little-endian, documented in
docs/file-formats.md):

    magic            8 bytes   b"GENCKPT1"
    version          u32       currently 1
    arch digest      32 bytes  raw sha256 of the architecture document
    meta length      u64
    meta             UTF-8 JSON (specs, shapes, seeds, freeze flags,
                               epoch counter, metric history, rng state)
    tensor count     u32
    per tensor:
        name length  u16
        name         UTF-8     e.g. "3.w", "5.gamma", "5.running_mean"
        dtype code   u8        4 = float32, 8 = float64
        ndim         u8
        dims         u32 each
        data         raw little-endian floats, row-major
    checksum         32 bytes  sha256 of everything before it

A round trip reproduces parameters and running statistics bitwise.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .kernels import RunningStats
from .network import LayerSpec, Network

MAGIC = b"GENCKPT1"
VERSION = 1
_DTYPE_CODES = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


class CheckpointError(Exception):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointDigestError(CheckpointError):
    pass


class CheckpointCorruptError(CheckpointError):
    pass


def _param_name(key: tuple[int, str]) -> str:
    return f"{key[0]}.{key[1]}"


def save_checkpoint(net: Network, path, epoch: int = 0, history=None,
                    rng_state=None) -> None:
    """Write the network to path; see the module docstring for the layout."""
    meta = {
        "arch_id": net.arch_id,
        "specs": [s.to_dict() for s in net.specs],
        "input_shape": list(net.input_shape),
        "num_classes": net.num_classes,
        "init_seed": net.init_seed,
        "frozen": list(net.frozen),
        "epoch": int(epoch),
        "history": history,
        "rng_state": rng_state,
    }
    tensors: list[tuple[str, np.ndarray]] = []
    for key in net.param_keys():
        tensors.append((_param_name(key), net.params[key]))
    for i in sorted(net.running):
        tensors.append((f"{i}.running_mean", net.running[i].mean))
        tensors.append((f"{i}.running_var", net.running[i].var))

    parts = [MAGIC, struct.pack("<I", VERSION),
             bytes.fromhex(net.arch_digest())]
    meta_blob = json.dumps(meta, sort_keys=True).encode()
    parts.append(struct.pack("<Q", len(meta_blob)))
    parts.append(meta_blob)
    parts.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        nb = name.encode()
        code = arr.dtype.itemsize
        if code not in _DTYPE_CODES:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for tensor {name}")
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPE_CODES[code]).tobytes())

    payload = b"".join(parts)
    blob = payload + hashlib.sha256(payload).digest()
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointCorruptError("checkpoint truncated")
        chunk = self.blob[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path, expect_digest: str | None = None):
    """Load a checkpoint, returning (Network, meta dict).

    expect_digest, when given, must match the stored architecture digest
    (loading into a mismatched architecture is a digest error).
    """
    blob = Path(path).read_bytes()
    if len(blob) < len(MAGIC) + 4 + 32 + 32:
        raise CheckpointCorruptError("checkpoint file too short")
    body, checksum = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != checksum:
        raise CheckpointCorruptError("checkpoint checksum mismatch")

    r = _Reader(body)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointCorruptError("bad checkpoint magic")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointVersionError(
            f"checkpoint format version {version}, this build reads {VERSION}")
    stored_digest = r.take(32).hex()
    if expect_digest is not None and stored_digest != expect_digest:
        raise CheckpointDigestError(
            f"architecture digest mismatch: checkpoint {stored_digest[:12]}..., "
            f"expected {expect_digest[:12]}...")

    (meta_len,) = r.unpack("<Q")
    try:
        meta = json.loads(r.take(meta_len).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointCorruptError(f"unreadable checkpoint metadata: {exc}") from None

    (count,) = r.unpack("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode()
        code, ndim = r.unpack("<BB")
        if code not in _DTYPE_CODES:
            raise CheckpointCorruptError(f"unknown dtype code {code} for tensor {name}")
        dims = r.unpack(f"<{ndim}I")
        n = int(np.prod(dims)) if dims else 1
        data = np.frombuffer(r.take(n * code), dtype=_DTYPE_CODES[code])
        tensors[name] = data.reshape(dims).copy()

    net = _rebuild(meta, tensors, stored_digest)
    return net, meta


def _rebuild(meta: dict, tensors: dict[str, np.ndarray], stored_digest: str) -> Network:
    specs = [LayerSpec.from_dict(d) for d in meta["specs"]]
    net = Network(specs, tuple(meta["input_shape"]), meta["num_classes"],
                  meta["init_seed"], arch_id=meta["arch_id"])
    if net.arch_digest() != stored_digest:
        raise CheckpointDigestError(
            "stored architecture digest does not match the rebuilt network")
    net.frozen = [bool(f) for f in meta["frozen"]]
    for key in net.param_keys():
        name = _param_name(key)
        if name not in tensors:
            raise CheckpointCorruptError(f"checkpoint missing tensor {name}")
        if tensors[name].shape != net.params[key].shape:
            raise CheckpointCorruptError(
                f"tensor {name} has shape {tensors[name].shape}, "
                f"expected {net.params[key].shape}")
        net.params[key] = tensors[name]
    for i, stats in net.running.items():
        mean, var = tensors.get(f"{i}.running_mean"), tensors.get(f"{i}.running_var")
        if mean is None or var is None:
            raise CheckpointCorruptError(f"checkpoint missing running stats for layer {i}")
        net.running[i] = RunningStats(mean, var, stats.momentum)
    return net
