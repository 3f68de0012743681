import numpy as np
import pytest

from generality.checkpoint import (CheckpointCorruptError, CheckpointDigestError,
                                   CheckpointVersionError, load_checkpoint,
                                   save_checkpoint)
from generality.network import build_network, freeze_for_transfer


@pytest.fixture
def net():
    return build_network("char3conv", 5, (1, 28, 28), seed=42)


def test_roundtrip_bitwise(net, tmp_path):
    path = tmp_path / "net.ckpt"
    save_checkpoint(net, path, epoch=7)
    loaded, meta = load_checkpoint(path)
    assert meta["epoch"] == 7
    for key in net.param_keys():
        assert np.array_equal(loaded.params[key], net.params[key])
        assert loaded.params[key].dtype == net.params[key].dtype


def test_roundtrip_running_stats(tmp_path, rng):
    net = build_network("img5conv", 4, (1, 32, 32), seed=3)
    for i, stats in net.running.items():
        stats.mean[:] = rng.standard_normal(stats.mean.shape)
        stats.var[:] = rng.random(stats.var.shape) + 0.5
    path = tmp_path / "net.ckpt"
    save_checkpoint(net, path)
    loaded, _ = load_checkpoint(path)
    for i in net.running:
        assert np.array_equal(loaded.running[i].mean, net.running[i].mean)
        assert np.array_equal(loaded.running[i].var, net.running[i].var)


def test_freeze_flags_retained(net, tmp_path):
    frozen = freeze_for_transfer(net, 1, 5, reinit_seed=0)
    path = tmp_path / "frozen.ckpt"
    save_checkpoint(frozen, path)
    loaded, _ = load_checkpoint(path)
    assert loaded.frozen == frozen.frozen


def test_digest_mismatch(net, tmp_path):
    path = tmp_path / "net.ckpt"
    save_checkpoint(net, path)
    other = build_network("char3conv", 7, (1, 28, 28), seed=1)
    with pytest.raises(CheckpointDigestError, match="digest"):
        load_checkpoint(path, expect_digest=other.arch_digest())


def test_matching_digest_accepted(net, tmp_path):
    path = tmp_path / "net.ckpt"
    save_checkpoint(net, path)
    loaded, _ = load_checkpoint(path, expect_digest=net.arch_digest())
    assert loaded.num_classes == net.num_classes


def test_version_mismatch(net, tmp_path):
    path = tmp_path / "net.ckpt"
    save_checkpoint(net, path)
    blob = bytearray(path.read_bytes())
    blob[8] = 99  # version field follows the 8-byte magic
    # checksum covers the header, so recompute it for a pure version probe
    import hashlib
    body = bytes(blob[:-32])
    path.write_bytes(body + hashlib.sha256(body).digest())
    with pytest.raises(CheckpointVersionError, match="version"):
        load_checkpoint(path)


def test_corrupt_truncated(net, tmp_path):
    path = tmp_path / "net.ckpt"
    save_checkpoint(net, path)
    path.write_bytes(path.read_bytes()[:100])
    with pytest.raises(CheckpointCorruptError):
        load_checkpoint(path)


def test_corrupt_flipped_byte(net, tmp_path):
    path = tmp_path / "net.ckpt"
    save_checkpoint(net, path)
    blob = bytearray(path.read_bytes())
    blob[len(blob) // 2] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointCorruptError, match="checksum"):
        load_checkpoint(path)


def test_history_metadata_roundtrip(net, tmp_path):
    path = tmp_path / "net.ckpt"
    history = {"best_epoch": 3, "epochs": [{"epoch": 0, "train_loss": 2.1}]}
    save_checkpoint(net, path, history=history)
    _, meta = load_checkpoint(path)
    assert meta["history"] == history
