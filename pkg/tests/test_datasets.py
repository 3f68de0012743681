import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from generality.datasets import (DatasetBundle, IdxCountMismatchError,
                                 IdxMagicError, IdxTruncatedError, batches,
                                 export_bundle_to_idx, load_idx_split,
                                 partition_by_classes, read_idx_images,
                                 split_train_valid, subsample_per_class,
                                 write_idx_images, write_idx_labels)


def write_fixture(tmp_path, images, labels, tag=""):
    img_path = tmp_path / f"images{tag}.idx"
    lab_path = tmp_path / f"labels{tag}.idx"
    write_idx_images(img_path, images)
    write_idx_labels(lab_path, labels)
    return img_path, lab_path


def toy_bundle(rng, n_classes=4, train=40, valid=12, test=16, side=6):
    def split(n):
        labels = np.arange(n) % n_classes
        labels = rng.permutation(labels).astype(np.int64)
        return rng.random((n, 1, side, side)), labels
    return DatasetBundle("toy", {"train": split(train), "valid": split(valid),
                                 "test": split(test)},
                         tuple(str(i) for i in range(n_classes)))


class TestIdxIo:
    def test_two_image_fixture_scaling_endpoints(self, tmp_path):
        images = np.zeros((2, 3, 3), dtype=np.uint8)
        images[0, 0, 0] = 255
        images[1] = 128
        img, lab = write_fixture(tmp_path, images, np.array([0, 1]))
        (x, y) = load_idx_split(img, lab)
        assert x.shape == (2, 1, 3, 3)
        assert x[0, 0, 0, 0] == 1.0
        assert x[0, 0, 1, 1] == 0.0
        assert x[1, 0, 0, 0] == pytest.approx(128 / 255)
        np.testing.assert_array_equal(y, [0, 1])

    def test_truncated_payload(self, tmp_path):
        images = np.random.default_rng(0).integers(0, 256, (4, 5, 5)).astype(np.uint8)
        img, lab = write_fixture(tmp_path, images, np.zeros(4, dtype=np.uint8))
        blob = img.read_bytes()
        img.write_bytes(blob[:len(blob) - 10])
        with pytest.raises(IdxTruncatedError, match="payload"):
            load_idx_split(img, lab)

    def test_bad_magic(self, tmp_path):
        img = tmp_path / "bad.idx"
        img.write_bytes(struct.pack(">I3I", 0x00000801, 2, 3, 3) + bytes(18))
        lab = tmp_path / "lab.idx"
        write_idx_labels(lab, np.zeros(2, dtype=np.uint8))
        with pytest.raises(IdxMagicError, match="magic"):
            load_idx_split(img, lab)

    def test_count_mismatch(self, tmp_path):
        images = np.zeros((3, 2, 2), dtype=np.uint8)
        img, _ = write_fixture(tmp_path, images, np.zeros(3, dtype=np.uint8))
        lab = tmp_path / "short.idx"
        write_idx_labels(lab, np.zeros(2, dtype=np.uint8))
        with pytest.raises(IdxCountMismatchError, match="images"):
            load_idx_split(img, lab)

    def test_write_read_roundtrip(self, tmp_path, rng):
        images = rng.integers(0, 256, (5, 4, 4)).astype(np.uint8)
        path = tmp_path / "round.idx"
        write_idx_images(path, images)
        np.testing.assert_array_equal(read_idx_images(path), images)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 6), st.integers(2, 8), st.integers(0))
    def test_loaded_pixels_always_in_unit_interval(self, n, side, seed):
        import tempfile
        from pathlib import Path
        rng = np.random.default_rng(seed)
        images = rng.integers(0, 256, (n, side, side)).astype(np.uint8)
        labels = rng.integers(0, 10, n).astype(np.uint8)
        with tempfile.TemporaryDirectory() as tmp:
            img, lab = write_fixture(Path(tmp), images, labels)
            x, _ = load_idx_split(img, lab)
        assert x.min() >= 0.0 and x.max() <= 1.0


class TestSplitTrainValid:
    def test_stratified_counts(self, rng):
        bundle = toy_bundle(rng, n_classes=4, train=100)
        out = split_train_valid(bundle, 20, seed=3)
        assert out.split_size("train") == 80
        assert out.split_size("valid") == 20
        _, valid_labels = out.splits["valid"]
        counts = np.bincount(valid_labels, minlength=4)
        assert counts.tolist() == [5, 5, 5, 5]

    def test_zero_count_is_identity(self, rng):
        bundle = toy_bundle(rng)
        assert split_train_valid(bundle, 0, seed=1) is bundle

    def test_same_seed_identical_membership(self, rng):
        bundle = toy_bundle(rng, train=60)
        a = split_train_valid(bundle, 12, seed=9)
        b = split_train_valid(bundle, 12, seed=9)
        np.testing.assert_array_equal(a.splits["valid"][0], b.splits["valid"][0])

    def test_count_too_large(self, rng):
        bundle = toy_bundle(rng, train=20)
        with pytest.raises(ValueError, match="smaller"):
            split_train_valid(bundle, 20, seed=1)

    def test_union_preserved(self, rng):
        bundle = toy_bundle(rng, train=50)
        out = split_train_valid(bundle, 10, seed=2)
        merged = np.concatenate([out.splits["train"][0], out.splits["valid"][0]])
        assert merged.shape[0] == 50
        original = bundle.splits["train"][0]
        assert np.sort(merged.reshape(50, -1), axis=0) == pytest.approx(
            np.sort(original.reshape(50, -1), axis=0))


class TestPartitionByClasses:
    def test_dense_relabeling(self, rng):
        bundle = toy_bundle(rng, n_classes=5, train=50)
        part_a, part_b = partition_by_classes(bundle, [1, 3])
        assert part_a.class_names == ("1", "3")
        assert part_b.class_names == ("0", "2", "4")
        assert set(np.unique(part_a.splits["train"][1])) <= {0, 1}
        assert set(np.unique(part_b.splits["train"][1])) <= {0, 1, 2}

    def test_partition_law_sizes(self, rng):
        bundle = toy_bundle(rng, n_classes=4, train=48, valid=16, test=20)
        part_a, part_b = partition_by_classes(bundle, [0, 2])
        for name in ("train", "valid", "test"):
            assert (part_a.split_size(name) + part_b.split_size(name)
                    == bundle.split_size(name))

    def test_unknown_class(self, rng):
        with pytest.raises(ValueError, match="unknown class"):
            partition_by_classes(toy_bundle(rng), [7])

    def test_full_set_rejected(self, rng):
        with pytest.raises(ValueError, match="proper subset"):
            partition_by_classes(toy_bundle(rng, n_classes=3), [0, 1, 2])

    def test_names_carry_class_list(self, rng):
        part_a, part_b = partition_by_classes(toy_bundle(rng, n_classes=4), [1, 2])
        assert part_a.name.endswith("[1,2]")
        assert part_b.name.endswith("[0,3]")

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10_000))
    def test_partition_law_multiset(self, seed):
        rng = np.random.default_rng(seed)
        bundle = toy_bundle(rng, n_classes=3, train=24, valid=9, test=9, side=3)
        part_a, part_b = partition_by_classes(bundle, [1])
        for name in bundle.splits:
            merged = np.concatenate([part_a.splits[name][0], part_b.splits[name][0]])
            original = bundle.splits[name][0]
            np.testing.assert_allclose(
                np.sort(merged.reshape(len(merged), -1).sum(axis=1)),
                np.sort(original.reshape(len(original), -1).sum(axis=1)))


class TestSubsamplePerClass:
    def test_exact_balance(self, rng):
        bundle = toy_bundle(rng, n_classes=4, train=40)
        out = subsample_per_class(bundle, 3, seed=1)
        counts = np.bincount(out.splits["train"][1], minlength=4)
        assert counts.tolist() == [3, 3, 3, 3]

    def test_valid_test_untouched(self, rng):
        bundle = toy_bundle(rng)
        out = subsample_per_class(bundle, 1, seed=1)
        for name in ("valid", "test"):
            np.testing.assert_array_equal(out.splits[name][0], bundle.splits[name][0])

    def test_insufficient_class(self, rng):
        bundle = toy_bundle(rng, n_classes=4, train=8)
        with pytest.raises(ValueError, match="class"):
            subsample_per_class(bundle, 5, seed=1)

    def test_deterministic(self, rng):
        bundle = toy_bundle(rng, train=40)
        a = subsample_per_class(bundle, 2, seed=6)
        b = subsample_per_class(bundle, 2, seed=6)
        np.testing.assert_array_equal(a.splits["train"][0], b.splits["train"][0])

    def test_single_sample_gives_one_per_class(self, rng):
        bundle = toy_bundle(rng, n_classes=7, train=70)
        out = subsample_per_class(bundle, 1, seed=0)
        assert out.split_size("train") == 7


class TestBatches:
    def test_single_batch(self, rng):
        images, labels = rng.random((500, 1, 2, 2)), np.zeros(500, dtype=np.int64)
        got = list(batches((images, labels), 500, np.random.default_rng(0)))
        assert len(got) == 1 and len(got[0][1]) == 500

    def test_partial_final_batch_kept(self, rng):
        split = (rng.random((10, 1, 2, 2)), np.arange(10, dtype=np.int64))
        sizes = [len(y) for _, y in batches(split, 3, np.random.default_rng(0))]
        assert sizes == [3, 3, 3, 1]

    def test_same_seed_identical_order(self, rng):
        split = (rng.random((20, 1, 2, 2)), np.arange(20, dtype=np.int64))
        a = [y for _, y in batches(split, 6, np.random.default_rng(4))]
        b = [y for _, y in batches(split, 6, np.random.default_rng(4))]
        for ya, yb in zip(a, b):
            np.testing.assert_array_equal(ya, yb)

    def test_zero_batch_size(self, rng):
        split = (rng.random((4, 1, 2, 2)), np.zeros(4, dtype=np.int64))
        with pytest.raises(ValueError, match="positive"):
            list(batches(split, 0, np.random.default_rng(0)))

    def test_oversized_batch_rejected(self, rng):
        split = (rng.random((4, 1, 2, 2)), np.zeros(4, dtype=np.int64))
        with pytest.raises(ValueError, match="exceeds"):
            list(batches(split, 5, np.random.default_rng(0)))


class TestBundle:
    def test_digest_stable_and_content_sensitive(self, rng):
        a = toy_bundle(rng)
        assert a.digest() == a.digest()
        images, labels = a.splits["train"]
        changed = DatasetBundle("toy", {**a.splits,
                                        "train": (images + 0.5, labels)},
                                a.class_names)
        assert changed.digest() != a.digest()

    def test_label_range_validated(self, rng):
        with pytest.raises(ValueError, match="out of range"):
            DatasetBundle("bad", {"train": (rng.random((2, 1, 2, 2)),
                                            np.array([0, 5]))}, ("a", "b"))

    def test_export_to_idx_roundtrip(self, tmp_path, rng):
        bundle = toy_bundle(rng, train=12, valid=4, test=4, side=5)
        export_bundle_to_idx(bundle, tmp_path)
        x, y = load_idx_split(tmp_path / "train-images.idx",
                              tmp_path / "train-labels.idx")
        assert x.shape == bundle.splits["train"][0].shape
        np.testing.assert_array_equal(y, bundle.splits["train"][1])
        # quantization to uint8 and back stays within half a step
        np.testing.assert_allclose(x, bundle.splits["train"][0], atol=0.5 / 255 + 1e-9)
