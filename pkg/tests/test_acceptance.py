"""Acceptance suite: eight criteria, each as one test with its tolerance
pinned in the assertion. Run with `pytest tests/test_acceptance.py -v -s`
for the per-criterion PASS lines. Heavy experiments run in 32-bit
precision (the training precision); gradient and oracle checks run in
64-bit as required.

The class-level sub-sample criterion uses real MNIST when IDX files are
present under $GENERALITY_MNIST_DIR (default ./data/mnist); otherwise it
substitutes the synthetic noisy-background analogue and checks the
accuracy gap only.
"""

import json
import os
import statistics
from pathlib import Path

import numpy as np
import pytest
import yaml

from generality.cli import main as cli_main
from generality.datasets import bundle_from_idx
from generality.gradcheck import grad_check
from generality.kernels import KernelContext, conv2d, dense
from generality.optimizer import OptimConfig, Schedule, derive_seed, train
from generality.precision import precision
from generality.synthetic import make_synthetic
from generality.transfer import (JobAudit, RecordStore, generality_curve,
                                 retrain_transfer, subsample_generality,
                                 train_base)
from oracles import loop_conv2d, loop_matmul

SEEDS = (11, 12, 13)
SIZES = {"train": 512, "valid": 128, "test": 256}

CURVE_CFG = OptimConfig(lr0=0.01, schedule=Schedule(kind="multiplicative", gamma=0.998),
                        momentum_lo=0.5, momentum_hi=1.0, momentum_ramp_epochs=100,
                        l1=0.0001, l2=0.0001, max_epochs=30, batch_size=64,
                        early_stop=True, patience=8)
SUBSAMPLE_CFG = OptimConfig(lr0=0.01, schedule=Schedule(kind="multiplicative", gamma=0.998),
                            momentum_lo=0.5, momentum_hi=1.0, momentum_ramp_epochs=100,
                            l1=0.0001, l2=0.0001, max_epochs=40, batch_size=128,
                            early_stop=True, patience=10)

MNIST_DIR = Path(os.environ.get("GENERALITY_MNIST_DIR", "data/mnist"))
MNIST_FILES = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte",
               "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")


def report(number: int, name: str, detail: str) -> None:
    print(f"\nACCEPTANCE {number} ({name}): PASS [{detail}]")


def mnist_available() -> bool:
    return all((MNIST_DIR / f).exists() for f in MNIST_FILES)


# ---------------------------------------------------------------------
# shared experiment fixtures (module scope: criteria 4-7 share a store)
# ---------------------------------------------------------------------

@pytest.fixture(scope="module")
def store(tmp_path_factory):
    return RecordStore(tmp_path_factory.mktemp("acceptance") / "store")


@pytest.fixture(scope="module")
def self_curve(store):
    with precision("f32"):
        plain = make_synthetic("strokes", SIZES, seed=7)
        return generality_curve(plain, plain, "char3conv", CURVE_CFG, SEEDS,
                                store=store, audit=JobAudit())


@pytest.fixture(scope="module")
def containment_curves(store):
    with precision("f32"):
        plain = make_synthetic("strokes", SIZES, seed=7)
        rotated = make_synthetic("strokes_rotated", SIZES, seed=8)
        rot_to_plain = generality_curve(rotated, plain, "char3conv", CURVE_CFG,
                                        SEEDS, store=store, audit=JobAudit(),
                                        free_layer_values=[0])
        plain_to_rot = generality_curve(plain, rotated, "char3conv", CURVE_CFG,
                                        SEEDS, store=store, audit=JobAudit(),
                                        free_layer_values=[0])
    return rot_to_plain, plain_to_rot


@pytest.fixture(scope="module")
def subsample_result(store):
    with precision("f32"):
        if mnist_available():
            mother = bundle_from_idx(
                "mnist", MNIST_DIR / MNIST_FILES[0], MNIST_DIR / MNIST_FILES[1],
                MNIST_DIR / MNIST_FILES[2], MNIST_DIR / MNIST_FILES[3],
                valid_count=10000, seed=5)
            table = subsample_generality(mother, [4, 5, 8], [1, 50], "char3conv",
                                         SUBSAMPLE_CFG, seeds=(11,), store=store,
                                         audit=JobAudit())
            return "mnist", table
        mother = make_synthetic("strokes_noisybg",
                                {"train": 2000, "valid": 300, "test": 600}, seed=21)
        table = subsample_generality(mother, [4, 5, 8], [1], "char3conv",
                                     SUBSAMPLE_CFG, seeds=SEEDS, store=store,
                                     audit=JobAudit())
        return "synthetic", table


# ---------------------------------------------------------------------
# criteria
# ---------------------------------------------------------------------

def test_criterion_1_gradient_correctness():
    """Analytic gradients of every kernel match central differences on
    >= 20 seeded inputs each, relative error < 1e-5 in 64-bit."""
    kernels = ("conv2d", "maxpool2", "relu", "dense", "batchnorm", "dropout",
               "softmax_cross_entropy")
    worst = 0.0
    for kernel_id in kernels:
        for seed in range(20):
            err = grad_check(kernel_id, seed=seed)
            assert err < 1e-5, f"{kernel_id} seed {seed}: relative error {err:.3e}"
            worst = max(worst, err)
    report(1, "gradient correctness", f"7 kernels x 20 seeds, worst {worst:.2e} < 1e-5")


def test_criterion_2_oracle_equivalence():
    """conv2d and dense equal their nested-loop oracles to 1e-12 in
    64-bit on >= 50 random shape/seed combinations each."""
    ctx = KernelContext()
    worst = 0.0
    for seed in range(50):
        rng = np.random.default_rng(1000 + seed)
        rows, cols = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        batch, chans = int(rng.integers(1, 3)), int(rng.integers(1, 4))
        n_k = int(rng.integers(1, 4))
        height = int(rng.integers(rows, 8))
        width = int(rng.integers(cols, 8))
        x = rng.standard_normal((batch, chans, height, width))
        k = rng.standard_normal((n_k, chans, rows, cols))
        b = rng.standard_normal(n_k)
        out, _ = conv2d(x, k, b, ctx)
        gap = float(np.abs(out - loop_conv2d(x, k, b)).max())
        assert gap <= 1e-12, f"conv2d combo {seed}: max gap {gap:.3e}"
        worst = max(worst, gap)

    for seed in range(50):
        rng = np.random.default_rng(2000 + seed)
        batch = int(rng.integers(1, 7))
        in_f, out_f = int(rng.integers(1, 9)), int(rng.integers(1, 9))
        x = rng.standard_normal((batch, in_f))
        w = rng.standard_normal((in_f, out_f))
        b = rng.standard_normal(out_f)
        out, _ = dense(x, w, b, ctx)
        gap = float(np.abs(out - loop_matmul(x, w, b)).max())
        assert gap <= 1e-12, f"dense combo {seed}: max gap {gap:.3e}"
        worst = max(worst, gap)
    report(2, "oracle equivalence", f"2 x 50 combos, worst gap {worst:.2e} <= 1e-12")


def test_criterion_3_freeze_theorem():
    """For every free-layer count, a 5-epoch retrain leaves frozen
    parameters bitwise identical to the base; the classifier differs."""
    with precision("f32"):
        data = make_synthetic("strokes", {"train": 120, "valid": 40, "test": 40},
                              seed=9)
        cfg = OptimConfig(lr0=0.01,
                          schedule=Schedule(kind="multiplicative", gamma=0.998),
                          l1=0.0001, l2=0.0001, max_epochs=5, batch_size=32,
                          early_stop=False, patience=5)
        base = train_base(data, "char3conv", cfg, seed=31)
        ci = base.net.classifier_index()
        for free_layers in range(base.net.n_freezable + 1):
            result = retrain_transfer(base.net, data, free_layers, cfg,
                                      seed=derive_seed(32, free_layers))
            net = result.net
            frozen_keys = [(i, n) for (i, n) in net.params if net.frozen[i]]
            expected_frozen = base.net.n_freezable - free_layers
            assert len({i for i, _ in frozen_keys}) == expected_frozen
            for key in frozen_keys:
                assert np.array_equal(net.params[key], base.net.params[key]), (
                    f"free_layers={free_layers}: frozen {key} changed")
            assert not np.array_equal(net.params[ci, "w"], base.net.params[ci, "w"])
    report(3, "freeze theorem",
           "free_layers 0..3, 5-epoch retrains, frozen tensors bitwise equal")


def test_criterion_4_self_generality(self_curve):
    """Median self-generality over 3 seeds: >= 0.98 fully unfrozen,
    >= 0.95 with only the classifier trainable."""
    n_free = max(self_curve.free_layer_values())
    g_full = statistics.median(r.generality for r in self_curve.records
                               if r.free_layers == n_free)
    g_frozen = statistics.median(r.generality for r in self_curve.records
                                 if r.free_layers == 0)
    assert g_full >= 0.98, f"median g at full freedom {g_full:.4f} < 0.98"
    assert g_frozen >= 0.95, f"median g at zero freedom {g_frozen:.4f} < 0.95"
    report(4, "self generality",
           f"median g(full)={g_full:.3f} >= 0.98, median g(frozen)={g_frozen:.3f} >= 0.95")


def test_invariant_accuracy_monotone_in_free_layers(self_curve):
    """More freedom never hurts beyond a 0.02 noise band (mean over seeds)."""
    means = []
    for fl in self_curve.free_layer_values():
        accs = [r.transfer_accuracy for r in self_curve.records
                if r.free_layers == fl]
        means.append(sum(accs) / len(accs))
    for lower, higher in zip(means, means[1:]):
        assert higher >= lower - 0.02, f"mean accuracy drop {lower - higher:.3f} > 0.02"


def test_criterion_5_containment_direction(containment_curves):
    """The rotated family contains the plain one: transferring rotated
    features to plain beats the reverse at zero freedom (median sign
    over 3 seeds)."""
    rot_to_plain, plain_to_rot = containment_curves
    diffs = []
    for seed in SEEDS:
        g_rp = rot_to_plain.at(0, seed).generality
        g_pr = plain_to_rot.at(0, seed).generality
        diffs.append(g_rp - g_pr)
    med = statistics.median(diffs)
    assert med > 0, f"median generality asymmetry {med:.4f} not positive ({diffs})"
    report(5, "containment direction",
           f"median g0(rotated->plain) - g0(plain->rotated) = {med:.3f} > 0")


def test_criterion_6_subsample_class_gap(subsample_result):
    """One-shot retrain of the held-out classes: warm features beat
    random init by >= 10 accuracy points (k = all layers free)."""
    kind, table = subsample_result
    n_free = max(r.free_layers for r in table.rows)
    gaps = []
    for seed in sorted({r.seed for r in table.rows}):
        random_acc = [r.accuracy for r in table.rows
                      if r.init == "random" and r.per_class == 1 and r.seed == seed]
        warm_acc = [r.accuracy for r in table.rows
                    if r.init == "base" and r.per_class == 1
                    and r.free_layers == n_free and r.seed == seed]
        gaps.append(warm_acc[0] - random_acc[0])
    med = statistics.median(gaps)
    assert med >= 0.10, f"median one-shot gap {med:.3f} < 0.10 ({gaps})"

    if kind == "mnist":
        for free_layers in range(1, n_free + 1):
            acc = table.accuracy(50, "base", free_layers)
            assert acc >= 0.93, f"p=50 free_layers={free_layers}: {acc:.3f} < 0.93"
        report(6, "sub-sample class generality",
               f"mnist: one-shot gap {med:.3f} >= 0.10, p=50 warm accuracy >= 0.93")
    else:
        report(6, "sub-sample class generality",
               f"synthetic analogue: median one-shot gap {med:.3f} >= 0.10")


def test_criterion_7_ratio_exactness(store, self_curve, containment_curves,
                                     subsample_result):
    """Every persisted record satisfies generality == transfer/scratch
    to full float precision."""
    records = store.all_records()
    assert len(records) >= 20
    for r in records:
        assert r.generality == r.transfer_accuracy / r.scratch_accuracy
        assert 0.0 <= r.transfer_accuracy <= 1.0
        assert 0.0 < r.scratch_accuracy <= 1.0
    report(7, "ratio exactness", f"{len(records)} records, exact to the last bit")


def test_criterion_8_determinism_and_cache(tmp_path):
    """Re-running an experiment bitwise-reproduces checkpoints and CSVs
    and resolves every job from cache."""
    doc = {
        "experiment": "retrain",
        "arch": "char3conv",
        "precision": "f32",
        "seeds": [5],
        "free_layers": 1,
        "data": {
            "base": {"synthetic": {"family": "strokes_rotated", "train": 64,
                                   "valid": 24, "test": 24, "seed": 3}},
            "retrain": {"synthetic": {"family": "strokes", "train": 64,
                                      "valid": 24, "test": 24, "seed": 4}}},
        "optim": {"max_epochs": 2, "batch_size": 16,
                  "schedule": {"kind": "multiplicative", "gamma": 0.998}},
    }
    config = tmp_path / "exp.yaml"
    config.write_text(yaml.safe_dump(doc))

    def snapshot(out_dir):
        files = {}
        for pattern in ("*.csv", "store/checkpoints/*.ckpt", "store/records/*.json"):
            for path in sorted(Path(out_dir).glob(pattern)):
                files[str(path.relative_to(out_dir))] = path.read_bytes()
        return files

    out_a = tmp_path / "a"
    assert cli_main(["run", "--config", str(config), "--out", str(out_a)]) == 0
    first = snapshot(out_a)
    manifest = json.loads((out_a / "manifest.json").read_text())
    assert manifest["jobs"]["executed"] > 0
    assert any(name.endswith(".ckpt") for name in first)

    assert cli_main(["run", "--config", str(config), "--out", str(out_a)]) == 0
    rerun_manifest = json.loads((out_a / "manifest.json").read_text())
    assert rerun_manifest["jobs"]["executed"] == 0, "re-run trained jobs"
    rerun = snapshot(out_a)
    assert first.keys() == rerun.keys()
    for name in first:
        assert first[name] == rerun[name], f"{name} changed on re-run"

    # a fresh directory reproduces the identical bytes
    out_b = tmp_path / "b"
    assert cli_main(["run", "--config", str(config), "--out", str(out_b)]) == 0
    fresh = snapshot(out_b)
    assert first.keys() == fresh.keys()
    for name in first:
        assert first[name] == fresh[name], f"{name} differs across directories"
    report(8, "determinism and cache audit",
           "re-run: 0 jobs trained, checkpoints and CSVs bitwise identical")
