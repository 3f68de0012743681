"""Training recipe: rmsprop with a Polyak momentum ramp, L1/L2 penalties,
learning-rate schedules, and the epoch loop with early termination.

The per-parameter update for every unfrozen parameter is

    g    <- grad + 2 * l2 * theta + l1 * sign(theta)
    acc  <- rho * acc + (1 - rho) * g^2
    v    <- m * v - lr * g / sqrt(acc + eps)
    theta <- theta + v

Frozen parameters and their optimizer state stay untouched bitwise.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .datasets import DatasetBundle, batches
from .kernels import KernelContext, NonFiniteError, softmax_cross_entropy
from .network import Network
from .precision import precision_name


class TrainingDiverged(ArithmeticError):
    pass


@dataclass(frozen=True)
class Schedule:
    """Learning-rate schedule: multiplicative, subtractive, or piecewise."""

    kind: str = "multiplicative"
    gamma: float = 0.998          # multiplicative per-epoch factor
    delta: float = 0.0005         # subtractive per-epoch decrement
    table: tuple = ((0, 0.001),)  # piecewise (epoch, lr) breakpoints
    floor: float = 1e-6           # lower bound for the subtractive rule

    def __post_init__(self):
        if self.kind not in ("multiplicative", "subtractive", "piecewise"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")


@dataclass(frozen=True)
class OptimConfig:
    lr0: float = 0.01
    schedule: Schedule = field(default_factory=Schedule)
    momentum_lo: float = 0.5
    momentum_hi: float = 1.0
    momentum_ramp_epochs: int = 100
    l1: float = 0.0001
    l2: float = 0.0001
    max_epochs: int = 200
    batch_size: int = 500
    early_stop: bool = True
    patience: int = 20
    rho: float = 0.9
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError(f"lr0 must be > 0, got {self.lr0}")
        if not 0 <= self.momentum_lo <= self.momentum_hi <= 1:
            raise ValueError(
                f"need 0 <= momentum_lo <= momentum_hi <= 1, got "
                f"[{self.momentum_lo}, {self.momentum_hi}]")
        if self.l1 < 0 or self.l2 < 0:
            raise ValueError("regularizer coefficients must be >= 0")

    def digest(self) -> str:
        doc = asdict(self)
        doc["precision"] = precision_name()
        blob = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()


def momentum_coefficient(epoch: int, cfg: OptimConfig) -> float:
    """Linear ramp from momentum_lo at epoch 0 to momentum_hi at ramp end."""
    if cfg.momentum_ramp_epochs <= 0 or epoch >= cfg.momentum_ramp_epochs:
        return cfg.momentum_hi
    span = cfg.momentum_hi - cfg.momentum_lo
    return cfg.momentum_lo + span * (epoch / cfg.momentum_ramp_epochs)


def lr_at(epoch: int, cfg: OptimConfig) -> float:
    s = cfg.schedule
    if s.kind == "multiplicative":
        return cfg.lr0 * s.gamma ** epoch
    if s.kind == "subtractive":
        return max(s.floor, cfg.lr0 - s.delta * epoch)
    lr = None
    for start, value in sorted(s.table):
        if epoch >= start:
            lr = value
    if lr is None:
        lr = cfg.lr0
    return lr


@dataclass
class OptimizerState:
    """Per-parameter rmsprop accumulator and momentum velocity.

    The accumulator starts at 1, not 0: a zero start makes the first
    steps ~ lr / sqrt(1 - rho) regardless of gradient scale, which is
    large enough to destroy pretrained features when retraining on a
    handful of samples. Starting at 1 bounds early steps by lr * |g|
    and decays to the running g^2 average within a few dozen updates.
    """

    acc: dict
    vel: dict
    epoch: int = 0

    @classmethod
    def for_network(cls, net: Network) -> "OptimizerState":
        keys = net.trainable_param_keys()
        return cls(acc={k: np.ones_like(net.params[k]) for k in keys},
                   vel={k: np.zeros_like(net.params[k]) for k in keys})


def step(params: dict, grads: dict, state: OptimizerState, frozen_keys,
         cfg: OptimConfig, lr: float, momentum: float) -> None:
    """One update over the given gradients, respecting the freeze set."""
    for key in sorted(grads):
        if key in frozen_keys:
            continue
        grad = grads[key]
        if not np.all(np.isfinite(grad)):
            raise TrainingDiverged(f"non-finite gradient for parameter {key}")
        theta = params[key]
        g = grad + 2.0 * cfg.l2 * theta + cfg.l1 * np.sign(theta)
        acc = state.acc[key]
        acc *= cfg.rho
        acc += (1.0 - cfg.rho) * g * g
        vel = state.vel[key]
        vel *= momentum
        vel -= lr * g / np.sqrt(acc + cfg.eps)
        theta += vel


@dataclass
class EpochStats:
    epoch: int
    lr: float
    momentum: float
    train_loss: float
    valid_error: float
    test_accuracy: float


@dataclass
class History:
    """Per-epoch record of one training run."""

    epochs: list = field(default_factory=list)
    best_epoch: int = -1

    def append(self, stats: EpochStats) -> None:
        self.epochs.append(stats)

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "lr", "momentum", "train_loss",
                             "valid_error", "test_accuracy"])
            for s in self.epochs:
                writer.writerow([s.epoch, repr(s.lr), repr(s.momentum),
                                 repr(s.train_loss), repr(s.valid_error),
                                 repr(s.test_accuracy)])

    def to_jsonable(self) -> dict:
        return {"best_epoch": self.best_epoch,
                "epochs": [asdict(s) for s in self.epochs]}


def derive_seed(*parts) -> int:
    """Stable 64-bit seed from any hashable description of a role."""
    blob = "\x1f".join(str(p) for p in parts).encode()
    return int.from_bytes(hashlib.sha256(blob).digest()[:8], "little")


def evaluate(net: Network, split, chunk: int = 256) -> float:
    """Top-1 accuracy in inference mode; argmax ties go to the lowest class."""
    images, labels = split
    if len(labels) == 0:
        raise ValueError("evaluate: empty split")
    ctx = KernelContext(mode="inference")
    hits = 0
    for start in range(0, len(labels), chunk):
        logits, _ = net.forward(images[start:start + chunk], ctx)
        hits += int((logits.argmax(axis=1) == labels[start:start + chunk]).sum())
    return hits / len(labels)


def train(net: Network, data: DatasetBundle, cfg: OptimConfig,
          seed: int) -> tuple[Network, History]:
    """Seeded mini-batch training; returns the best-validation-epoch network.

    Records train loss, validation error, and test accuracy per epoch.
    Early termination fires when validation error has not improved for
    cfg.patience epochs. The input network is not modified.
    """
    history = History()
    net = net.clone()
    if cfg.max_epochs == 0:
        return net, history

    for name in ("train", "valid", "test"):
        if data.split_size(name) == 0:
            raise ValueError(f"train: empty {name} split")

    state = OptimizerState.for_network(net)
    frozen_keys = net.frozen_param_keys()
    dropout_rng = np.random.default_rng(derive_seed(seed, "dropout"))
    # sub-sampled retrains can be smaller than the recipe's batch size
    batch_size = min(cfg.batch_size, data.split_size("train"))
    best = {"error": np.inf, "epoch": -1, "params": None, "running": None}

    for epoch in range(cfg.max_epochs):
        lr = lr_at(epoch, cfg)
        momentum = momentum_coefficient(epoch, cfg)
        shuffle_rng = np.random.default_rng(derive_seed(seed, "shuffle", epoch))
        ctx = KernelContext(mode="train", rng=dropout_rng)

        total_nll, seen = 0.0, 0
        for xb, yb in batches(data.splits["train"], batch_size, shuffle_rng):
            try:
                logits, tape = net.forward(xb, ctx)
                loss, _, loss_back = softmax_cross_entropy(logits, yb)
            except NonFiniteError as exc:
                raise TrainingDiverged(f"diverged at epoch {epoch}: {exc}") from exc
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}")
            grads = net.backward(tape, loss_back())
            step(net.params, grads, state, frozen_keys, cfg, lr, momentum)
            total_nll += loss * len(yb)
            seen += len(yb)
        state.epoch = epoch + 1

        valid_error = 1.0 - evaluate(net, data.splits["valid"])
        test_accuracy = evaluate(net, data.splits["test"])
        history.append(EpochStats(epoch, lr, momentum, total_nll / seen,
                                  valid_error, test_accuracy))

        if valid_error < best["error"]:
            best = {"error": valid_error, "epoch": epoch,
                    "params": {k: v.copy() for k, v in net.params.items()},
                    "running": {i: s.copy() for i, s in net.running.items()}}
        if cfg.early_stop and epoch - best["epoch"] >= cfg.patience:
            break

    history.best_epoch = best["epoch"]
    net.params = best["params"]
    net.running = best["running"]
    return net, history
