"""Layer-graph assembly, parameter registry, and the layer-freezing protocol.

A Network is an ordered list of layer specs with a registry mapping
(layer index, parameter name) to its tensor and a per-layer freeze flag.
Freezable units are the parametrized non-classifier layers (conv and
dense); a batchnorm layer is bound to the nearest preceding conv/dense
layer and shares its freeze flag, so freezing a unit pins its weights,
biases, and batchnorm gamma/beta together.

Transfer retraining follows rear unfreezing: with ``free_layers`` of the
N freezable units left trainable, the first N - free_layers units are
frozen, and the classifier is always re-initialized and trainable. A
trainable layer therefore never feeds into a frozen one.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from . import kernels
from .kernels import KernelContext, RunningStats, ShapeError
from .precision import get_dtype

PARAMETRIZED = {"conv", "dense", "batchnorm", "softmax_classifier"}
FREEZABLE = {"conv", "dense"}


@dataclass(frozen=True)
class LayerSpec:
    """One layer: kind plus the hyperparameters that kind uses."""

    kind: str
    kernels: int = 0        # conv: number of output channels
    kernel_size: int = 5    # conv: square kernel extent
    units: int = 0          # dense / softmax_classifier: output width
    keep_prob: float = 1.0  # dropout

    def to_dict(self) -> dict:
        return {"kind": self.kind, "kernels": self.kernels,
                "kernel_size": self.kernel_size, "units": self.units,
                "keep_prob": self.keep_prob}

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(**d)


def conv(channels: int, kernel_size: int = 5) -> LayerSpec:
    return LayerSpec("conv", kernels=channels, kernel_size=kernel_size)


def maxpool() -> LayerSpec:
    return LayerSpec("maxpool")


def relu() -> LayerSpec:
    return LayerSpec("relu")


def batchnorm() -> LayerSpec:
    return LayerSpec("batchnorm")


def dropout(keep_prob: float) -> LayerSpec:
    return LayerSpec("dropout", keep_prob=keep_prob)


def dense_layer(units: int) -> LayerSpec:
    return LayerSpec("dense", units=units)


def classifier() -> LayerSpec:
    # output width is the network's class count, assigned at build time
    return LayerSpec("softmax_classifier")


def char3conv_spec() -> list[LayerSpec]:
    """Three 5x5 conv layers (20, 20, 50 kernels), pooling after the
    second and third, no hidden dense layers, dropout 0.5 into the
    classifier."""
    return [
        conv(20), relu(),
        conv(20), relu(), maxpool(),
        conv(50), relu(), maxpool(),
        dropout(0.5),
        classifier(),
    ]


def img5conv_spec() -> list[LayerSpec]:
    """Five 5x5 conv layers (20, 20, 50, 50, 50), batch norm on every
    conv/dense layer, pooling only after the last conv, an 1800-unit
    dense layer, dropout 0.5 around it."""
    layers: list[LayerSpec] = []
    for channels in (20, 20, 50, 50, 50):
        layers += [conv(channels), batchnorm(), relu()]
    layers += [maxpool(), dropout(0.5),
               dense_layer(1800), batchnorm(), relu(), dropout(0.5),
               classifier()]
    return layers


ARCHITECTURES = {
    "char3conv": char3conv_spec,
    "img5conv": img5conv_spec,
}


@dataclass(frozen=True)
class FreezePlan:
    """Derived freeze directive for a transfer retrain.

    free_layers of the network's freezable units stay trainable (always
    the rear ones); the classifier is re-initialized and trainable.
    """

    free_layers: int
    frozen_groups: tuple[int, ...]
    classifier_reinit: bool = True


class Network:
    """Ordered layers with a parameter registry and per-layer freeze flags."""

    def __init__(self, specs: Sequence[LayerSpec], input_shape: tuple[int, int, int],
                 num_classes: int, seed: int, arch_id: str = "custom"):
        specs = tuple(specs)
        if sum(s.kind == "softmax_classifier" for s in specs) != 1:
            raise ValueError("network needs exactly one softmax_classifier layer")
        if specs[-1].kind != "softmax_classifier":
            raise ValueError("the softmax_classifier layer must be last")
        if num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {num_classes}")

        self.specs = specs
        self.input_shape = tuple(input_shape)
        self.num_classes = int(num_classes)
        self.init_seed = int(seed)
        self.arch_id = arch_id
        self.params: dict[tuple[int, str], np.ndarray] = {}
        self.running: dict[int, RunningStats] = {}
        self.frozen = [False] * len(specs)
        self.group_of: dict[int, Optional[int]] = {}
        self._assign_groups()
        self.layer_shapes = self._propagate_shapes()
        self._init_params(np.random.default_rng(seed))

    # -- construction -------------------------------------------------

    def _assign_groups(self) -> None:
        group = -1
        for i, spec in enumerate(self.specs):
            if spec.kind in FREEZABLE:
                group += 1
                self.group_of[i] = group
            elif spec.kind == "batchnorm":
                if group < 0:
                    raise ValueError("batchnorm layer has no preceding conv/dense layer")
                self.group_of[i] = group
            else:
                self.group_of[i] = None
        self.n_freezable = group + 1

    def _propagate_shapes(self) -> list[tuple]:
        """Activation shape after each layer, raising on spatial underflow."""
        shape: tuple = self.input_shape
        shapes = []
        for i, spec in enumerate(self.specs):
            if spec.kind == "conv":
                if len(shape) != 3:
                    raise ShapeError(f"layer {i} (conv): needs spatial input, got {shape}")
                c, h, w = shape
                k = spec.kernel_size
                if k > h or k > w:
                    raise ShapeError(
                        f"layer {i} (conv): kernel {k}x{k} larger than activation {h}x{w}")
                shape = (spec.kernels, h - k + 1, w - k + 1)
            elif spec.kind == "maxpool":
                c, h, w = shape
                if h % 2 or w % 2:
                    raise ShapeError(
                        f"layer {i} (maxpool): spatial extent {h}x{w} must be even")
                shape = (c, h // 2, w // 2)
            elif spec.kind == "dense":
                shape = (spec.units,)
            elif spec.kind == "softmax_classifier":
                shape = (self.num_classes,)
            # relu, batchnorm, dropout leave the shape alone
            shapes.append(shape)
        return shapes

    def _feature_width(self, i: int) -> int:
        """Flattened input width of layer i."""
        shape = self.input_shape if i == 0 else self.layer_shapes[i - 1]
        return int(np.prod(shape))

    def _init_params(self, rng: np.random.Generator) -> None:
        dtype = get_dtype()
        for i, spec in enumerate(self.specs):
            if spec.kind == "conv":
                in_ch = (self.input_shape if i == 0 else self.layer_shapes[i - 1])[0]
                k = spec.kernel_size
                shape = (spec.kernels, in_ch, k, k)
                fan_in, fan_out = in_ch * k * k, spec.kernels * k * k
                self.params[i, "w"] = _glorot(rng, shape, fan_in, fan_out, dtype)
                self.params[i, "b"] = np.zeros(spec.kernels, dtype=dtype)
            elif spec.kind in ("dense", "softmax_classifier"):
                width = spec.units if spec.kind == "dense" else self.num_classes
                fan_in = self._feature_width(i)
                self.params[i, "w"] = _glorot(rng, (fan_in, width), fan_in, width, dtype)
                self.params[i, "b"] = np.zeros(width, dtype=dtype)
            elif spec.kind == "batchnorm":
                width = self._channel_width(i)
                self.params[i, "gamma"] = np.ones(width, dtype=dtype)
                self.params[i, "beta"] = np.zeros(width, dtype=dtype)
                self.running[i] = RunningStats.initial(width, dtype)

    def _channel_width(self, i: int) -> int:
        shape = self.input_shape if i == 0 else self.layer_shapes[i - 1]
        return int(shape[0])

    # -- bookkeeping ---------------------------------------------------

    def param_keys(self) -> list[tuple[int, str]]:
        return sorted(self.params.keys())

    def frozen_param_keys(self) -> set[tuple[int, str]]:
        return {(i, n) for (i, n) in self.params if self.frozen[i]}

    def trainable_param_keys(self) -> list[tuple[int, str]]:
        return [k for k in self.param_keys() if not self.frozen[k[0]]]

    def classifier_index(self) -> int:
        return len(self.specs) - 1

    def clone(self) -> "Network":
        dup = object.__new__(Network)
        dup.specs = self.specs
        dup.input_shape = self.input_shape
        dup.num_classes = self.num_classes
        dup.init_seed = self.init_seed
        dup.arch_id = self.arch_id
        dup.params = {k: v.copy() for k, v in self.params.items()}
        dup.running = {i: s.copy() for i, s in self.running.items()}
        dup.frozen = list(self.frozen)
        dup.group_of = dict(self.group_of)
        dup.n_freezable = self.n_freezable
        dup.layer_shapes = list(self.layer_shapes)
        return dup

    def arch_digest(self) -> str:
        return arch_digest(self.specs, self.input_shape, self.num_classes)

    # -- execution -----------------------------------------------------

    def forward(self, batch: np.ndarray, ctx: KernelContext):
        """Apply the layers in order; returns (logits, tape).

        The tape holds one (layer index, backward closure, param names)
        entry per step and is what backward() consumes.
        """
        x = batch
        if x.shape[1:] != self.input_shape:
            raise ShapeError(
                f"forward: batch shape {x.shape[1:]} != network input {self.input_shape}")
        tape = []
        for i, spec in enumerate(self.specs):
            if spec.kind in ("dense", "softmax_classifier") and x.ndim > 2:
                x, back = _flatten(x)
                tape.append((i, back, ()))
            if spec.kind == "conv":
                x, back = kernels.conv2d(x, self.params[i, "w"], self.params[i, "b"], ctx)
                tape.append((i, back, ("w", "b")))
            elif spec.kind == "maxpool":
                x, back = kernels.maxpool2(x, ctx)
                tape.append((i, back, ()))
            elif spec.kind == "relu":
                x, back = kernels.relu(x, ctx)
                tape.append((i, back, ()))
            elif spec.kind == "batchnorm":
                # frozen batchnorm is a fixed transformation: inference
                # statistics, no EMA updates
                bn_ctx = KernelContext(mode="inference") if self.frozen[i] else ctx
                x, back = kernels.batchnorm(x, self.params[i, "gamma"],
                                            self.params[i, "beta"], self.running[i], bn_ctx)
                tape.append((i, back, ("gamma", "beta")))
            elif spec.kind == "dropout":
                x, back = kernels.dropout(x, spec.keep_prob, ctx)
                tape.append((i, back, ()))
            elif spec.kind in ("dense", "softmax_classifier"):
                x, back = kernels.dense(x, self.params[i, "w"], self.params[i, "b"], ctx)
                tape.append((i, back, ("w", "b")))
        return x, tape

    def backward(self, tape, grad: np.ndarray) -> dict[tuple[int, str], np.ndarray]:
        """Gradients of the loss for every trainable parameter.

        Propagation stops below the lowest trainable layer; frozen-layer
        parameters never receive gradients.
        """
        trainable_layers = [i for (i, _) in self.trainable_param_keys()]
        stop_at = min(trainable_layers) if trainable_layers else len(self.specs)
        grads: dict[tuple[int, str], np.ndarray] = {}
        for i, back, names in reversed(tape):
            if i < stop_at:
                break
            outputs = back(grad)
            if names and not self.frozen[i]:
                for name, g in zip(names, outputs[1:]):
                    grads[i, name] = g
            grad = outputs[0]
        return grads


def _flatten(x: np.ndarray):
    shape = x.shape

    def back(grad: np.ndarray):
        return (grad.reshape(shape),)

    return np.ascontiguousarray(x.reshape(shape[0], -1)), back


def _glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype, copy=False)


def build_network(arch, num_classes: int, input_shape: tuple[int, int, int],
                  seed: int) -> Network:
    """Build a seeded network from an architecture id or explicit specs.

    Identical arguments give bitwise-identical parameters.
    """
    if isinstance(arch, str):
        if arch not in ARCHITECTURES:
            raise KeyError(f"unknown architecture {arch!r}, expected one of "
                           f"{sorted(ARCHITECTURES)}")
        specs = ARCHITECTURES[arch]()
        arch_id = arch
    else:
        specs = list(arch)
        arch_id = "custom"
    return Network(specs, input_shape, num_classes, seed, arch_id=arch_id)


def derive_freeze_plan(net: Network, free_layers: int) -> FreezePlan:
    if not 0 <= free_layers <= net.n_freezable:
        raise ValueError(
            f"free_layers must be in [0, {net.n_freezable}], got {free_layers}")
    frozen = tuple(range(net.n_freezable - free_layers))
    return FreezePlan(free_layers=free_layers, frozen_groups=frozen)


def freeze_for_transfer(net: Network, free_layers: int, num_classes: int,
                        reinit_seed: int) -> Network:
    """Prepare a trained network for retraining on another dataset.

    Freezes the leading N - free_layers freezable units (weights, biases,
    and attached batchnorm gamma/beta), resizes the classifier to the new
    class count, and re-initializes it from a fresh seeded draw. The
    classifier is never frozen.
    """
    plan = derive_freeze_plan(net, free_layers)
    out = net.clone()
    out.num_classes = int(num_classes)
    out.layer_shapes = out._propagate_shapes()
    for i in range(len(out.specs)):
        group = out.group_of[i]
        out.frozen[i] = group is not None and group in plan.frozen_groups

    ci = out.classifier_index()
    rng = np.random.default_rng(reinit_seed)
    fan_in = out._feature_width(ci)
    dtype = out.params[ci, "w"].dtype
    out.params[ci, "w"] = _glorot(rng, (fan_in, num_classes), fan_in, num_classes, dtype)
    out.params[ci, "b"] = np.zeros(num_classes, dtype=dtype)
    out.frozen[ci] = False
    return out


def arch_digest(specs: Iterable[LayerSpec], input_shape, num_classes: int) -> str:
    """Stable content hash of the architecture (guards checkpoint loads)."""
    doc = {
        "specs": [s.to_dict() for s in specs],
        "input_shape": list(input_shape),
        "num_classes": int(num_classes),
    }
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()
