"""Forward/backward kernels for every layer type the networks use.

Each kernel is a pure function of its inputs plus an explicit
:class:`KernelContext`. It returns the forward output together with a
backward closure that maps the upstream gradient to gradients for every
differentiable input, shapes matching. The closure owns whatever the
backward pass needs (window views, masks, batch statistics), so kernels
keep no hidden state and are safe to call concurrently on disjoint data.

Layout conventions: activations are NCHW, dense activations are [batch,
features], arrays are row-major. Every kernel verifies its output is
finite and raises :class:`NonFiniteError` otherwise.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

Backward = Callable[[np.ndarray], tuple]


class ShapeError(ValueError):
    """Input shapes disagree; the message names the offending dimension."""


class NonFiniteError(ArithmeticError):
    """A kernel produced NaN or Inf."""


@dataclass
class KernelContext:
    """Execution context shared by the kernels.

    mode is "train" or "inference"; rng is the caller-owned stream used
    for dropout masks. Identical inputs, mode, and rng state give
    bitwise-identical outputs.
    """

    mode: str = "inference"
    rng: Optional[np.random.Generator] = None

    @property
    def training(self) -> bool:
        return self.mode == "train"


@dataclass
class RunningStats:
    """Exponential moving average of batch mean/variance for batch norm."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.9

    @classmethod
    def initial(cls, width: int, dtype, momentum: float = 0.9) -> "RunningStats":
        return cls(np.zeros(width, dtype=dtype), np.ones(width, dtype=dtype), momentum)

    def copy(self) -> "RunningStats":
        return RunningStats(self.mean.copy(), self.var.copy(), self.momentum)


def _finite(name: str, *arrays: np.ndarray) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NonFiniteError(f"{name} produced non-finite values")


def _windows(x: np.ndarray, rows: int, cols: int) -> np.ndarray:
    # [B,C,H,W] -> [B,C,H-rows+1,W-cols+1,rows,cols], zero-copy strided view
    return np.lib.stride_tricks.sliding_window_view(x, (rows, cols), axis=(2, 3))


def conv2d(x: np.ndarray, kernels: np.ndarray, bias: np.ndarray,
           ctx: KernelContext) -> tuple[np.ndarray, Backward]:
    """Valid (no padding) stride-1 cross-correlation.

    x: [B,C,H,W], kernels: [K,C,R,S], bias: [K] -> out [B,K,H-R+1,W-S+1].
    Backward yields (d_input, d_kernels, d_bias).
    """
    if x.ndim != 4:
        raise ShapeError(f"conv2d: input must be 4-d, got {x.ndim}-d")
    if kernels.ndim != 4:
        raise ShapeError(f"conv2d: kernels must be 4-d, got {kernels.ndim}-d")
    batch, chans, height, width = x.shape
    n_kernels, k_chans, rows, cols = kernels.shape
    if k_chans != chans:
        raise ShapeError(f"conv2d: input channels {chans} != kernel channels {k_chans}")
    if bias.shape != (n_kernels,):
        raise ShapeError(f"conv2d: bias length {bias.shape} != kernel count {n_kernels}")
    if rows > height or cols > width:
        raise ShapeError(
            f"conv2d: kernel {rows}x{cols} larger than activation {height}x{width}")

    out_h, out_w = height - rows + 1, width - cols + 1
    win = _windows(x, rows, cols)
    # one im2col copy feeds the forward gemm and is reused by backward
    col = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
        batch * out_h * out_w, chans * rows * cols)
    kmat = kernels.reshape(n_kernels, -1)
    out = (col @ kmat.T).reshape(batch, out_h, out_w, n_kernels)
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    out += bias[:, None, None]
    _finite("conv2d", out)

    def backward(grad: np.ndarray):
        gcol = np.ascontiguousarray(grad.transpose(0, 2, 3, 1)).reshape(-1, n_kernels)
        d_bias = gcol.sum(axis=0)
        d_kernels = (gcol.T @ col).reshape(kernels.shape)
        # per-tap contributions: [B,Ho,Wo,C,R,S] -> scatter-add onto the input
        taps = (gcol @ kmat).reshape(batch, out_h, out_w, chans, rows, cols)
        taps = np.ascontiguousarray(taps.transpose(0, 3, 4, 5, 1, 2))
        d_x = np.zeros_like(x)
        for r in range(rows):
            for s in range(cols):
                d_x[:, :, r:r + out_h, s:s + out_w] += taps[:, :, r, s]
        return d_x, d_kernels, d_bias

    return out, backward


def maxpool2(x: np.ndarray, ctx: KernelContext) -> tuple[np.ndarray, Backward]:
    """Non-overlapping 2x2 window maximum.

    Backward routes the upstream gradient to the argmax of each window;
    on exact ties the first position in row-major order wins.
    """
    if x.ndim != 4:
        raise ShapeError(f"maxpool2: input must be 4-d, got {x.ndim}-d")
    batch, chans, height, width = x.shape
    if height % 2 or width % 2:
        raise ShapeError(f"maxpool2: spatial extent {height}x{width} must be even")
    # [B,C,H/2,W/2,4] with the window flattened row-major so argmax ties
    # resolve to the first row-major position
    flat = (x.reshape(batch, chans, height // 2, 2, width // 2, 2)
             .transpose(0, 1, 2, 4, 3, 5)
             .reshape(batch, chans, height // 2, width // 2, 4))
    winners = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, winners[..., None], axis=-1)[..., 0]
    _finite("maxpool2", out)

    def backward(grad: np.ndarray):
        d_flat = np.zeros_like(flat)
        np.put_along_axis(d_flat, winners[..., None], grad[..., None], axis=-1)
        d_x = (d_flat.reshape(batch, chans, height // 2, width // 2, 2, 2)
                     .transpose(0, 1, 2, 4, 3, 5)
                     .reshape(batch, chans, height, width))
        return (d_x,)

    return out, backward


def relu(x: np.ndarray, ctx: KernelContext) -> tuple[np.ndarray, Backward]:
    """max(0, x); the subgradient at exactly 0 is 0."""
    out = np.maximum(x, 0)
    _finite("relu", out)

    def backward(grad: np.ndarray):
        return (grad * (x > 0),)

    return out, backward


def dense(x: np.ndarray, weights: np.ndarray, bias: np.ndarray,
          ctx: KernelContext) -> tuple[np.ndarray, Backward]:
    """Affine map x @ weights + bias: [B,F] x [F,O] -> [B,O]."""
    if x.ndim != 2:
        raise ShapeError(f"dense: input must be 2-d, got {x.ndim}-d")
    if x.shape[1] != weights.shape[0]:
        raise ShapeError(
            f"dense: input features {x.shape[1]} != weight rows {weights.shape[0]}")
    if bias.shape != (weights.shape[1],):
        raise ShapeError(
            f"dense: bias length {bias.shape} != output width {weights.shape[1]}")
    out = x @ weights + bias
    _finite("dense", out)

    def backward(grad: np.ndarray):
        return grad @ weights.T, x.T @ grad, grad.sum(axis=0)

    return out, backward


def batchnorm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
              running: RunningStats, ctx: KernelContext,
              eps: float = 1e-5) -> tuple[np.ndarray, Backward]:
    """Batch normalization, per channel (4-d input) or per feature (2-d).

    Train mode normalizes by batch statistics and updates the running
    EMA in place; inference mode uses the stored running statistics.
    Backward covers input, gamma, and beta.
    """
    if x.ndim == 4:
        axes, pshape = (0, 2, 3), (1, -1, 1, 1)
    elif x.ndim == 2:
        axes, pshape = (0,), (1, -1)
    else:
        raise ShapeError(f"batchnorm: input must be 2-d or 4-d, got {x.ndim}-d")
    if gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(
            f"batchnorm: gamma/beta width must be {x.shape[1]}, got "
            f"{gamma.shape}/{beta.shape}")

    if ctx.training:
        if x.shape[0] < 2:
            raise ShapeError("batchnorm: train mode requires batch size >= 2")
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        m = running.momentum
        running.mean *= m
        running.mean += (1 - m) * mean
        running.var *= m
        running.var += (1 - m) * var
    else:
        mean, var = running.mean, running.var

    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x - mean.reshape(pshape)) * inv_std.reshape(pshape)
    out = gamma.reshape(pshape) * x_hat + beta.reshape(pshape)
    _finite("batchnorm", out)
    count = x.size // x.shape[1]
    from_batch = ctx.training

    def backward(grad: np.ndarray):
        d_beta = grad.sum(axis=axes)
        d_gamma = (grad * x_hat).sum(axis=axes)
        d_hat = grad * gamma.reshape(pshape)
        if from_batch:
            # batch statistics depend on x, so their gradient flows back too
            d_x = (d_hat
                   - d_hat.mean(axis=axes).reshape(pshape)
                   - x_hat * (d_hat * x_hat).mean(axis=axes).reshape(pshape))
            d_x *= inv_std.reshape(pshape)
        else:
            d_x = d_hat * inv_std.reshape(pshape)
        return d_x, d_gamma, d_beta

    return out, backward


def dropout(x: np.ndarray, keep_prob: float,
            ctx: KernelContext) -> tuple[np.ndarray, Backward]:
    """Inverted dropout: survivors scaled by 1/keep_prob, inference is identity."""
    if not 0 < keep_prob <= 1:
        raise ValueError(f"dropout: keep_prob must be in (0, 1], got {keep_prob}")
    if not ctx.training or keep_prob == 1.0:
        def backward(grad: np.ndarray):
            return (grad,)
        return x, backward

    if ctx.rng is None:
        raise ValueError("dropout: train mode requires ctx.rng")
    scale = np.asarray(1.0 / keep_prob, dtype=x.dtype)
    mask = (ctx.rng.random(x.shape) < keep_prob).astype(x.dtype) * scale
    out = x * mask
    _finite("dropout", out)

    def backward(grad: np.ndarray):
        return (grad * mask,)

    return out, backward


def softmax_cross_entropy(logits: np.ndarray,
                          labels: np.ndarray) -> tuple[float, np.ndarray, Callable[[], np.ndarray]]:
    """Max-shifted softmax with mean categorical cross-entropy.

    Returns (loss, probs, backward) where backward() is the gradient of
    the mean loss w.r.t. the logits: (probs - onehot) / batch.
    """
    if logits.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: logits must be 2-d, got {logits.ndim}-d")
    batch, n_classes = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (batch,):
        raise ShapeError(
            f"softmax_cross_entropy: labels shape {labels.shape} != batch ({batch},)")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(
            f"softmax_cross_entropy: label out of range [0, {n_classes})")

    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=1, keepdims=True)
    picked = probs[np.arange(batch), labels]
    loss = float(-np.log(picked).mean())
    _finite("softmax_cross_entropy", probs)

    def backward() -> np.ndarray:
        grad = probs.copy()
        grad[np.arange(batch), labels] -= 1.0
        grad /= batch
        return grad

    return loss, probs, backward
