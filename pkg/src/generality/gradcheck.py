"""Central finite-difference checking of the analytic kernel gradients.

For each named kernel, a builder draws seeded 64-bit inputs (nudged away
from the non-differentiable points of relu and maxpool), a scalar
objective sum(output * projection) is formed with a fixed random
projection, and every analytic gradient is compared element by element
against (f(x+h) - f(x-h)) / 2h.
"""

from __future__ import annotations

import numpy as np

from . import kernels
from .kernels import KernelContext, RunningStats

DEFAULT_STEP = 1e-5

# shapes of the differentiable inputs, small enough that the element loop
# stays in the milliseconds
DEFAULT_SHAPES = {
    "conv2d": ((2, 2, 6, 6), (3, 2, 3, 3), (3,)),
    "maxpool2": ((2, 2, 4, 4),),
    "relu": ((3, 7),),
    "dense": ((3, 5), (5, 4), (4,)),
    "batchnorm": ((6, 3, 4, 4), (3,), (3,)),
    "dropout": ((4, 6),),
    "softmax_cross_entropy": ((4, 5),),
}


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max absolute difference relative to the larger gradient magnitude."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-12)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def pool_safe_input(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    """Random input whose 2x2 windows have well-separated values.

    Each window gets a random permutation of offsets spaced 0.1 apart
    plus jitter < 0.02, so the argmax cannot flip under a 1e-5 step.
    """
    batch, chans, height, width = shape
    wshape = (batch, chans, height // 2, width // 2, 4)
    base = rng.standard_normal(wshape[:-1] + (1,))
    offsets = rng.permuted(np.broadcast_to(np.arange(4) * 0.1, wshape), axis=-1)
    jitter = rng.uniform(-0.02, 0.02, wshape)
    win = base + offsets + jitter
    return (win.reshape(batch, chans, height // 2, width // 2, 2, 2)
               .transpose(0, 1, 2, 4, 3, 5)
               .reshape(shape))


def kink_safe_input(rng: np.random.Generator, shape: tuple[int, ...],
                    margin: float = 0.2) -> np.ndarray:
    """Random values bounded away from zero (for relu)."""
    magnitude = rng.uniform(margin, 1.5, shape)
    sign = np.where(rng.random(shape) < 0.5, -1.0, 1.0)
    return magnitude * sign


def _numeric_grad(objective, x: np.ndarray, step: float) -> np.ndarray:
    """Central differences of a scalar objective w.r.t. x, in place."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + step
        hi = objective()
        flat[i] = keep - step
        lo = objective()
        flat[i] = keep
        gflat[i] = (hi - lo) / (2 * step)
    return grad


def _check_kernel(inputs: list[np.ndarray], run, step: float,
                  rng: np.random.Generator) -> float:
    """run(inputs) -> (output, backward); compare backward vs differences."""
    out, backward = run(inputs)
    projection = rng.standard_normal(out.shape)
    analytic = backward(projection)

    def objective() -> float:
        value, _ = run(inputs)
        return float((value * projection).sum())

    worst = 0.0
    for pos in range(len(inputs)):
        numeric = _numeric_grad(objective, inputs[pos], step)
        worst = max(worst, relative_error(analytic[pos], numeric))
    return worst


def grad_check(kernel_id: str, input_shapes=None, seed: int = 0,
               step: float = DEFAULT_STEP) -> float:
    """Max relative error of the named kernel's analytic gradients.

    Runs in 64-bit precision on seeded random inputs. Raises KeyError
    for an unknown kernel id.
    """
    if kernel_id not in DEFAULT_SHAPES:
        raise KeyError(f"unknown kernel id {kernel_id!r}, expected one of "
                       f"{sorted(DEFAULT_SHAPES)}")
    shapes = tuple(input_shapes) if input_shapes else DEFAULT_SHAPES[kernel_id]
    rng = np.random.default_rng(seed)

    if kernel_id == "conv2d":
        inputs = [rng.standard_normal(shapes[0]), rng.standard_normal(shapes[1]),
                  rng.standard_normal(shapes[2])]
        return _check_kernel(inputs, _plain(kernels.conv2d), step, rng)

    if kernel_id == "maxpool2":
        return _check_kernel([pool_safe_input(rng, shapes[0])],
                             _plain(kernels.maxpool2), step, rng)

    if kernel_id == "relu":
        return _check_kernel([kink_safe_input(rng, shapes[0])],
                             _plain(kernels.relu), step, rng)

    if kernel_id == "dense":
        inputs = [rng.standard_normal(shapes[0]), rng.standard_normal(shapes[1]),
                  rng.standard_normal(shapes[2])]
        return _check_kernel(inputs, _plain(kernels.dense), step, rng)

    if kernel_id == "batchnorm":
        inputs = [rng.standard_normal(shapes[0]), rng.uniform(0.5, 1.5, shapes[1]),
                  rng.standard_normal(shapes[2])]

        def run_bn(args):
            # fresh stats per call so finite differences never see the EMA
            stats = RunningStats.initial(shapes[1][0], np.float64)
            return kernels.batchnorm(args[0], args[1], args[2], stats,
                                     KernelContext(mode="train"))
        return _check_kernel(inputs, run_bn, step, rng)

    if kernel_id == "dropout":
        x = rng.standard_normal(shapes[0])
        mask_seed = int(rng.integers(2**31))

        def run_dropout(args):
            # re-seeding fixes the mask across the difference evaluations
            ctx = KernelContext(mode="train", rng=np.random.default_rng(mask_seed))
            return kernels.dropout(args[0], 0.5, ctx)
        return _check_kernel([x], run_dropout, step, rng)

    # softmax_cross_entropy: the loss already is a scalar objective
    logits = rng.standard_normal(shapes[0])
    labels = rng.integers(0, shapes[0][1], size=shapes[0][0])
    _, _, back = kernels.softmax_cross_entropy(logits, labels)
    analytic = back()

    def objective() -> float:
        loss, _, _ = kernels.softmax_cross_entropy(logits, labels)
        return loss

    numeric = _numeric_grad(objective, logits, step)
    return relative_error(analytic, numeric)


def _plain(kernel):
    def run(inputs):
        return kernel(*inputs, KernelContext())
    return run
