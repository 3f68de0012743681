"""Global floating-point precision switch.

All array-creation sites in the package (parameter init, dataset loading,
synthetic rendering) honor the active precision. Kernels follow the dtype
of their inputs, so tests can run 64-bit math while experiment presets
select 32-bit for speed.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

_PRECISIONS = {"f32": np.float32, "f64": np.float64}
_active = "f64"


def set_precision(name: str) -> None:
    if name not in _PRECISIONS:
        raise ValueError(f"unknown precision {name!r}, expected one of {sorted(_PRECISIONS)}")
    global _active
    _active = name


def precision_name() -> str:
    return _active


def get_dtype() -> np.dtype:
    return np.dtype(_PRECISIONS[_active])


@contextmanager
def precision(name: str):
    """Temporarily switch precision (used heavily by the test suite)."""
    previous = _active
    set_precision(name)
    try:
        yield
    finally:
        set_precision(previous)
