"""Procedural glyph datasets with constructed feature containment.

Each class is a fixed composition of stroke primitives (line segments
and circles) rendered anti-aliased on a 28x28 grayscale canvas. Four
families share the same glyph geometry:

    strokes                  canonical orientation, small jitter only
    strokes_rotated          plus a seeded rotation in [0, 360) per sample
    strokes_noisybg          plus a smooth seeded background
    strokes_rotated_noisybg  rotation and background combined

Rotation and background only ever add visual structure, so the feature
sets nest: strokes fit inside strokes_rotated, which fit inside
strokes_rotated_noisybg. The plain family is easy for a linear pixel
classifier; the rotated families are not, while staying learnable for a
small CNN (classes differ by stroke count, junction angles, and
closure, which survive rotation).
"""

from __future__ import annotations

import math

import numpy as np

from .datasets import DatasetBundle
from .optimizer import derive_seed
from .precision import get_dtype

SIDE = 28
FAMILIES = ("strokes", "strokes_rotated", "strokes_noisybg",
            "strokes_rotated_noisybg")

GLYPH_NAMES = ("bar", "double_bar", "cross", "star", "tee",
               "ell", "vee", "triangle", "square", "ring")

_TRI = [(math.cos(a), math.sin(a)) for a in (math.pi / 2, math.pi * 7 / 6, math.pi * 11 / 6)]
_STAR = [(math.cos(a), math.sin(a)) for a in (0.0, math.pi / 3, 2 * math.pi / 3)]

# unit-frame primitives per class: ("seg", x0, y0, x1, y1) or ("circle", cx, cy, r)
_GLYPHS = {
    "bar": [("seg", -1, 0, 1, 0)],
    "double_bar": [("seg", -1, -0.45, 1, -0.45), ("seg", -1, 0.45, 1, 0.45)],
    "cross": [("seg", -1, 0, 1, 0), ("seg", 0, -1, 0, 1)],
    "star": [("seg", -c, -s, c, s) for c, s in _STAR],
    "tee": [("seg", -1, -0.9, 1, -0.9), ("seg", 0, -0.9, 0, 1)],
    "ell": [("seg", -0.6, -1, -0.6, 0.7), ("seg", -0.6, 0.7, 0.9, 0.7)],
    "vee": [("seg", 0, 0.9, -0.7, -0.9), ("seg", 0, 0.9, 0.7, -0.9)],
    "triangle": [("seg", *_TRI[0], *_TRI[1]), ("seg", *_TRI[1], *_TRI[2]),
                 ("seg", *_TRI[2], *_TRI[0])],
    "square": [("seg", -0.8, -0.8, 0.8, -0.8), ("seg", 0.8, -0.8, 0.8, 0.8),
               ("seg", 0.8, 0.8, -0.8, 0.8), ("seg", -0.8, 0.8, -0.8, -0.8)],
    "ring": [("circle", 0, 0, 0.85)],
}

_GRID_X, _GRID_Y = np.meshgrid(np.arange(SIDE) + 0.5, np.arange(SIDE) + 0.5)


def _segment_distance(x0, y0, x1, y1) -> np.ndarray:
    dx, dy = x1 - x0, y1 - y0
    length_sq = dx * dx + dy * dy
    if length_sq == 0:
        return np.hypot(_GRID_X - x0, _GRID_Y - y0)
    t = ((_GRID_X - x0) * dx + (_GRID_Y - y0) * dy) / length_sq
    t = np.clip(t, 0.0, 1.0)
    return np.hypot(_GRID_X - (x0 + t * dx), _GRID_Y - (y0 + t * dy))


def render_glyph(name: str, center, scale: float, angle: float,
                 thickness: float) -> np.ndarray:
    """Anti-aliased [0,1] raster of one glyph instance."""
    cos_a, sin_a = math.cos(angle), math.sin(angle)

    def place(x, y):
        xs, ys = x * scale, y * scale
        return (center[0] + cos_a * xs - sin_a * ys,
                center[1] + sin_a * xs + cos_a * ys)

    img = np.zeros((SIDE, SIDE))
    half, aa = thickness / 2.0, 0.9
    for prim in _GLYPHS[name]:
        if prim[0] == "seg":
            d = _segment_distance(*place(prim[1], prim[2]), *place(prim[3], prim[4]))
        else:
            cx, cy = place(prim[1], prim[2])
            d = np.abs(np.hypot(_GRID_X - cx, _GRID_Y - cy) - prim[3] * scale)
        img = np.maximum(img, np.clip(1.0 - (d - half) / aa, 0.0, 1.0))
    return img


def _smooth_background(rng: np.random.Generator, amplitude: float = 0.6,
                       cells: int = 8) -> np.ndarray:
    """Bilinear upsampling of a coarse random grid: smooth blobs, no edges.

    Amplitude and cell count are pitched so one-shot template matching
    degrades while strokes stay clearly brighter than the background.
    """
    coarse = rng.uniform(0.0, amplitude, (cells + 1, cells + 1))
    pos = np.linspace(0.0, cells, SIDE)
    i0 = np.minimum(pos.astype(int), cells - 1)
    frac = pos - i0
    rows = (coarse[i0] * (1 - frac)[:, None] + coarse[i0 + 1] * frac[:, None])
    return (rows[:, i0] * (1 - frac)[None, :] + rows[:, i0 + 1] * frac[None, :])


def _render_sample(family: str, class_id: int,
                   rng: np.random.Generator) -> np.ndarray:
    center = (SIDE / 2 + rng.uniform(-2.5, 2.5), SIDE / 2 + rng.uniform(-2.5, 2.5))
    scale = 8.5 * rng.uniform(0.7, 1.15)
    thickness = rng.uniform(1.2, 2.0)
    angle = rng.uniform(0.0, 2 * math.pi) if "rotated" in family else 0.0
    img = render_glyph(GLYPH_NAMES[class_id], center, scale, angle, thickness)
    if "noisybg" in family:
        img = np.maximum(img, _smooth_background(rng))
    return img


def make_synthetic(family: str, sizes, seed: int) -> DatasetBundle:
    """Deterministic glyph bundle; identical arguments give identical data.

    sizes is {"train": n, "valid": n, "test": n} or a 3-tuple.
    """
    if family not in FAMILIES:
        raise ValueError(f"unknown family {family!r}, expected one of {FAMILIES}")
    if not isinstance(sizes, dict):
        sizes = dict(zip(("train", "valid", "test"), sizes))
    dtype = get_dtype()

    splits = {}
    for split_name in ("train", "valid", "test"):
        count = int(sizes[split_name])
        if count <= 0:
            raise ValueError(f"{split_name} size must be positive, got {count}")
        labels = np.arange(count) % len(GLYPH_NAMES)
        order = np.random.default_rng(
            derive_seed(seed, family, split_name, "order")).permutation(count)
        labels = labels[order].astype(np.int64)
        images = np.empty((count, 1, SIDE, SIDE), dtype=dtype)
        for i in range(count):
            rng = np.random.default_rng(derive_seed(seed, family, split_name, i))
            images[i, 0] = _render_sample(family, int(labels[i]), rng)
        splits[split_name] = (images, labels)

    return DatasetBundle(
        family, splits, GLYPH_NAMES,
        provenance=(f"synthetic:{family}:seed={seed}",
                    f"sizes:{sizes['train']}/{sizes['valid']}/{sizes['test']}"))
