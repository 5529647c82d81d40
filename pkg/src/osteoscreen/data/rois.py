"""Patch extraction, bilinear resampling and training-time augmentation."""

from __future__ import annotations

import math

import numpy as np

from ..errors import InputError
from .annotations import LandmarkAnnotation


def crop_window(image: np.ndarray, x: float, y: float, side: int) -> np.ndarray:
    """``side``x``side`` window centred on ``(x, y)``; pixels past the border replicate the edge.

    The window's top-left corner is ``(floor(y + 0.5) - side // 2, floor(x + 0.5) - side // 2)``.
    """
    h, w = image.shape
    if not (0 <= x <= w - 1 and 0 <= y <= h - 1):
        raise InputError(f"landmark ({x}, {y}) lies outside the {w}x{h} image")
    top = math.floor(y + 0.5) - side // 2
    left = math.floor(x + 0.5) - side // 2
    rows = np.clip(np.arange(top, top + side), 0, h - 1)
    cols = np.clip(np.arange(left, left + side), 0, w - 1)
    return image[np.ix_(rows, cols)]


def extract_rois(image: np.ndarray, annotation: LandmarkAnnotation, crop_side: int = 100) -> list[np.ndarray]:
    image = np.asarray(image)
    if image.ndim != 2 or image.size == 0:
        raise InputError(f"expected a non-empty 2-D image, got shape {image.shape}")
    if crop_side < 1:
        raise InputError(f"crop side must be positive, got {crop_side}")
    try:
        return [crop_window(image, x, y, crop_side) for x, y in annotation.landmarks]
    except InputError as exc:
        raise InputError(f"{annotation.image_id}: {exc}") from None


def _interp_matrix(coords: np.ndarray, n: int) -> np.ndarray:
    """Rows of linear-interpolation weights sampling a length-``n`` signal at ``coords`` (clamped)."""
    coords = np.clip(coords, 0, n - 1)
    lo = np.floor(coords).astype(np.int64)
    hi = np.minimum(lo + 1, n - 1)
    frac = coords - lo
    m = np.zeros((len(coords), n))
    rows = np.arange(len(coords))
    np.add.at(m, (rows, lo), 1 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def _sample(patch: np.ndarray, row_coords: np.ndarray, col_coords: np.ndarray) -> np.ndarray:
    ry = _interp_matrix(row_coords, patch.shape[0])
    rx = _interp_matrix(col_coords, patch.shape[1])
    out = ry @ patch @ rx.T
    # convex weights: clamp away round-off outside the input range
    return np.clip(out, patch.min(), patch.max())


def resize_patch(patch: np.ndarray, out_side: int = 224) -> np.ndarray:
    """Bilinear resize with a corner-aligned grid.

    Output pixel ``i`` samples input coordinate ``i * (n_in - 1) / (n_out - 1)``,
    so the first and last pixels of input and output coincide. A 1-pixel
    output samples the input centre.
    """
    patch = np.asarray(patch, dtype=np.float64)
    if patch.ndim != 2 or patch.shape[0] != patch.shape[1]:
        raise InputError(f"resize_patch needs a square patch, got {patch.shape}")
    if out_side < 1:
        raise InputError(f"output side must be >= 1, got {out_side}")
    n = patch.shape[0]
    if out_side == n:
        return patch.copy()
    if out_side == 1:
        coords = np.array([(n - 1) / 2])
    else:
        coords = np.arange(out_side) * ((n - 1) / (out_side - 1))
    return _sample(patch, coords, coords)


def stretch(patch: np.ndarray, sx: float, sy: float) -> np.ndarray:
    """Scale content by ``sx`` horizontally and ``sy`` vertically about the patch centre.

    Output pixel ``(i, j)`` samples the input at ``(c + (i - c) / sy, c + (j - c) / sx)``
    with ``c = (side - 1) / 2``; samples past the border replicate the edge.
    """
    n = patch.shape[0]
    c = (n - 1) / 2
    idx = np.arange(n, dtype=np.float64)
    return _sample(np.asarray(patch, dtype=np.float64), c + (idx - c) / sy, c + (idx - c) / sx)


def hflip(patch: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(patch[:, ::-1])


STRETCH_RANGE = (0.9, 1.1)


def augment(patch: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random per-axis stretch in ``STRETCH_RANGE``, then a horizontal flip with probability 0.5.

    Draws, in order: ``sx``, ``sy`` (uniform) and one uniform for the flip.
    """
    patch = np.asarray(patch)
    if patch.ndim != 2 or patch.shape[0] != patch.shape[1]:
        raise InputError(f"augment needs a square patch, got {patch.shape}")
    sx, sy = rng.uniform(*STRETCH_RANGE, size=2)
    flip = rng.random() < 0.5
    out = stretch(patch, sx, sy)
    return hflip(out) if flip else out
