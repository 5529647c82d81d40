"""Synthetic radiograph-like phantoms with a controllable class difference.

Each phantom is a smoothed Gaussian noise field pushed through a soft
threshold, giving a binary-ish "trabecular" texture whose bone fraction is
set by the threshold and whose grain size is set by the smoothing width.
Osteoporosis phantoms use a higher threshold (sparser bone) and coarser
grain, both shifted from the normal-class values by ``delta`` times the
full contrast. With ``delta = 0`` the two classes are drawn from the same
distribution.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.ndimage import gaussian_filter

from ..network import NORMAL, OSTEOPOROSIS
from ..tensor_core import make_rng
from .annotations import LandmarkAnnotation

# (x, y) as fractions of (width, height), in landmark-slot order
CANONICAL_LANDMARKS = (
    (0.12, 0.22), (0.88, 0.22),
    (0.16, 0.72), (0.84, 0.72),
    (0.34, 0.78), (0.66, 0.78),
    (0.30, 0.40), (0.70, 0.40),
)


@dataclass(frozen=True)
class PhantomSpec:
    seed: int = 0
    height: int = 160
    width: int = 320
    delta: float = 1.0
    normal_threshold: float = -0.3  # soft-threshold level on the unit-variance noise field
    osteo_threshold: float = 0.6
    normal_grain: float = 1.2  # Gaussian smoothing sigma in pixels
    osteo_grain: float = 2.0
    edge_softness: float = 0.15
    subject_spread: float = 0.1  # per-subject std of the threshold
    pixel_noise: float = 0.03
    landmark_jitter: float = 3.0

    def __post_init__(self):
        if not 0.0 <= self.delta <= 1.0:
            raise ValueError(f"delta must lie in [0, 1], got {self.delta}")
        if self.height < 8 or self.width < 8:
            raise ValueError("phantom images must be at least 8x8")

    def class_params(self, label: int) -> tuple[float, float]:
        """(threshold, grain) for a class."""
        if label == NORMAL:
            return self.normal_threshold, self.normal_grain
        t = self.normal_threshold + self.delta * (self.osteo_threshold - self.normal_threshold)
        g = self.normal_grain + self.delta * (self.osteo_grain - self.normal_grain)
        return t, g

    def with_delta(self, delta: float) -> "PhantomSpec":
        return replace(self, delta=delta)


def render_texture(spec: PhantomSpec, label: int, rng: np.random.Generator) -> np.ndarray:
    threshold, grain = spec.class_params(label)
    threshold += rng.normal(scale=spec.subject_spread)
    field = gaussian_filter(rng.normal(size=(spec.height, spec.width)), grain, mode="wrap")
    field = (field - field.mean()) / field.std()
    img = 1.0 / (1.0 + np.exp(-(field - threshold) / spec.edge_softness))
    img += rng.normal(scale=spec.pixel_noise, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def place_landmarks(spec: PhantomSpec, rng: np.random.Generator) -> tuple[tuple[float, float], ...]:
    pts = []
    for fx, fy in CANONICAL_LANDMARKS:
        dx, dy = rng.uniform(-spec.landmark_jitter, spec.landmark_jitter, size=2)
        x = min(max(fx * (spec.width - 1) + dx, 0.0), spec.width - 1.0)
        y = min(max(fy * (spec.height - 1) + dy, 0.0), spec.height - 1.0)
        pts.append((round(x, 2), round(y, 2)))
    return tuple(pts)


def generate_phantoms(spec: PhantomSpec, n_per_class: int) -> list[tuple[np.ndarray, LandmarkAnnotation]]:
    """Return ``2 * n_per_class`` (image, annotation) pairs, classes interleaved.

    Subject ``k`` draws from its own stream ``make_rng(seed, k)``, so the
    output is a pure function of ``(spec, n_per_class)``.
    """
    if n_per_class < 1:
        raise ValueError(f"n_per_class must be >= 1, got {n_per_class}")
    out = []
    for k in range(2 * n_per_class):
        label = OSTEOPOROSIS if k % 2 == 0 else NORMAL
        rng = make_rng(spec.seed, k)
        image = render_texture(spec, label, rng)
        image_id = f"phantom{k:04d}"
        ann = LandmarkAnnotation(image_id, f"images/{image_id}.pgm", label, place_landmarks(spec, rng))
        out.append((image, ann))
    return out
