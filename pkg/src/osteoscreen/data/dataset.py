"""Samples (eight preprocessed patches plus label) and dataset I/O."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from ..errors import InputError
from .annotations import LandmarkAnnotation, dump_annotations, load_annotations
from .pgm import read_pgm, write_pgm
from .rois import extract_rois, resize_patch

ANNOTATION_FILE = "annotations.txt"


@dataclass
class Sample:
    annotation: LandmarkAnnotation
    patches: np.ndarray  # [8, side, side], values in [0, 1]

    @property
    def label(self) -> int:
        return self.annotation.label

    @property
    def image_id(self) -> str:
        return self.annotation.image_id


def build_sample(image: np.ndarray, annotation: LandmarkAnnotation, crop_side: int = 100, side: int = 224) -> Sample:
    crops = extract_rois(image, annotation, crop_side)
    patches = np.stack([resize_patch(c, side) for c in crops]).astype(np.float32)
    if not np.all(np.isfinite(patches)) or patches.min() < 0 or patches.max() > 1:
        raise InputError(f"{annotation.image_id}: patch values must be finite and within [0, 1]")
    return Sample(annotation, patches)


def samples_from_images(items: Iterable[tuple[np.ndarray, LandmarkAnnotation]], crop_side: int = 100, side: int = 224) -> list[Sample]:
    return [build_sample(img, ann, crop_side, side) for img, ann in items]


def load_dataset(annotation_path, crop_side: int = 100, side: int = 224) -> list[Sample]:
    """Read an annotation file and the PGM images it references (paths relative to the file)."""
    annotation_path = Path(annotation_path)
    if annotation_path.is_dir():
        annotation_path = annotation_path / ANNOTATION_FILE
    root = annotation_path.parent
    samples = []
    for ann in load_annotations(annotation_path):
        img_path = root / ann.image_path
        if not img_path.is_file():
            raise FileNotFoundError(f"{ann.image_id}: image {img_path} not found")
        samples.append(build_sample(read_pgm(img_path), ann, crop_side, side))
    return samples


def write_dataset(out_dir, items: Iterable[tuple[np.ndarray, LandmarkAnnotation]], maxval: int = 65535) -> Path:
    """Write PGM images and ``annotations.txt``; returns the annotation file path."""
    out_dir = Path(out_dir)
    records = []
    for image, ann in items:
        path = out_dir / ann.image_path
        path.parent.mkdir(parents=True, exist_ok=True)
        write_pgm(path, image, maxval)
        records.append(ann)
    out_dir.mkdir(parents=True, exist_ok=True)
    ann_path = out_dir / ANNOTATION_FILE
    ann_path.write_text(dump_annotations(records), encoding="utf-8")
    return ann_path
