"""Annotation ingestion, patch extraction, augmentation and synthetic phantoms."""

from .annotations import LANDMARK_SITES, LandmarkAnnotation, load_annotations, parse_annotations
from .dataset import Sample, build_sample, load_dataset, samples_from_images, write_dataset
from .phantoms import PhantomSpec, generate_phantoms
from .pgm import read_pgm, write_pgm
from .rois import augment, extract_rois, hflip, resize_patch, stretch

__all__ = [
    "LANDMARK_SITES", "LandmarkAnnotation", "PhantomSpec", "Sample", "augment", "build_sample",
    "extract_rois", "generate_phantoms", "hflip", "load_annotations", "load_dataset",
    "parse_annotations", "read_pgm", "resize_patch", "samples_from_images", "stretch", "write_dataset",
    "write_pgm",
]
