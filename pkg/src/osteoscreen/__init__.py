"""Attention-weighted multi-patch CNN for osteoporosis prescreening on panoramic radiographs."""

__version__ = "0.1.0"
