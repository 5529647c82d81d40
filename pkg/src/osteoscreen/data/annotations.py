"""Landmark annotation records and their text format.

One record per line, whitespace separated::

    <image_id> <relative image path> <OSTEOPOROSIS|NORMAL> x1,y1 x2,y2 ... x8,y8

Lines starting with ``#`` and blank lines are ignored. Coordinates are
pixels, ``x`` the column and ``y`` the row. Landmarks come in bilateral
pairs, left side first within each pair:

    1, 2  mandibular condyle
    3, 4  angle of the mandible
    5, 6  mandibular premolar region
    7, 8  maxillary tuberosity

so that patch slots (1,2), (3,4), (5,6), (7,8) form the four fusion groups.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

from ..errors import ParseError
from ..network import LABEL_NAMES, N_PATCHES

LANDMARK_SITES = (
    "left condyle", "right condyle",
    "left mandible angle", "right mandible angle",
    "left premolar", "right premolar",
    "left maxillary tuberosity", "right maxillary tuberosity",
)
LABEL_CODES = {name: code for code, name in LABEL_NAMES.items()}


@dataclass(frozen=True)
class LandmarkAnnotation:
    image_id: str
    image_path: str
    label: int
    landmarks: tuple[tuple[float, float], ...]

    @property
    def label_name(self) -> str:
        return LABEL_NAMES[self.label]

    def to_line(self) -> str:
        pts = " ".join(f"{x:.2f},{y:.2f}" for x, y in self.landmarks)
        return f"{self.image_id} {self.image_path} {self.label_name} {pts}"


def parse_record(line: str, where: str = "") -> LandmarkAnnotation:
    fields = line.split()
    image_id = fields[0] if fields else "?"
    prefix = f"{where}record {image_id!r}"
    if len(fields) < 3:
        raise ParseError(f"{prefix}: expected image_id, path, label and {N_PATCHES} landmarks")
    _, path, label = fields[:3]
    if label.upper() not in LABEL_CODES:
        raise ParseError(f"{prefix}: unknown label {label!r}")
    points = fields[3:]
    if len(points) != N_PATCHES:
        raise ParseError(f"{prefix}: {len(points)} landmarks, expected {N_PATCHES}")
    landmarks = []
    for p in points:
        try:
            x, y = (float(v) for v in p.split(","))
        except ValueError as exc:
            raise ParseError(f"{prefix}: bad landmark {p!r}") from exc
        if not (math.isfinite(x) and math.isfinite(y)) or x < 0 or y < 0:
            raise ParseError(f"{prefix}: landmark {p!r} must be finite and non-negative")
        landmarks.append((x, y))
    return LandmarkAnnotation(image_id, path, LABEL_CODES[label.upper()], tuple(landmarks))


def parse_annotations(text: str, source: str = "<text>") -> list[LandmarkAnnotation]:
    records, seen = [], set()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        rec = parse_record(line, f"{source}:{lineno}: ")
        if rec.image_id in seen:
            raise ParseError(f"{source}:{lineno}: duplicate image_id {rec.image_id!r}")
        seen.add(rec.image_id)
        records.append(rec)
    return records


def load_annotations(path) -> list[LandmarkAnnotation]:
    path = Path(path)
    return parse_annotations(path.read_text(encoding="utf-8"), str(path))


def dump_annotations(records) -> str:
    header = "# image_id path label " + " ".join(f"x{i},y{i}" for i in range(1, N_PATCHES + 1))
    return "\n".join([header] + [r.to_line() for r in records]) + "\n"
