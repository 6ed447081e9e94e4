"""Dot annotations: the per-image set of head centers.

File format (UTF-8, whitespace separated, newline terminated)::

    scene_id height width
    row col
    row col
    ...
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DuplicatePoint, IoFailure, MalformedFile, OutOfBounds


def pixel_key(row: float, col: float) -> tuple[int, int]:
    """Integer pixel a point falls on (round half up)."""
    return math.floor(row + 0.5), math.floor(col + 0.5)


@dataclass(frozen=True)
class SceneAnnotation:
    image_height: int
    image_width: int
    points: tuple[tuple[float, float], ...] = field(default_factory=tuple)
    scene_id: str = "scene"

    def __post_init__(self):
        object.__setattr__(
            self, "points", tuple((float(r), float(c)) for r, c in self.points)
        )
        validate(self)

    def count(self) -> int:
        return len(self.points)

    def as_array(self) -> np.ndarray:
        """Points as a float64 array of shape (n, 2)."""
        if not self.points:
            return np.zeros((0, 2), dtype=np.float64)
        return np.asarray(self.points, dtype=np.float64)


def validate(a: SceneAnnotation) -> None:
    if a.image_height <= 0 or a.image_width <= 0:
        raise MalformedFile(f"non-positive image size {a.image_height}x{a.image_width}")
    if not a.scene_id or any(ch.isspace() for ch in a.scene_id):
        raise MalformedFile(f"scene_id must be a non-empty token, got {a.scene_id!r}")
    seen = {}
    for idx, (r, c) in enumerate(a.points):
        if not (math.isfinite(r) and math.isfinite(c)):
            raise MalformedFile(f"point {idx} is not finite: ({r}, {c})")
        if not (0 <= r < a.image_height and 0 <= c < a.image_width):
            raise OutOfBounds(
                f"point {idx} ({r}, {c}) outside {a.image_height}x{a.image_width} image"
            )
        key = pixel_key(r, c)
        if key in seen:
            raise DuplicatePoint(
                f"points {seen[key]} and {idx} both round to pixel {key}"
            )
        seen[key] = idx


def parse_annotation(text: str) -> SceneAnnotation:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise MalformedFile("empty annotation file")
    header = lines[0].split()
    if len(header) != 3:
        raise MalformedFile(f"bad header line: {lines[0]!r}")
    scene_id = header[0]
    try:
        h, w = int(header[1]), int(header[2])
    except ValueError as exc:
        raise MalformedFile(f"bad image size in header: {lines[0]!r}") from exc
    points = []
    for lineno, ln in enumerate(lines[1:], start=2):
        parts = ln.split()
        if len(parts) != 2:
            raise MalformedFile(f"line {lineno}: expected 'row col', got {ln!r}")
        try:
            points.append((float(parts[0]), float(parts[1])))
        except ValueError as exc:
            raise MalformedFile(f"line {lineno}: non-numeric coordinate {ln!r}") from exc
    return SceneAnnotation(h, w, tuple(points), scene_id)


def format_annotation(a: SceneAnnotation) -> str:
    # repr() of a float round-trips exactly
    out = [f"{a.scene_id} {a.image_height} {a.image_width}"]
    out.extend(f"{r!r} {c!r}" for r, c in a.points)
    return "\n".join(out) + "\n"


def load_annotation(path) -> SceneAnnotation:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except FileNotFoundError as exc:
        raise IoFailure(f"annotation file not found: {path}") from exc
    except UnicodeDecodeError as exc:
        raise MalformedFile(f"{path} is not UTF-8") from exc
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    return parse_annotation(text)


def save_annotation(a: SceneAnnotation, path) -> None:
    try:
        Path(path).write_text(format_annotation(a), encoding="utf-8")
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
