"""Deterministic synthetic crowd scenes with a top-to-bottom density gradient.

Head rows are drawn from a truncated exponential profile so the top of the
image is more crowded than the bottom; head radii shrink toward the top at
the matching rate, which mimics a camera looking down onto a plaza.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .annot import SceneAnnotation, pixel_key, save_annotation
from .errors import ConfigError, InfeasibleConfig, IoFailure
from .pgm import write_pgm

BACKGROUND = 0.5
RIM = 0.15
MIN_RADIUS = 0.6


@dataclass(frozen=True)
class SynthConfig:
    image_height: int = 64
    image_width: int = 64
    count_range: tuple[int, int] = (20, 120)
    perspective_strength: float = 2.0
    head_radius_range: tuple[float, float] = (2.0, 3.5)
    background_noise_sigma: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.image_height <= 0 or self.image_width <= 0:
            raise ConfigError("image size must be positive")
        lo, hi = self.count_range
        if lo < 0 or lo > hi:
            raise ConfigError(f"bad count_range {self.count_range}")
        rlo, rhi = self.head_radius_range
        if rlo <= 0 or rlo > rhi:
            raise ConfigError(f"bad head_radius_range {self.head_radius_range}")
        if self.perspective_strength < 0 or self.background_noise_sigma < 0:
            raise ConfigError("perspective_strength and noise sigma must be >= 0")

    def with_seed(self, seed: int) -> "SynthConfig":
        return SynthConfig(
            self.image_height,
            self.image_width,
            tuple(self.count_range),
            self.perspective_strength,
            tuple(self.head_radius_range),
            self.background_noise_sigma,
            seed,
        )


@dataclass(frozen=True)
class SynthScene:
    image: np.ndarray
    annotation: SceneAnnotation


def _sample_rows(rng, n, height, strength):
    # centers stay within [0, height - 1] so they round onto a pixel of the image
    span = height - 1
    u = rng.random(n)
    if strength == 0 or span == 0:
        return u * span
    a = 2.0 * strength / height
    # inverse CDF of p(y) ~ exp(-a y) on [0, span)
    return -np.log1p(u * np.expm1(-a * span)) / a


def head_radius(base: float, row: float, height: int, strength: float) -> float:
    return max(MIN_RADIUS, base * math.exp(-strength * (1.0 - row / height)))


def _place_heads(cfg: SynthConfig, rng, count: int):
    H, W = cfg.image_height, cfg.image_width
    taken = set()
    points = []
    attempts = 0
    cap = 100 * count
    while len(points) < count:
        batch = max(8, count - len(points))
        rows = _sample_rows(rng, batch, H, cfg.perspective_strength)
        cols = rng.random(batch) * (W - 1)
        for r, c in zip(rows.tolist(), cols.tolist()):
            attempts += 1
            if attempts > cap:
                raise InfeasibleConfig(
                    f"placed {len(points)} of {count} heads in {cap} attempts "
                    f"on a {H}x{W} image"
                )
            key = pixel_key(r, c)
            if key in taken:
                continue
            taken.add(key)
            points.append((r, c))
            if len(points) == count:
                break
    return points


def _render(cfg: SynthConfig, rng, points):
    H, W = cfg.image_height, cfg.image_width
    layer = np.full((H, W), -1.0)
    rlo, rhi = cfg.head_radius_range
    bases = rng.uniform(rlo, rhi, size=len(points))
    for (r, c), base in zip(points, bases.tolist()):
        rad = head_radius(base, r, H, cfg.perspective_strength) + 0.5
        r0, r1 = max(0, int(math.floor(r - rad))), min(H - 1, int(math.ceil(r + rad)))
        c0, c1 = max(0, int(math.floor(c - rad))), min(W - 1, int(math.ceil(c + rad)))
        ii, jj = np.mgrid[r0 : r1 + 1, c0 : c1 + 1]
        d = np.hypot(ii - r, jj - c)
        val = np.where(d <= rad, RIM + (1.0 - RIM) * np.clip(1.0 - d / rad, 0.0, 1.0), -1.0)
        patch = layer[r0 : r1 + 1, c0 : c1 + 1]
        np.maximum(patch, val, out=patch)
    img = np.where(layer >= 0, layer, BACKGROUND)
    if cfg.background_noise_sigma > 0:
        img = img + rng.normal(0.0, cfg.background_noise_sigma, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def generate_scene(cfg: SynthConfig) -> SynthScene:
    rng = np.random.default_rng(cfg.seed)
    lo, hi = cfg.count_range
    count = int(rng.integers(lo, hi + 1))
    points = _place_heads(cfg, rng, count)
    image = _render(cfg, rng, points)
    ann = SceneAnnotation(cfg.image_height, cfg.image_width, tuple(points), f"synth{cfg.seed}")
    return SynthScene(image, ann)


@dataclass(frozen=True)
class ManifestEntry:
    image_path: Path
    annotation_path: Path
    count: int


def write_manifest(entries, path) -> None:
    path = Path(path)
    base = path.parent
    lines = []
    for e in entries:
        img = Path(e.image_path)
        ann = Path(e.annotation_path)
        img = img.relative_to(base) if img.is_absolute() and img.is_relative_to(base) else img
        ann = ann.relative_to(base) if ann.is_absolute() and ann.is_relative_to(base) else ann
        lines.append(f"{img.as_posix()} {ann.as_posix()} {e.count}")
    try:
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def read_manifest(path) -> list[ManifestEntry]:
    """Entries with paths resolved relative to the manifest's directory."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot read manifest {path}: {exc}") from exc
    entries = []
    for lineno, ln in enumerate(text.splitlines(), start=1):
        if not ln.strip():
            continue
        parts = ln.split()
        if len(parts) != 3:
            raise IoFailure(f"{path}:{lineno}: expected 'image annotation count'")
        entries.append(
            ManifestEntry(path.parent / parts[0], path.parent / parts[1], int(parts[2]))
        )
    return entries


def generate_dataset(cfg: SynthConfig, n_scenes: int, out_dir) -> list[ManifestEntry]:
    """Render scenes with seeds cfg.seed + i and write them plus manifest.txt."""
    if n_scenes < 1:
        raise ConfigError("n_scenes must be >= 1")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    entries = []
    for i in range(n_scenes):
        scene = generate_scene(cfg.with_seed(cfg.seed + i))
        img_path = out / f"scene_{i:05d}.pgm"
        ann_path = out / f"scene_{i:05d}.txt"
        write_pgm(img_path, scene.image)
        save_annotation(scene.annotation, ann_path)
        entries.append(ManifestEntry(img_path, ann_path, scene.annotation.count()))
    write_manifest(entries, out / "manifest.txt")
    return entries
