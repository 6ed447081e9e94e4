"""Plain and structured (multi-level) density maps from dot annotations.

All distances and Gaussian widths are given in full-resolution image
pixels. A width is converted to map pixels by multiplying with the map
scale ``s`` just before the kernel is built, so thresholds and widths keep
their image-space meaning regardless of the network's downscaling.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .annot import SceneAnnotation
from .errors import BadScale, IoFailure, MalformedFile, NonPositiveSigma, VersionMismatch

DMAP_MAGIC = b"DMAP"
DMAP_VERSION = 1


@dataclass
class DensityMap:
    values: np.ndarray
    scale: float = 1.0

    def count(self) -> float:
        return float(self.values.sum())


@dataclass
class StructuredDensityMap:
    """A (D, sH, sW) stack; level 0 is the densest (smallest threshold)."""

    values: np.ndarray
    thresholds: tuple[float, ...]
    sigmas: tuple[float, ...]
    scale: float = 1.0

    @property
    def D(self) -> int:
        return self.values.shape[0]

    @property
    def levels(self) -> list[DensityMap]:
        return [DensityMap(v, self.scale) for v in self.values]

    def level_counts(self) -> np.ndarray:
        return self.values.sum(axis=(1, 2))

    def count(self) -> float:
        return float(self.values.sum())


@dataclass(frozen=True)
class SoftLabel:
    weights: np.ndarray
    star_level: int  # 1-based


@dataclass
class StructuredMapConfig:
    D: int = 4
    thresholds: tuple[float, ...] | None = None
    sigma_v: float | None = None
    sigmas: tuple[float, ...] | None = None
    sigma_g: float = 4.0
    scale: float = 0.25
    k_neighbors: int = 5

    def __post_init__(self):
        if self.D < 1:
            raise ValueError("D must be >= 1")
        if self.thresholds is None:
            self.thresholds = tuple(3.0 ** (d + 1) for d in range(self.D))
        self.thresholds = tuple(float(t) for t in self.thresholds)
        if len(self.thresholds) != self.D:
            raise ValueError(f"need {self.D} thresholds, got {len(self.thresholds)}")
        if any(b <= a for a, b in zip(self.thresholds, self.thresholds[1:])):
            raise ValueError(f"thresholds must be strictly increasing: {self.thresholds}")
        if self.sigma_v is None:
            self.sigma_v = 2.0 * self.D - 1.0
        if self.sigmas is None:
            self.sigmas = tuple(0.2 * t for t in self.thresholds)
        self.sigmas = tuple(float(s) for s in self.sigmas)
        if len(self.sigmas) != self.D:
            raise ValueError(f"need {self.D} sigmas, got {len(self.sigmas)}")
        if any(not (s > 0 and math.isfinite(s)) for s in self.sigmas):
            raise NonPositiveSigma(f"level sigmas must be positive and finite: {self.sigmas}")
        if self.sigma_v <= 0 or self.sigma_g <= 0:
            raise NonPositiveSigma("sigma_v and sigma_g must be positive")
        if not 0 < self.scale <= 1:
            raise BadScale(f"scale must lie in (0, 1], got {self.scale}")
        if self.k_neighbors < 1:
            raise ValueError("k_neighbors must be >= 1")


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Isotropic Gaussian on a (2*ceil(3 sigma)+1)^2 grid, normalized to sum 1."""
    if not sigma > 0:
        raise NonPositiveSigma(f"sigma must be positive, got {sigma}")
    radius = int(math.ceil(3.0 * sigma))
    ax = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2.0 * sigma * sigma))
    return k / k.sum()


def map_shape(height: int, width: int, s: float) -> tuple[int, int]:
    sh, sw = s * height, s * width
    if abs(sh - round(sh)) > 1e-9 or abs(sw - round(sw)) > 1e-9:
        raise BadScale(f"scale {s} does not divide image size {height}x{width}")
    return int(round(sh)), int(round(sw))


def scaled_pixels(points: np.ndarray, s: float, shape) -> np.ndarray:
    """floor(s * coordinate) per point, as int (n, 2)."""
    if len(points) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    idx = np.floor(points * s).astype(np.int64)
    idx[:, 0] = np.clip(idx[:, 0], 0, shape[0] - 1)
    idx[:, 1] = np.clip(idx[:, 1], 0, shape[1] - 1)
    return idx


def _stamp(grid: np.ndarray, kernel: np.ndarray, i: int, j: int, weight: float) -> None:
    """Add ``weight`` units of mass centered at (i, j), renormalizing the clipped part."""
    R = kernel.shape[0] // 2
    h, w = grid.shape
    r0, r1 = max(0, i - R), min(h, i + R + 1)
    c0, c1 = max(0, j - R), min(w, j + R + 1)
    part = kernel[r0 - i + R : r1 - i + R, c0 - j + R : c1 - j + R]
    if part.shape != kernel.shape:
        part = part / part.sum()
    grid[r0:r1, c0:c1] += weight * part


def plain_density_map(a: SceneAnnotation, sigma_g: float, s: float) -> DensityMap:
    shape = map_shape(a.image_height, a.image_width, s)
    kernel = gaussian_kernel(sigma_g * s)
    grid = np.zeros(shape, dtype=np.float64)
    for i, j in scaled_pixels(a.as_array(), s, shape).tolist():
        _stamp(grid, kernel, i, j, 1.0)
    return DensityMap(grid, s)


def avg_topk_distance(points, k: int = 5) -> np.ndarray:
    """Mean distance from each point to its min(k, n-1) nearest other points.

    A lone point gets +inf, which lands it on the sparsest level.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    n = len(pts)
    if k < 1:
        raise ValueError("k must be >= 1")
    if n == 0:
        return np.zeros(0)
    if n == 1:
        return np.array([np.inf])
    kk = min(k, n - 1)
    dist, _ = cKDTree(pts).query(pts, k=kk + 1)
    # column 0 is the point itself (all points are distinct)
    return dist[:, 1:].mean(axis=1)


def assign_level(dist, thresholds) -> np.ndarray | int:
    """1-based index of the smallest threshold >= dist, clamped to D."""
    th = np.asarray(thresholds, dtype=np.float64)
    lv = np.searchsorted(th, np.asarray(dist, dtype=np.float64), side="left") + 1
    lv = np.minimum(lv, len(th))
    return int(lv) if np.ndim(lv) == 0 else lv


def soft_map(d_star: int, D: int, sigma_v: float) -> SoftLabel:
    if not 1 <= d_star <= D:
        raise ValueError(f"d_star={d_star} outside [1, {D}]")
    d = np.arange(1, D + 1, dtype=np.float64)
    # denominator is 2*sigma_v (not 2*sigma_v**2)
    w = np.exp(-((d - d_star) ** 2) / (2.0 * sigma_v))
    return SoftLabel(w / w.sum(), int(d_star))


@dataclass
class LevelAssignment:
    points: np.ndarray
    distances: np.ndarray
    levels: np.ndarray


def level_assignments(a: SceneAnnotation, cfg: StructuredMapConfig) -> LevelAssignment:
    pts = a.as_array()
    dist = avg_topk_distance(pts, cfg.k_neighbors)
    levels = np.asarray(assign_level(dist, cfg.thresholds), dtype=np.int64).reshape(-1)
    return LevelAssignment(pts, dist, levels)


def structured_density_map(a: SceneAnnotation, cfg: StructuredMapConfig) -> StructuredDensityMap:
    shape = map_shape(a.image_height, a.image_width, cfg.scale)
    D = cfg.D
    grid = np.zeros((D,) + shape, dtype=np.float64)
    assign = level_assignments(a, cfg)
    kernels = [gaussian_kernel(sig * cfg.scale) for sig in cfg.sigmas]
    labels = {d: soft_map(d, D, cfg.sigma_v).weights for d in range(1, D + 1)}
    pix = scaled_pixels(assign.points, cfg.scale, shape)
    for (i, j), lv in zip(pix.tolist(), assign.levels.tolist()):
        w = labels[lv]
        for d in range(D):
            _stamp(grid[d], kernels[d], i, j, float(w[d]))
    return StructuredDensityMap(grid, cfg.thresholds, cfg.sigmas, cfg.scale)


def count_from_map(m) -> float:
    if isinstance(m, (DensityMap, StructuredDensityMap)):
        return m.count()
    return float(np.asarray(m).sum())


# --- DMAP binary format -------------------------------------------------

def write_dmap(path, values: np.ndarray) -> None:
    """Write a (H, W) or (D, H, W) map as DMAP v1 (f32 little-endian)."""
    v = np.asarray(values)
    if v.ndim == 2:
        v = v[None]
    if v.ndim != 3:
        raise ValueError(f"expected 2D or 3D map, got shape {v.shape}")
    D, H, W = v.shape
    head = DMAP_MAGIC + struct.pack("<IIII", DMAP_VERSION, D, H, W)
    try:
        with open(path, "wb") as fh:
            fh.write(head)
            fh.write(np.ascontiguousarray(v, dtype="<f4").tobytes())
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def read_dmap_header(buf: bytes) -> tuple[int, int, int, int]:
    if len(buf) < 20:
        raise MalformedFile("truncated DMAP header")
    if buf[:4] != DMAP_MAGIC:
        raise VersionMismatch(f"bad magic {buf[:4]!r}, expected {DMAP_MAGIC!r}")
    version, D, H, W = struct.unpack("<IIII", buf[4:20])
    if version != DMAP_VERSION:
        raise VersionMismatch(f"DMAP version {version} unsupported")
    return version, D, H, W


def read_dmap(path) -> np.ndarray:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    _, D, H, W = read_dmap_header(buf)
    n = D * H * W
    if len(buf) != 20 + 4 * n:
        raise MalformedFile(f"DMAP payload size mismatch for {D}x{H}x{W}")
    return np.frombuffer(buf[20:], dtype="<f4").reshape(D, H, W).astype(np.float32)
