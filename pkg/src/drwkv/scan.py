"""Corner-started spiral scan orders over an H x W grid, plus Q-Shift."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Literal

import numpy as np
import torch
import torch.nn.functional as F

Corner = Literal["TL", "TR", "BL", "BR"]
Rotation = Literal["CW", "CCW"]

CORNERS: tuple[Corner, ...] = ("TL", "TR", "BL", "BR")
ROTATIONS: tuple[Rotation, ...] = ("CW", "CCW")
# fixed so weight files and outputs are reproducible
PATH_ORDER: tuple[tuple[Corner, Rotation], ...] = tuple((c, r) for c in CORNERS for r in ROTATIONS)


@dataclass(frozen=True)
class SpiralParams:
    a: float = 0.0
    b: float = 1.0
    theta_max: float = 4 * math.pi
    samples: int = 64

    def __post_init__(self):
        if self.b < 0:
            raise ValueError("expansion rate b must be >= 0")
        if self.samples < 1:
            raise ValueError("samples must be >= 1")


@dataclass(frozen=True)
class TopologyThresholds:
    delta: float = 1.5
    tau: int = 3

    def __post_init__(self):
        if self.delta <= 0:
            raise ValueError("delta must be > 0")
        if self.tau < 1:
            raise ValueError("tau must be >= 1")


@dataclass(frozen=True)
class ScanPath:
    height: int
    width: int
    corner: str
    rotation: str
    order: np.ndarray = field(repr=False)
    inverse: np.ndarray = field(repr=False)

    def __len__(self):
        return self.height * self.width

    def coords(self) -> np.ndarray:
        """(T, 2) array of (row, col) in visiting order."""
        return np.stack(np.divmod(self.order, self.width), axis=1)


def continuous_spiral(p: SpiralParams) -> np.ndarray:
    """Sample the Archimedean spiral r = a + b*theta; returns (samples, 2)."""
    if p.samples == 1:
        theta = np.zeros(1)
    else:
        # endpoint excluded so a full-turn sweep gives distinct points
        theta = np.linspace(0.0, p.theta_max, p.samples, endpoint=False)
    r = p.a + p.b * theta
    return np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)


def _ring_walk_tl_cw(h: int, w: int) -> list[tuple[int, int]]:
    cells = []
    top, bottom, left, right = 0, h - 1, 0, w - 1
    while top <= bottom and left <= right:
        for c in range(left, right + 1):
            cells.append((top, c))
        for r in range(top + 1, bottom + 1):
            cells.append((r, right))
        if top < bottom:
            for c in range(right - 1, left - 1, -1):
                cells.append((bottom, c))
        if left < right:
            for r in range(bottom - 1, top, -1):
                cells.append((r, left))
        top, bottom, left, right = top + 1, bottom - 1, left + 1, right - 1
    return cells


def _spiral_cells(h: int, w: int, corner: str, rotation: str) -> list[tuple[int, int]]:
    # Every variant is a reflection of the TL-CW walk.  A counter-clockwise
    # walk from TL is the clockwise walk on the transposed grid; the other
    # corners follow by flipping rows and/or columns, which also reverses
    # the sense of rotation.
    flip_r = corner in ("BL", "BR")
    flip_c = corner in ("TR", "BR")
    cw = rotation == "CW"
    if flip_r != flip_c:
        cw = not cw
    if cw:
        base = _ring_walk_tl_cw(h, w)
    else:
        base = [(r, c) for c, r in _ring_walk_tl_cw(w, h)]
    return [(h - 1 - r if flip_r else r, w - 1 - c if flip_c else c) for r, c in base]


@lru_cache(maxsize=256)
def _cached_path(h: int, w: int, corner: str, rotation: str) -> ScanPath:
    cells = _spiral_cells(h, w, corner, rotation)
    order = np.array([r * w + c for r, c in cells], dtype=np.int64)
    inverse = np.empty_like(order)
    inverse[order] = np.arange(order.size)
    order.setflags(write=False)
    inverse.setflags(write=False)
    return ScanPath(h, w, corner, rotation, order, inverse)


def spiral_path(height: int, width: int, corner: str = "TL", rotation: str = "CW") -> ScanPath:
    if height < 1 or width < 1:
        raise ValueError(f"grid extents must be >= 1, got {height}x{width}")
    if corner not in CORNERS:
        raise ValueError(f"unknown corner {corner!r}")
    if rotation not in ROTATIONS:
        raise ValueError(f"unknown rotation {rotation!r}")
    return _cached_path(int(height), int(width), corner, rotation)


def all_spiral_paths(height: int, width: int) -> list[ScanPath]:
    return [spiral_path(height, width, c, r) for c, r in PATH_ORDER]


def raster_path(height: int, width: int) -> ScanPath:
    order = np.arange(height * width, dtype=np.int64)
    return ScanPath(height, width, "TL", "raster", order, order.copy())


def topology_violation_rate(path: ScanPath, t: TopologyThresholds = TopologyThresholds()) -> float:
    """Fraction of near pairs (distance < delta) placed >= tau apart in time."""
    rc = path.coords().astype(float)
    n = len(rc)
    if n < 2:
        return 0.0
    i, j = np.triu_indices(n, k=1)
    dist = np.hypot(rc[i, 0] - rc[j, 0], rc[i, 1] - rc[j, 1])
    near = dist < t.delta
    total = int(near.sum())
    if total == 0:
        return 0.0
    gap = np.abs(i - j)[near]
    return float((gap >= t.tau).sum()) / total


def qshift_neighbors(x: torch.Tensor) -> torch.Tensor:
    """X-dagger: quarter k of the channels read from its neighbour at
    (h-1, w), (h+1, w), (h, w-1), (h, w+1); off-grid reads are zero."""
    c = x.shape[1]
    if c % 4:
        raise ValueError(f"Q-Shift needs channels divisible by 4, got {c}")
    q = c // 4
    # negative padding crops the opposite border: a one-pixel shift with zero fill
    return torch.cat([
        F.pad(x[:, 0 * q:1 * q], (0, 0, 1, -1)),   # from (h-1, w)
        F.pad(x[:, 1 * q:2 * q], (0, 0, -1, 1)),   # from (h+1, w)
        F.pad(x[:, 2 * q:3 * q], (1, -1, 0, 0)),   # from (h, w-1)
        F.pad(x[:, 3 * q:4 * q], (-1, 1, 0, 0)),   # from (h, w+1)
    ], dim=1)


def qshift(x: torch.Tensor, mu: torch.Tensor) -> torch.Tensor:
    """X + (1 - mu) * X-dagger with ``mu`` broadcast per channel."""
    return x + (1 - mu.reshape(1, -1, 1, 1)) * qshift_neighbors(x)
