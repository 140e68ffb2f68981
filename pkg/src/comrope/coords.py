"""Token coordinates: relative scaling, patch centres, jitter, global offsets.

Coordinates are ``(n, N)`` float arrays, one row per token.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass
from pathlib import Path

import numpy as np


def _positive(values, name):
    arr = np.asarray(values, dtype=np.float64).reshape(-1)
    if arr.size == 0 or np.any(~np.isfinite(arr)) or np.any(arr <= 0):
        raise ValueError(f"{name} must be positive and finite, got {values!r}")
    return arr


@dataclass(frozen=True)
class PatchGrid:
    canvas: tuple[float, ...]
    patch_size: tuple[float, ...]

    def __post_init__(self):
        canvas = _positive(self.canvas, "canvas")
        patch = _positive(self.patch_size, "patch_size")
        if canvas.shape != patch.shape:
            raise ValueError("canvas and patch_size need the same number of axes")
        counts = canvas / patch
        if not np.all(counts == np.round(counts)):
            raise ValueError(f"canvas {tuple(canvas)} is not a multiple of patch size {tuple(patch)}")
        object.__setattr__(self, "canvas", tuple(canvas.tolist()))
        object.__setattr__(self, "patch_size", tuple(patch.tolist()))

    @property
    def N(self) -> int:
        return len(self.canvas)

    @property
    def counts(self) -> tuple[int, ...]:
        return tuple(int(round(c / p)) for c, p in zip(self.canvas, self.patch_size))

    def half_width(self) -> np.ndarray:
        """Half a patch per axis, in relative units."""
        return np.asarray(self.patch_size) / (2 * np.asarray(self.canvas))


@dataclass(frozen=True)
class PerturbConfig:
    sigma: float = 0.0
    seed: int | None = None

    def __post_init__(self):
        if not self.sigma >= 0:
            raise ValueError(f"sigma must be non-negative, got {self.sigma}")


@dataclass(frozen=True)
class OffsetConfig:
    rho: float = 0.0
    seed: int | None = None

    def __post_init__(self):
        if not self.rho >= 0:
            raise ValueError(f"rho must be non-negative, got {self.rho}")


def _generator(seed_or_rng):
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return np.random.default_rng(seed_or_rng)


def relative_scale(raw, canvas) -> np.ndarray:
    """Divide raw positions by the canvas extent per axis; works on (N,) or (n, N)."""
    canvas = np.asarray(canvas, dtype=np.float64)
    if np.any(canvas == 0):
        raise ValueError("canvas extent must be non-zero")
    return np.asarray(raw, dtype=np.float64) / canvas


def patch_centers(grid: PatchGrid) -> np.ndarray:
    """Relative centres of every patch, row-major with axis 1 outermost."""
    idx = np.array(list(itertools.product(*(range(c) for c in grid.counts))), dtype=np.float64)
    return (idx + 0.5) * np.asarray(grid.patch_size) / np.asarray(grid.canvas)


def perturb(centers, grid: PatchGrid, cfg: PerturbConfig, rng=None) -> np.ndarray:
    """Gaussian jitter with std ``sigma * patch/canvas`` per axis, clamped to the patch."""
    centers = np.asarray(centers, dtype=np.float64)
    if cfg.sigma == 0:
        return centers.copy()
    rng = _generator(cfg.seed if rng is None else rng)
    half = grid.half_width()
    std = cfg.sigma * 2 * half
    noisy = centers + std * rng.standard_normal(centers.shape)
    return np.clip(noisy, centers - half, centers + half)


def global_offset(coords, cfg: OffsetConfig, rng=None) -> tuple[np.ndarray, np.ndarray]:
    """Shift every coordinate by one draw ``t ~ N(0, rho^2 I)``; returns (shifted, t)."""
    coords = np.asarray(coords, dtype=np.float64)
    N = coords.shape[-1]
    if cfg.rho == 0:
        return coords.copy(), np.zeros(N)
    rng = _generator(cfg.seed if rng is None else rng)
    t = cfg.rho * rng.standard_normal(N)
    return coords + t, t


def write_csv(coords, path) -> None:
    coords = np.atleast_2d(np.asarray(coords, dtype=np.float64))
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{k + 1}" for k in range(coords.shape[1])])
        for row in coords:
            w.writerow([repr(float(v)) for v in row])


def read_csv(path) -> np.ndarray:
    with open(Path(path), newline="") as fh:
        rows = list(csv.reader(fh))
    return np.array([[float(v) for v in r] for r in rows[1:]], dtype=np.float64).reshape(
        -1, len(rows[0]))
