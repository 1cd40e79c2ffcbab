"""Heightfield terrains and the curriculum map.

Grid point ``heights[i, j]`` sits at world ``(origin[0] + i * res, origin[1] + j * res)``;
heights between grid points are bilinear and queries outside the grid clamp
to the border.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

RESOLUTION = 0.05
BLOCK_SIZE = 4.0
WAVELENGTH = 2.0
CURRICULUM_SHAPE = (20, 10)
TERRAIN_TYPES = ("uniform", "wave", "slope")
MAX_UNIFORM_RANGE = 0.03
MAX_WAVE_AMPLITUDE = 0.45
MAX_SLOPE = np.deg2rad(15.0)
EVAL_WAVE_AMPLITUDE = 0.5


@dataclass(frozen=True)
class Heightfield:
    heights: np.ndarray
    resolution: float = RESOLUTION
    origin: tuple = (0.0, 0.0)

    def __post_init__(self):
        if not np.all(np.isfinite(self.heights)):
            raise ValueError("heightfield contains non-finite heights")
        self.heights.setflags(write=False)

    @property
    def shape(self):
        return self.heights.shape

    @property
    def extent(self):
        """(x_min, x_max, y_min, y_max) of the grid points."""
        nx, ny = self.heights.shape
        x0, y0 = self.origin
        return (x0, x0 + (nx - 1) * self.resolution, y0, y0 + (ny - 1) * self.resolution)

    def grid_coords(self):
        nx, ny = self.heights.shape
        return (
            self.origin[0] + self.resolution * np.arange(nx),
            self.origin[1] + self.resolution * np.arange(ny),
        )

    def to_csv(self, path):
        """Write the grid as CSV: header line with origin/resolution, then one row per x index."""
        path = Path(path)
        header = f"origin_x={self.origin[0]},origin_y={self.origin[1]},resolution={self.resolution}"
        np.savetxt(path, self.heights, delimiter=",", header=header, fmt="%.6f")


def _bilinear(heights, res, ox, oy, x, y, idx=None):
    nx, ny = heights.shape[-2:]
    fx = np.clip((np.asarray(x) - ox) / res, 0.0, nx - 1)
    fy = np.clip((np.asarray(y) - oy) / res, 0.0, ny - 1)
    i0 = np.minimum(fx.astype(np.int64), nx - 2) if nx > 1 else np.zeros_like(fx, dtype=np.int64)
    j0 = np.minimum(fy.astype(np.int64), ny - 2) if ny > 1 else np.zeros_like(fy, dtype=np.int64)
    i1 = np.minimum(i0 + 1, nx - 1)
    j1 = np.minimum(j0 + 1, ny - 1)
    tx = fx - i0
    ty = fy - j0
    if idx is None:
        h00, h10 = heights[i0, j0], heights[i1, j0]
        h01, h11 = heights[i0, j1], heights[i1, j1]
    else:
        h00, h10 = heights[idx, i0, j0], heights[idx, i1, j0]
        h01, h11 = heights[idx, i0, j1], heights[idx, i1, j1]
    return (1 - tx) * ((1 - ty) * h00 + ty * h01) + tx * ((1 - ty) * h10 + ty * h11)


def height_at(hf: Heightfield, x, y):
    return _bilinear(hf.heights, hf.resolution, hf.origin[0], hf.origin[1], x, y)


def _normal_from(hfun, x, y, step):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    dhdx = (hfun(x + step, y) - hfun(x - step, y)) / (2 * step)
    dhdy = (hfun(x, y + step) - hfun(x, y - step)) / (2 * step)
    n = np.stack([-dhdx, -dhdy, np.ones_like(dhdx)], -1)
    return n / np.linalg.norm(n, axis=-1, keepdims=True)


def normal_at(hf: Heightfield, x, y):
    """Unit surface normal from central differences at grid spacing."""
    return _normal_from(lambda a, b: height_at(hf, a, b), x, y, hf.resolution)


def _field(size, resolution, centered=True):
    n = int(round(size / resolution)) + 1
    origin = -0.5 * (n - 1) * resolution if centered else 0.0
    return n, (origin, origin)


def flat(size: float = 1.0, resolution: float = RESOLUTION) -> Heightfield:
    n, origin = _field(size, resolution)
    return Heightfield(np.zeros((n, n)), resolution, origin)


def gen_random_uniform(range_: float, seed: int, size: float = 8.0, resolution: float = RESOLUTION) -> Heightfield:
    if range_ < 0:
        raise ValueError("range must be non-negative")
    n, origin = _field(size, resolution)
    rng = np.random.default_rng(seed)
    return Heightfield(rng.uniform(-range_, range_, size=(n, n)), resolution, origin)


def gen_wave(amplitude: float, wavelength: float = WAVELENGTH, size: float = 8.0, resolution: float = RESOLUTION) -> Heightfield:
    if amplitude < 0 or wavelength <= 0:
        raise ValueError("need amplitude >= 0 and wavelength > 0")
    n, origin = _field(size, resolution)
    x = origin[0] + resolution * np.arange(n)
    row = amplitude * np.sin(2 * np.pi * x / wavelength)
    return Heightfield(np.repeat(row[:, None], n, axis=1), resolution, origin)


def gen_slope(angle: float, size: float = 8.0, resolution: float = RESOLUTION) -> Heightfield:
    if abs(angle) >= np.pi / 4:
        raise ValueError("slope angle must satisfy |angle| < pi/4")
    n, origin = _field(size, resolution)
    x = origin[0] + resolution * np.arange(n)
    return Heightfield(np.repeat((np.tan(angle) * x)[:, None], n, axis=1), resolution, origin)


def make_terrain(kind: str, difficulty: float, seed: int = 0, size: float = 8.0, resolution: float = RESOLUTION) -> Heightfield:
    """One evaluation terrain; ``difficulty`` in [0, 1] scales the type parameter."""
    if kind == "flat":
        return flat(size, resolution)
    if kind == "uniform":
        return gen_random_uniform(MAX_UNIFORM_RANGE * difficulty, seed, size, resolution)
    if kind == "wave":
        return gen_wave(EVAL_WAVE_AMPLITUDE * difficulty, WAVELENGTH, size, resolution)
    if kind == "slope":
        return gen_slope(MAX_SLOPE * difficulty, size, resolution)
    raise ValueError(f"unknown terrain type {kind!r}")


@dataclass(frozen=True)
class CurriculumGrid:
    """Blocks indexed [row, col]: rows run along world y and fix the terrain
    type, columns run along world x with difficulty col / (n_cols - 1)."""

    types: tuple
    difficulty: np.ndarray
    block_size: float
    heightfield: Heightfield

    @property
    def shape(self):
        return self.difficulty.shape

    def block_center(self, row, col):
        x0, _, y0, _ = self.heightfield.extent
        return (x0 + (np.asarray(col) + 0.5) * self.block_size, y0 + (np.asarray(row) + 0.5) * self.block_size)

    def block_of(self, x, y):
        x0, _, y0, _ = self.heightfield.extent
        rows, cols = self.shape
        col = np.clip(((np.asarray(x) - x0) // self.block_size).astype(int), 0, cols - 1)
        row = np.clip(((np.asarray(y) - y0) // self.block_size).astype(int), 0, rows - 1)
        return row, col


def _block(kind, difficulty, n, resolution, block_size, rng):
    x = resolution * np.arange(n)
    if kind == "uniform":
        r = MAX_UNIFORM_RANGE * difficulty
        return rng.uniform(-r, r, size=(n, n))
    if kind == "wave":
        row = MAX_WAVE_AMPLITUDE * difficulty * np.sin(2 * np.pi * x / WAVELENGTH)
        return np.repeat(row[:, None], n, axis=1)
    # up-then-down ramp so neighbouring blocks meet at height 0
    grade = np.tan(MAX_SLOPE * difficulty)
    row = grade * (0.5 * block_size - np.abs(x - 0.5 * block_size))
    return np.repeat(row[:, None], n, axis=1)


def build_curriculum(seed: int = 0, shape=CURRICULUM_SHAPE, block_size: float = BLOCK_SIZE,
                     resolution: float = RESOLUTION) -> CurriculumGrid:
    rows, cols = shape
    n = int(round(block_size / resolution))
    rng = np.random.default_rng(seed)
    types = tuple(TERRAIN_TYPES[r % len(TERRAIN_TYPES)] for r in range(rows))
    difficulty = np.tile(np.linspace(0.0, 1.0, cols), (rows, 1))
    heights = np.zeros((cols * n + 1, rows * n + 1))
    for r in range(rows):
        for c in range(cols):
            heights[c * n:(c + 1) * n, r * n:(r + 1) * n] = _block(
                types[r], difficulty[r, c], n, resolution, block_size, rng
            )
    hf = Heightfield(heights, resolution, (0.0, 0.0))
    return CurriculumGrid(types, difficulty, block_size, hf)


class TerrainSet:
    """Several equally-shaped heightfields queried together, one index per point."""

    def __init__(self, fields):
        fields = list(fields)
        res = fields[0].resolution
        shape = fields[0].shape
        if any(f.resolution != res or f.shape != shape for f in fields):
            raise ValueError("terrains in a set must share shape and resolution")
        self.fields = fields
        self.resolution = res
        self.heights = np.stack([f.heights for f in fields])
        self.origins = np.array([f.origin for f in fields], dtype=float)

    def __len__(self):
        return len(self.fields)

    def height_at(self, idx, x, y):
        idx = np.asarray(idx)
        ox = self.origins[idx, 0]
        oy = self.origins[idx, 1]
        return _bilinear(self.heights, self.resolution, ox, oy, x, y, idx)

    def normal_at(self, idx, x, y):
        return _normal_from(lambda a, b: self.height_at(idx, a, b), x, y, self.resolution)
