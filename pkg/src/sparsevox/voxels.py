"""Point cloud to sparse voxel tokens: voxelize, per-cell encoding (VFE /
mVFE), stride-pooling sparse encoder, dense-to-sparse flattening, and the
SVPC point file format.

Point records are rows of (x, y, z, intensity, dt): meters in the ego
frame, unitless intensity in [0, 1], and the sweep's temporal offset in
seconds (0 for the reference sweep).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConfigError, DimensionError
from .numerics import Linear, Module, Tensor
from .numerics import autodiff as ad

POINT_FIELDS = ("x", "y", "z", "intensity", "dt")
SVPC_MAGIC = b"SVPC"


@dataclass(frozen=True)
class PointRecord:
    x: float
    y: float
    z: float
    intensity: float
    dt: float


@dataclass(frozen=True)
class GridConfig:
    """Axis-aligned voxel grid over a metric range.

    resolution per axis = ceil((range_max - range_min) / voxel_size).
    """

    range_min: tuple[float, float, float] = (-54.0, -54.0, -5.0)
    range_max: tuple[float, float, float] = (54.0, 54.0, 3.0)
    voxel_size: tuple[float, float, float] = (0.075, 0.075, 0.2)
    max_points_per_voxel: int = 10

    def __post_init__(self):
        lo = np.asarray(self.range_min, dtype=np.float64)
        hi = np.asarray(self.range_max, dtype=np.float64)
        vs = np.asarray(self.voxel_size, dtype=np.float64)
        if lo.shape != (3,) or hi.shape != (3,) or vs.shape != (3,):
            raise ConfigError("grid range and voxel size must be 3-vectors")
        if not (hi > lo).all():
            raise ConfigError(f"range_max {self.range_max} must exceed range_min {self.range_min}")
        if not (vs > 0).all():
            raise ConfigError(f"voxel_size {self.voxel_size} must be positive")
        if self.max_points_per_voxel < 1:
            raise ConfigError("max_points_per_voxel must be >= 1")

    @property
    def resolution(self) -> tuple[int, int, int]:
        lo = np.asarray(self.range_min)
        hi = np.asarray(self.range_max)
        vs = np.asarray(self.voxel_size)
        return tuple(int(n) for n in np.ceil((hi - lo) / vs - 1e-9))


def as_point_array(points) -> np.ndarray:
    """Accept an [N, 5] array or a sequence of PointRecord; return float64 [N, 5]."""
    if isinstance(points, np.ndarray):
        arr = np.asarray(points, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] != 5:
            raise DimensionError(f"point array must be [N, 5], got {arr.shape}")
        return arr
    rows = [(p.x, p.y, p.z, p.intensity, p.dt) for p in points]
    return np.asarray(rows, dtype=np.float64).reshape(-1, 5)


def voxelize(points, cfg: GridConfig) -> dict[tuple[int, int, int], np.ndarray]:
    """Bucket points into occupied cells.

    Out-of-range points are dropped; per-cell overflow beyond
    max_points_per_voxel keeps the earliest points in input order. Keys are
    (i, j, k) cell indices; values are [n, 5] point rows. The map iterates
    in lexicographic key order.
    """
    pts = as_point_array(points)
    if pts.shape[0] == 0:
        return {}
    lo = np.asarray(cfg.range_min)
    vs = np.asarray(cfg.voxel_size)
    res = np.asarray(cfg.resolution)
    idx = np.floor((pts[:, :3] - lo) / vs).astype(np.int64)
    keep = ((idx >= 0) & (idx < res)).all(axis=1)
    pts = pts[keep]
    idx = idx[keep]
    if pts.shape[0] == 0:
        return {}
    flat = (idx[:, 0] * res[1] + idx[:, 1]) * res[2] + idx[:, 2]
    order = np.argsort(flat, kind="stable")  # stable keeps input order per cell
    flat_sorted = flat[order]
    starts = np.flatnonzero(np.r_[True, flat_sorted[1:] != flat_sorted[:-1]])
    ends = np.r_[starts[1:], flat_sorted.size]
    out: dict[tuple[int, int, int], np.ndarray] = {}
    cap = cfg.max_points_per_voxel
    for s, e in zip(starts, ends):
        rows = order[s:e][:cap]
        key = tuple(int(v) for v in idx[rows[0]])
        out[key] = pts[rows]
    return out


def encode_vfe(cell_points: np.ndarray) -> np.ndarray:
    """Per-cell mean of (x, y, z, intensity, dt); the cell must be occupied."""
    pts = as_point_array(cell_points)
    if pts.shape[0] == 0:
        raise DimensionError("encode_vfe: empty cell (only occupied cells are encoded)")
    return pts.mean(axis=0)


def encode_mvfe(cell_points: np.ndarray, cfg: GridConfig) -> np.ndarray:
    """Means, population standard deviations, and the normalized point count.

    Layout: (avg x,y,z,intensity,dt, std x,y,z,intensity,dt, n_points) with
    n_points = count / max_points_per_voxel clamped to [0, 1].
    """
    pts = as_point_array(cell_points)
    if pts.shape[0] == 0:
        raise DimensionError("encode_mvfe: empty cell (only occupied cells are encoded)")
    means = pts.mean(axis=0)
    stds = pts.std(axis=0)  # population std: singleton cells encode 0
    n = min(1.0, pts.shape[0] / cfg.max_points_per_voxel)
    return np.concatenate([means, stds, [n]])


@dataclass
class SparseVoxelSet:
    """Serialized occupied cells: integer coords plus one feature row each.

    ``resolution`` is the grid resolution at this set's downsampling level;
    ``cum_stride`` is the elementwise product of all applied strides, so a
    cell's metric center is range_min + (coord + 0.5) * voxel_size * cum_stride.
    """

    coords: np.ndarray  # [M, 3] int64
    feats: Tensor       # [M, D]
    grid: GridConfig
    level: int = 0
    cum_stride: tuple[int, int, int] = (1, 1, 1)
    resolution: tuple[int, int, int] = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.resolution is None:
            self.resolution = self.grid.resolution
        self.coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 3)
        if self.coords.shape[0] != self.feats.shape[0]:
            raise DimensionError(
                f"coords rows {self.coords.shape[0]} != feature rows {self.feats.shape[0]}"
            )
        if self.coords.shape[0]:
            if (self.coords < 0).any() or (self.coords >= np.asarray(self.resolution)).any():
                raise DimensionError("cell index outside grid resolution")
            flat = self._flat_coords()
            if np.unique(flat).size != flat.size:
                raise DimensionError("duplicate cells in SparseVoxelSet")

    def _flat_coords(self) -> np.ndarray:
        r = self.resolution
        return (self.coords[:, 0] * r[1] + self.coords[:, 1]) * r[2] + self.coords[:, 2]

    def __len__(self) -> int:
        return self.coords.shape[0]

    @property
    def width(self) -> int:
        return self.feats.shape[1]

    def centers_m(self) -> np.ndarray:
        """Metric centers of the cells at the current level, [M, 3]."""
        lo = np.asarray(self.grid.range_min)
        vs = np.asarray(self.grid.voxel_size) * np.asarray(self.cum_stride)
        return lo + (self.coords + 0.5) * vs

    def centers_norm(self) -> np.ndarray:
        """Cell-center fractions of the level resolution, in (0, 1)."""
        return (self.coords + 0.5) / np.asarray(self.resolution, dtype=np.float64)


def voxel_to_sparse(points, cfg: GridConfig, encoding: str = "mvfe") -> SparseVoxelSet:
    """voxelize + per-cell encode, yielding the level-0 sparse set in
    lexicographic cell order."""
    cells = voxelize(points, cfg)
    if not cells:
        dim = 11 if encoding == "mvfe" else 5
        return SparseVoxelSet(np.zeros((0, 3), dtype=np.int64),
                              Tensor(np.zeros((0, dim))), cfg)
    coords = np.array(sorted(cells.keys()), dtype=np.int64)
    if encoding == "mvfe":
        feats = np.stack([encode_mvfe(cells[tuple(c)], cfg) for c in coords])
    elif encoding == "vfe":
        feats = np.stack([encode_vfe(cells[tuple(c)]) for c in coords])
    else:
        raise ConfigError(f"unknown encoding '{encoding}' (use 'vfe' or 'mvfe')")
    return SparseVoxelSet(coords, Tensor(feats), cfg)


def flatten_sparse(dense: np.ndarray, cfg: GridConfig | None = None) -> SparseVoxelSet:
    """Serialize the non-all-zero cells of a dense [X, Y, Z, D] (or [X, Y, Z])
    feature volume in lexicographic (i, j, k) order."""
    arr = np.asarray(dense, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[..., None]
    if arr.ndim != 4:
        raise DimensionError(f"flatten_sparse expects [X,Y,Z(,D)], got {arr.shape}")
    occupied = (arr != 0).any(axis=-1)
    coords = np.argwhere(occupied)  # argwhere scans in C order == lexicographic
    feats = arr[occupied]
    if cfg is None:
        cfg = GridConfig(range_min=(0, 0, 0), range_max=arr.shape[:3],
                         voxel_size=(1, 1, 1))
    return SparseVoxelSet(coords.astype(np.int64), Tensor(feats), cfg,
                          resolution=tuple(arr.shape[:3]))


def _ceil_div(a, b):
    return -(-a // b)


def downsample_coords(coords: np.ndarray, resolution, stride):
    """Floor-divide cells by the stride and merge duplicates.

    Returns (uniq, order, starts, new_res): unique target coords in
    lexicographic order, the stable row permutation that groups source rows
    by target cell, segment start offsets into that permutation, and the
    ceil-divided resolution. ``order``/``starts`` drive the feature pooling.
    """
    stride = np.asarray(stride, dtype=np.int64)
    if (stride < 1).any():
        raise ConfigError(f"strides must be >= 1, got {tuple(stride)}")
    res = np.asarray(resolution, dtype=np.int64)
    new_res = tuple(int(v) for v in _ceil_div(res, stride))
    if coords.shape[0] == 0:
        return (np.zeros((0, 3), np.int64), np.zeros(0, np.int64),
                np.zeros(0, np.int64), new_res)
    tgt = coords // stride
    flat = (tgt[:, 0] * new_res[1] + tgt[:, 1]) * new_res[2] + tgt[:, 2]
    order = np.argsort(flat, kind="stable")
    flat_sorted = flat[order]
    starts = np.flatnonzero(np.r_[True, flat_sorted[1:] != flat_sorted[:-1]])
    uniq = tgt[order[starts]]
    return uniq, order, starts, new_res


class SparseEncoder(Module):
    """Simplified sparse-front encoder: per stage, stride-pool cells that
    collapse to the same coarse coordinate (feature max), then a learned
    affine + ReLU to the stage width."""

    def __init__(self, in_dim: int, stages: list[tuple[int, int, int]],
                 widths: list[int], rng: np.random.Generator):
        if len(stages) != len(widths):
            raise ConfigError(f"{len(stages)} stages but {len(widths)} widths")
        self.stages = [tuple(int(x) for x in s) for s in stages]
        dims = [in_dim] + list(widths)
        self.proj = [Linear(dims[i], dims[i + 1], rng) for i in range(len(widths))]

    def __call__(self, vox: SparseVoxelSet) -> SparseVoxelSet:
        if vox.level != 0:
            raise ConfigError("sparse_encode expects a level-0 input set")
        coords, feats = vox.coords, vox.feats
        res = vox.resolution
        cum = np.asarray(vox.cum_stride, dtype=np.int64)
        for stride, proj in zip(self.stages, self.proj):
            uniq, order, starts, res = downsample_coords(coords, res, stride)
            if len(uniq):
                pooled = ad.segment_max(ad.gather_rows(feats, order), starts)
            else:
                pooled = ad.gather_rows(feats, np.zeros(0, np.int64))
            feats = ad.relu(proj(pooled))
            coords = uniq
            cum = cum * np.asarray(stride, dtype=np.int64)
        return SparseVoxelSet(coords, feats, vox.grid, level=len(self.stages),
                              cum_stride=tuple(int(v) for v in cum),
                              resolution=res)


def occupancy_per_level(coords: np.ndarray, resolution, stages) -> list[int]:
    """Occupied-cell count at level 0 and after each pooling stage.

    Weight-free: stage pooling only moves coordinates, so counts do not
    depend on any learned state.
    """
    counts = [int(coords.shape[0])]
    res = resolution
    for stride in stages:
        coords, _, _, res = downsample_coords(coords, res, stride)
        counts.append(int(coords.shape[0]))
    return counts


def write_points(path: str, points: np.ndarray) -> None:
    """SVPC: magic, u32 count, then count records of five f32 (little-endian)."""
    arr = np.ascontiguousarray(np.asarray(points, dtype="<f4").reshape(-1, 5))
    with open(path, "wb") as f:
        f.write(SVPC_MAGIC)
        f.write(struct.pack("<I", arr.shape[0]))
        f.write(arr.tobytes())


def read_points(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != SVPC_MAGIC:
        raise ConfigError(f"{path}: bad magic {blob[:4]!r}, expected {SVPC_MAGIC!r}")
    (count,) = struct.unpack_from("<I", blob, 4)
    arr = np.frombuffer(blob, dtype="<f4", count=count * 5, offset=8)
    return arr.reshape(count, 5).copy()
