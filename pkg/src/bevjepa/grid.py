"""Voxelization of point clouds and their bird's-eye-view projection.

The 3D grid has ``nx * ny * nz`` voxels over a metric range; the encoder
divides every spatial extent by ``downsample``, so one BEV cell covers a
``downsample x downsample`` column of voxels over the full height. Voxel
features are 4 channels: clamped occupancy count, mean intensity, mean
height within the voxel, and a binary occupied flag.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError
from .scenes import PointCloud

FEATURE_CHANNELS = 4
COUNT_CLAMP = 16.0


@dataclass(frozen=True)
class GridSpec:
    nx: int = 64
    ny: int = 64
    nz: int = 16
    x_min: float = -16.0
    x_max: float = 16.0
    y_min: float = -16.0
    y_max: float = 16.0
    z_min: float = -2.0
    z_max: float = 2.0
    downsample: int = 8

    def __post_init__(self):
        for n, name in ((self.nx, "nx"), (self.ny, "ny"), (self.nz, "nz")):
            if n < 1:
                raise ConfigError(f"{name} must be >= 1, got {n}")
            if n % self.downsample != 0:
                raise ConfigError(
                    f"{name}={n} must be divisible by downsample={self.downsample}"
                )
        for lo, hi, name in (
            (self.x_min, self.x_max, "x"),
            (self.y_min, self.y_max, "y"),
            (self.z_min, self.z_max, "z"),
        ):
            if not hi > lo:
                raise ConfigError(f"grid range on axis {name} is degenerate: [{lo}, {hi}]")

    @property
    def voxel_size(self) -> tuple[float, float, float]:
        return (
            (self.x_max - self.x_min) / self.nx,
            (self.y_max - self.y_min) / self.ny,
            (self.z_max - self.z_min) / self.nz,
        )

    @property
    def bev_h(self) -> int:
        return self.nx // self.downsample

    @property
    def bev_w(self) -> int:
        return self.ny // self.downsample

    @property
    def bev_d(self) -> int:
        return self.nz // self.downsample

    @property
    def ranges(self) -> tuple[tuple[float, float], ...]:
        return (
            (self.x_min, self.x_max),
            (self.y_min, self.y_max),
            (self.z_min, self.z_max),
        )


def default_grid() -> GridSpec:
    return GridSpec()


def tiny_grid() -> GridSpec:
    return GridSpec(nx=16, ny=16, nz=8)


def small_grid() -> GridSpec:
    """6x6 BEV; the central 4x4 cells have padding-free receptive fields."""
    return GridSpec(nx=48, ny=48, nz=8)


def _voxel_indices(pts: np.ndarray, spec: GridSpec) -> np.ndarray:
    mins = np.array([spec.x_min, spec.y_min, spec.z_min])
    sizes = np.array(spec.voxel_size)
    idx = np.floor((pts[:, :3] - mins) / sizes).astype(np.int64)
    dims = np.array([spec.nx, spec.ny, spec.nz])
    bad = (idx < 0) | (idx >= dims)
    if bad.any():
        which = int(np.flatnonzero(bad.any(axis=1))[0])
        raise ContractError(
            f"point {which} at {tuple(pts[which, :3])} lies outside the grid range; "
            "crop the cloud first"
        )
    return idx


def voxelize(cloud: PointCloud, spec: GridSpec) -> np.ndarray:
    """Return voxel features [4, nx, ny, nz]; unoccupied voxels stay zero.

    Points are lex-sorted into a canonical order before accumulation so the
    result is bit-identical under any permutation of the input.
    """
    feats = np.zeros((FEATURE_CHANNELS, spec.nx, spec.ny, spec.nz))
    if len(cloud) == 0:
        return feats
    pts = cloud.points
    idx = _voxel_indices(pts, spec)
    flat = (idx[:, 0] * spec.ny + idx[:, 1]) * spec.nz + idx[:, 2]
    order = np.lexsort((pts[:, 3], pts[:, 2], pts[:, 1], pts[:, 0], flat))
    pts = pts[order]
    flat = flat[order]
    idx = idx[order]

    nvox = spec.nx * spec.ny * spec.nz
    counts = np.bincount(flat, minlength=nvox)
    sum_int = np.bincount(flat, weights=pts[:, 3], minlength=nvox)
    rel_z = (pts[:, 2] - (spec.z_min + idx[:, 2] * spec.voxel_size[2])) / spec.voxel_size[2]
    sum_rz = np.bincount(flat, weights=rel_z, minlength=nvox)

    occupied = counts > 0
    shape3 = (spec.nx, spec.ny, spec.nz)
    feats[0] = (np.minimum(counts, COUNT_CLAMP) / COUNT_CLAMP).reshape(shape3)
    mean_int = np.zeros(nvox)
    mean_rz = np.zeros(nvox)
    mean_int[occupied] = sum_int[occupied] / counts[occupied]
    mean_rz[occupied] = sum_rz[occupied] / counts[occupied]
    feats[1] = mean_int.reshape(shape3)
    feats[2] = mean_rz.reshape(shape3)
    feats[3] = occupied.reshape(shape3).astype(np.float64)
    return feats


def bev_occupancy(features: np.ndarray, spec: GridSpec) -> np.ndarray:
    """Bool [H, W]: true iff any voxel in the cell's column is occupied."""
    if features.shape != (FEATURE_CHANNELS, spec.nx, spec.ny, spec.nz):
        raise ValueError(
            f"features shape {features.shape} inconsistent with grid "
            f"({FEATURE_CHANNELS}, {spec.nx}, {spec.ny}, {spec.nz})"
        )
    s = spec.downsample
    occ = features[3] > 0.0
    blocks = occ.reshape(spec.bev_h, s, spec.bev_w, s, spec.nz)
    return blocks.any(axis=(1, 3, 4))


def bev_cell_of_point(point, spec: GridSpec) -> tuple[int, int]:
    """BEV cell (h, w) whose voxel column contains the point."""
    pts = np.asarray(point, dtype=np.float64).reshape(1, -1)
    if pts.shape[1] < 3:
        raise ValueError("point must have at least x, y, z coordinates")
    pad = np.zeros((1, 4))
    pad[:, :3] = pts[:, :3]
    idx = _voxel_indices(pad, spec)
    return int(idx[0, 0] // spec.downsample), int(idx[0, 1] // spec.downsample)


def bev_cells_of_points(pts: np.ndarray, spec: GridSpec) -> np.ndarray:
    """Vectorized bev_cell_of_point over an [N, >=3] array -> [N, 2] (h, w)."""
    pts = np.asarray(pts, dtype=np.float64)
    pad = np.zeros((pts.shape[0], 4))
    pad[:, :3] = pts[:, :3]
    idx = _voxel_indices(pad, spec)
    return np.column_stack([idx[:, 0] // spec.downsample, idx[:, 1] // spec.downsample])
