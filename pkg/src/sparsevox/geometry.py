"""Pinhole projection of voxel centers into camera images and explicit
LiDAR-image feature fusion by concatenation.

Camera frame convention: z forward (depth), x right, y down. A point is
visible when its camera-frame depth is positive and the projected pixel
falls inside the image rectangle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import ConfigError, DimensionError
from .numerics import Tensor
from .numerics import autodiff as ad
from .voxels import SparseVoxelSet

DEPTH_EPS = 1e-9


@dataclass
class CameraModel:
    """Intrinsics K (3x3), rigid LiDAR-to-camera transform T (4x4), image size."""

    K: np.ndarray
    T_lidar_to_cam: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        self.K = np.asarray(self.K, dtype=np.float64).reshape(3, 3)
        self.T_lidar_to_cam = np.asarray(self.T_lidar_to_cam, dtype=np.float64).reshape(4, 4)
        if abs(self.K[2, 2] - 1.0) > 1e-12:
            raise ConfigError("K[2][2] must be 1")
        if self.K[0, 0] <= 0 or self.K[1, 1] <= 0:
            raise ConfigError("focal lengths must be positive")
        R = self.T_lidar_to_cam[:3, :3]
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-9):
            raise ConfigError("rotation block of T_lidar_to_cam is not orthonormal")
        if not np.allclose(self.T_lidar_to_cam[3], [0.0, 0.0, 0.0, 1.0], atol=0.0):
            raise ConfigError("last row of T_lidar_to_cam must be (0,0,0,1)")
        if self.width <= 0 or self.height <= 0:
            raise ConfigError("image size must be positive")

    @property
    def fx(self) -> float:
        return float(self.K[0, 0])

    @property
    def fy(self) -> float:
        return float(self.K[1, 1])


@dataclass
class ImageFeatureMap:
    """Strided feature grid over one camera image.

    feats is [Hf, Wf, C] with Hf = ceil(height / stride), Wf likewise.
    """

    camera_id: int
    feats: np.ndarray
    stride: int

    def __post_init__(self):
        self.feats = np.asarray(self.feats, dtype=np.float64)
        if self.feats.ndim != 3:
            raise DimensionError(f"feature map must be [Hf, Wf, C], got {self.feats.shape}")
        if self.stride < 1:
            raise ConfigError("stride must be >= 1")

    @property
    def channels(self) -> int:
        return self.feats.shape[2]


def project_points(points: np.ndarray, cam: CameraModel):
    """Vectorized pinhole projection of [N, 3] LiDAR-frame points.

    Returns (uv [N, 2], depth [N], valid [N]). Points with |depth| below
    DEPTH_EPS are marked invalid without dividing.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    homo = np.c_[pts, np.ones(len(pts))]
    cam_pts = homo @ cam.T_lidar_to_cam.T
    depth = cam_pts[:, 2]
    safe = np.abs(depth) > DEPTH_EPS
    uv = np.zeros((len(pts), 2))
    with np.errstate(divide="ignore", invalid="ignore"):
        proj = cam_pts[:, :3] @ cam.K.T
        uv[safe] = proj[safe, :2] / depth[safe, None]
    valid = (
        safe
        & (depth > 0)
        & (uv[:, 0] >= 0) & (uv[:, 0] < cam.width)
        & (uv[:, 1] >= 0) & (uv[:, 1] < cam.height)
    )
    return uv, depth, valid


def project(point, cam: CameraModel):
    """Single-point convenience: (u, v, depth, valid)."""
    uv, depth, valid = project_points(np.asarray(point, dtype=np.float64).reshape(1, 3), cam)
    return float(uv[0, 0]), float(uv[0, 1]), float(depth[0]), bool(valid[0])


def back_project(u: float, v: float, depth: float, cam: CameraModel) -> np.ndarray:
    """Invert project(): pixel + depth back to the LiDAR frame."""
    ray = np.linalg.solve(cam.K, np.array([u, v, 1.0])) * depth
    T_inv = np.linalg.inv(cam.T_lidar_to_cam)
    return (T_inv @ np.append(ray, 1.0))[:3]


def _bilinear(feats: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Sample [H, W, C] at fractional (x, y), clamped to the border."""
    H, W = feats.shape[:2]
    x = np.clip(x, 0.0, W - 1.0)
    y = np.clip(y, 0.0, H - 1.0)
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    wx = (x - x0)[:, None]
    wy = (y - y0)[:, None]
    top = feats[y0, x0] * (1 - wx) + feats[y0, x1] * wx
    bot = feats[y1, x0] * (1 - wx) + feats[y1, x1] * wx
    return top * (1 - wy) + bot * wy


def sample_image_feature(maps: list[ImageFeatureMap], cams: list[CameraModel],
                         centers_m: np.ndarray):
    """Project metric voxel centers into every camera and sample features.

    Among valid hits the nearest-depth camera wins. Returns
    (feats [M, C], valid [M]); rows with no valid hit are zero.
    """
    if len(maps) != len(cams):
        raise DimensionError(f"{len(maps)} feature maps vs {len(cams)} cameras")
    centers = np.asarray(centers_m, dtype=np.float64).reshape(-1, 3)
    M = centers.shape[0]
    if not maps:
        return np.zeros((M, 0)), np.zeros(M, dtype=bool)
    C = maps[0].channels
    best_depth = np.full(M, np.inf)
    best_cam = np.full(M, -1, dtype=np.int64)
    best_uv = np.zeros((M, 2))
    for ci, cam in enumerate(cams):
        uv, depth, valid = project_points(centers, cam)
        better = valid & (depth < best_depth)
        best_depth[better] = depth[better]
        best_cam[better] = ci
        best_uv[better] = uv[better]
    out = np.zeros((M, C))
    valid_mask = best_cam >= 0
    ids = [m.camera_id for m in maps]
    if sorted(ids) != list(range(len(cams))):
        raise ConfigError(f"feature-map camera ids {ids} do not cover the camera list")
    for fmap in maps:
        rows = np.flatnonzero(best_cam == fmap.camera_id)
        if rows.size == 0:
            continue
        gx = best_uv[rows, 0] / fmap.stride - 0.5
        gy = best_uv[rows, 1] / fmap.stride - 0.5
        out[rows] = _bilinear(fmap.feats, gx, gy)
    return out, valid_mask


def image_features_with_validity(maps, cams, vox: SparseVoxelSet) -> Tensor:
    """Sampled image features for each voxel plus an appended validity bit,
    so downstream layers can tell 'black' from 'unseen'."""
    feats, valid = sample_image_feature(maps, cams, vox.centers_m())
    return Tensor(np.c_[feats, valid.astype(np.float64)])


def fuse_concat(lidar: SparseVoxelSet, image_feats: Tensor) -> SparseVoxelSet:
    """Per-row concatenation; coords and token count are unchanged."""
    if image_feats.shape[0] != len(lidar):
        raise DimensionError(
            f"fuse_concat: {len(lidar)} voxel rows vs {image_feats.shape[0]} image rows"
        )
    fused = ad.concat([lidar.feats, image_feats], axis=1)
    return SparseVoxelSet(lidar.coords, fused, lidar.grid, level=lidar.level,
                          cum_stride=lidar.cum_stride, resolution=lidar.resolution)
