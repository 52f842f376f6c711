"""Planar poses, camera rigs, BEV grids and the differentiable BEV warp.

BEV raster convention (shared with the scene rasteriser): row 0 is the
front of the ego vehicle (+x), column 0 its left (+y).  Cell ``(r, c)``
spans ``[r, r+1) x [c, c+1)`` in continuous pixel coordinates and the ego
origin sits at the continuous point ``(H/2, W/2)``, so the cell centre is
``x = (H/2 - r - 0.5) * m``, ``y = (W/2 - c - 0.5) * m``.

Camera extrinsics map ego coordinates into the camera frame
(``X_cam = R X_ego + t``); the camera frame is x-right, y-down, z-forward.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from faxbev.errors import ConfigurationError
from faxbev.tensor import Tensor, linear_resample, matmul, add


def wrap_angle(a: float) -> float:
    """Normalise an angle to (-pi, pi]."""
    a = math.fmod(a + math.pi, 2 * math.pi)
    if a <= 0:
        a += 2 * math.pi
    return a - math.pi


@dataclass(frozen=True)
class Pose2D:
    x: float
    y: float
    yaw: float

    def __post_init__(self):
        object.__setattr__(self, "yaw", wrap_angle(float(self.yaw)))
        if not all(math.isfinite(v) for v in (self.x, self.y, self.yaw)):
            raise ValueError(f"non-finite pose {self}")

    def matrix(self) -> np.ndarray:
        """Homogeneous 3x3 local -> world transform."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return np.array([[c, -s, self.x], [s, c, self.y], [0.0, 0.0, 1.0]])

    def inverse_matrix(self) -> np.ndarray:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return np.array([[c, s, -(c * self.x + s * self.y)],
                         [-s, c, s * self.x - c * self.y],
                         [0.0, 0.0, 1.0]])

    def to_local(self, pts: np.ndarray) -> np.ndarray:
        """World points [..., 2] into this pose's frame."""
        m = self.inverse_matrix()
        return pts @ m[:2, :2].T + m[:2, 2]

    def to_world(self, pts: np.ndarray) -> np.ndarray:
        m = self.matrix()
        return pts @ m[:2, :2].T + m[:2, 2]

    def relative_to(self, ego: "Pose2D") -> "Pose2D":
        """This pose expressed in ``ego``'s frame."""
        m = ego.inverse_matrix() @ self.matrix()
        return Pose2D(m[0, 2], m[1, 2], math.atan2(m[1, 0], m[0, 0]))


@dataclass(frozen=True)
class BevGrid:
    H: int
    W: int
    meters_per_cell: float

    @property
    def extent(self) -> tuple[float, float]:
        return self.H * self.meters_per_cell, self.W * self.meters_per_cell

    def cell_centers(self) -> np.ndarray:
        """Ego-frame (x, y) of every cell centre, shape [H, W, 2]."""
        r = np.arange(self.H)[:, None]
        c = np.arange(self.W)[None, :]
        x = (self.H / 2 - r - 0.5) * self.meters_per_cell
        y = (self.W / 2 - c - 0.5) * self.meters_per_cell
        return np.stack(np.broadcast_arrays(x, y), axis=-1)

    def to_pixel(self, pts: np.ndarray) -> np.ndarray:
        """Ego-frame points [..., 2] to continuous (row, col) of cell-centre indices."""
        r = self.H / 2 - pts[..., 0] / self.meters_per_cell - 0.5
        c = self.W / 2 - pts[..., 1] / self.meters_per_cell - 0.5
        return np.stack([r, c], axis=-1)

    def scaled(self, factor: int) -> "BevGrid":
        """Same extent at ``factor`` times coarser resolution."""
        return BevGrid(self.H // factor, self.W // factor, self.meters_per_cell * factor)


FULL_SCALE_GRID = BevGrid(256, 256, 100.0 / 256)


def bilinear_matrix(rows: np.ndarray, cols: np.ndarray, h: int, w: int):
    """Sparse (len(rows), h*w) bilinear sampling matrix with zero padding."""
    rows = rows.ravel()
    cols = cols.ravel()
    r0 = np.floor(rows).astype(np.int64)
    c0 = np.floor(cols).astype(np.int64)
    fr = rows - r0
    fc = cols - c0
    out_idx, src_idx, wts = [], [], []
    n = rows.size
    for dr, dc, wt in ((0, 0, (1 - fr) * (1 - fc)), (0, 1, (1 - fr) * fc),
                       (1, 0, fr * (1 - fc)), (1, 1, fr * fc)):
        rr, cc = r0 + dr, c0 + dc
        ok = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w) & (wt > 0)
        out_idx.append(np.nonzero(ok)[0])
        src_idx.append((rr * w + cc)[ok])
        wts.append(wt[ok])
    return sp.csr_matrix((np.concatenate(wts), (np.concatenate(out_idx), np.concatenate(src_idx))),
                         shape=(n, h * w))


def warp_matrix(sender: Pose2D, ego: Pose2D, grid: BevGrid):
    """Resampling matrix taking a sender-frame BEV map to the ego frame."""
    pts_ego = grid.cell_centers()
    world = ego.to_world(pts_ego)
    pts_sender = sender.to_local(world)
    pix = grid.to_pixel(pts_sender)
    return bilinear_matrix(pix[..., 0], pix[..., 1], grid.H, grid.W)


def warp_features(feat: Tensor, sender: Pose2D, ego: Pose2D, grid: BevGrid) -> Tensor:
    """Resample a sender's BEV feature ``[..., H, W, C]`` into the ego frame.

    Bilinear sampling, zeros outside the sender's map; linear (hence
    differentiable) in ``feat``.  Poses are treated as constants.
    """
    if tuple(feat.shape[-3:-1]) != (grid.H, grid.W):
        raise ValueError(f"feature map {feat.shape} does not match grid {grid.H}x{grid.W}")
    return linear_resample(feat, warp_matrix(sender, ego, grid), (grid.H, grid.W))


def in_comm_range(poses: list[Pose2D], ego_index: int, range_m: float) -> np.ndarray:
    """Boolean mask: agent within ``range_m`` (inclusive) of the ego; ego always valid."""
    if not 0 <= ego_index < len(poses):
        raise IndexError(f"ego_index {ego_index} out of range for {len(poses)} agents")
    e = poses[ego_index]
    mask = np.array([math.hypot(p.x - e.x, p.y - e.y) <= range_m for p in poses], dtype=bool)
    mask[ego_index] = True
    return mask


# -- cameras ----------------------------------------------------------------

# ego (x fwd, y left, z up) -> camera (x right, y down, z fwd) for a forward camera
_EGO_TO_CAM = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])


def _rot_z(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class CameraRig:
    K: np.ndarray
    R: np.ndarray
    t: np.ndarray
    height: int
    width: int
    yaw: float = field(default=0.0, compare=False)

    def __post_init__(self):
        K = np.asarray(self.K, dtype=np.float64)
        R = np.asarray(self.R, dtype=np.float64)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)
        if K.shape != (3, 3) or R.shape != (3, 3):
            raise ConfigurationError("K and R must be 3x3")
        if abs(np.linalg.det(K)) < 1e-12:
            raise ConfigurationError("camera intrinsic matrix is singular")
        if np.any(np.tril(K, -1) != 0) or K[0, 0] <= 0 or K[1, 1] <= 0:
            raise ConfigurationError("K must be upper triangular with positive focal lengths")
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-6):
            raise ConfigurationError("R must be orthonormal")

    @property
    def origin(self) -> np.ndarray:
        """Camera centre in the ego frame, ``-R^T t``."""
        return -self.R.T @ self.t

    def rays(self, feat_size: tuple[int, int]) -> np.ndarray:
        """Unit ego-frame ray directions through feature-pixel centres, [hf, wf, 3]."""
        hf, wf = feat_size
        sy, sx = self.height / hf, self.width / wf
        v = (np.arange(hf) + 0.5) * sy
        u = (np.arange(wf) + 0.5) * sx
        uu, vv = np.meshgrid(u, v)
        pix = np.stack([uu, vv, np.ones_like(uu)], axis=-1)
        d_cam = pix @ np.linalg.inv(self.K).T
        d_ego = d_cam @ self.R  # R^T applied to row vectors
        return d_ego / np.linalg.norm(d_ego, axis=-1, keepdims=True)


def make_rig(yaw: float, height: int = 32, width: int = 64, fov_deg: float = 110.0,
             mount=(0.0, 0.0, 1.6)) -> CameraRig:
    """Pinhole camera looking along ego-frame heading ``yaw`` (radians)."""
    f = (width / 2) / math.tan(math.radians(fov_deg) / 2)
    K = np.array([[f, 0.0, width / 2], [0.0, f, height / 2], [0.0, 0.0, 1.0]])
    R = _EGO_TO_CAM @ _rot_z(-yaw)
    t = -R @ np.asarray(mount, dtype=np.float64)
    return CameraRig(K, R, t, height, width, yaw)


def surround_rigs(height: int = 32, width: int = 64, fov_deg: float = 110.0) -> list[CameraRig]:
    """Four cameras at yaw 0, 90, 180, 270 degrees."""
    return [make_rig(math.radians(a), height, width, fov_deg) for a in (0.0, 90.0, 180.0, 270.0)]


def camera_geometry_features(rig: CameraRig, feat_size: tuple[int, int]) -> np.ndarray:
    """Per feature pixel: unit ray (3) and camera origin (3), shape [hf, wf, 6]."""
    rays = rig.rays(feat_size)
    origin = np.broadcast_to(rig.origin, rays.shape)
    return np.concatenate([rays, origin], axis=-1)


def camera_positional_encoding(rig: CameraRig, feat_size: tuple[int, int], proj: Tensor,
                               bias: Tensor | None = None) -> Tensor:
    """Linear projection of the 6-d ray/origin descriptor to ``proj.shape[1]`` channels."""
    geo = camera_geometry_features(rig, feat_size).astype(proj.dtype)
    out = matmul(Tensor(geo), proj)
    return out if bias is None else add(out, bias)
