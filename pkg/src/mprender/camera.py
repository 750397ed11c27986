"""Pinhole camera model, projection, and the layered frustum partition.

The frustum of a view is split into P x H x W voxels: one cell per image
pixel per depth slab.  locate() assigns a projected point to its cell
and measures d1, the in-plane distance to the pixel center (pixel
units, in [0, sqrt(2)/2]).  The depth offset d2 is finalized later by
the voxelizer, which knows each cell's minimum point depth.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, EmptyViewError, FormatError

DEPTH_EPS = 1e-6
MAX_D1 = math.sqrt(2.0) / 2.0

CAMERA_FIELDS = ("intrinsics", "world_to_camera", "width", "height")


@dataclass
class CameraView:
    """Zero-skew pinhole camera: 3x3 intrinsics plus a rigid world-to-camera transform."""

    intrinsics: np.ndarray
    world_to_camera: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        self.intrinsics = np.asarray(self.intrinsics, dtype=np.float64).reshape(3, 3)
        self.world_to_camera = np.asarray(self.world_to_camera, dtype=np.float64).reshape(4, 4)
        self.width = int(self.width)
        self.height = int(self.height)
        if self.fx <= 0 or self.fy <= 0:
            raise ContractViolation(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ContractViolation(
                f"principal point ({self.cx}, {self.cy}) outside image {self.width}x{self.height}"
            )
        r = self.rotation
        if np.abs(r.T @ r - np.eye(3)).max() > 1e-9:
            raise ContractViolation("world_to_camera rotation block is not orthonormal")
        if np.abs(self.world_to_camera[3] - np.array([0, 0, 0, 1.0])).max() > 1e-12:
            raise ContractViolation("world_to_camera bottom row must be (0, 0, 0, 1)")

    @property
    def fx(self) -> float:
        return float(self.intrinsics[0, 0])

    @property
    def fy(self) -> float:
        return float(self.intrinsics[1, 1])

    @property
    def cx(self) -> float:
        return float(self.intrinsics[0, 2])

    @property
    def cy(self) -> float:
        return float(self.intrinsics[1, 2])

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_camera[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_camera[:3, 3]

    @property
    def camera_center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.translation

    def to_dict(self) -> dict:
        return {
            "intrinsics": [float(v) for v in self.intrinsics.reshape(-1)],
            "world_to_camera": [float(v) for v in self.world_to_camera.reshape(-1)],
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "CameraView":
        for key in CAMERA_FIELDS:
            if key not in doc:
                raise FormatError(f"camera document missing field '{key}'")
        return cls(
            intrinsics=np.asarray(doc["intrinsics"], dtype=np.float64),
            world_to_camera=np.asarray(doc["world_to_camera"], dtype=np.float64),
            width=doc["width"],
            height=doc["height"],
        )


def load_camera(path) -> CameraView:
    with open(path, "r", encoding="utf-8") as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise FormatError(f"camera file {path}: {e}") from e
    return CameraView.from_dict(doc)


def save_camera(view: CameraView, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(view.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")


def make_camera(width: int, height: int, focal: float, position=(0.0, 0.0, 0.0),
                rotation=None) -> CameraView:
    """Convenience constructor: centered principal point, optional pose."""
    rotation = np.eye(3) if rotation is None else np.asarray(rotation, dtype=np.float64)
    position = np.asarray(position, dtype=np.float64)
    k = np.array([[focal, 0, width / 2.0], [0, focal, height / 2.0], [0, 0, 1.0]])
    w2c = np.eye(4)
    w2c[:3, :3] = rotation
    w2c[:3, 3] = -rotation @ position
    return CameraView(intrinsics=k, world_to_camera=w2c, width=width, height=height)


# ---------------------------------------------------------------------------
# frustum partition


@dataclass
class FrustumPartition:
    """Uniform split of the depth range [near, far] into `planes` slabs."""

    near: float
    far: float
    planes: int

    def __post_init__(self):
        if not (self.far > self.near > 0):
            raise ContractViolation(f"need far > near > 0, got near={self.near}, far={self.far}")
        if self.planes < 1:
            raise ContractViolation(f"plane count must be >= 1, got {self.planes}")

    @property
    def slab_depth(self) -> float:
        """Depth extent of one voxel slab."""
        return (self.far - self.near) / self.planes


def fit_partition(depths, planes: int, padding: float = 1e-3) -> FrustumPartition:
    """Fit near/far to the visible depth range, padded by a small fraction.

    A degenerate (all-equal) depth range is widened to 1e-6 so the
    partition stays valid.
    """
    depths = np.asarray(depths, dtype=np.float64).reshape(-1)
    if depths.size == 0:
        raise EmptyViewError("cannot fit a frustum partition to zero visible points")
    if planes < 1:
        raise ContractViolation(f"plane count must be >= 1, got {planes}")
    near = float(depths.min()) * (1.0 - padding)
    far = float(depths.max()) * (1.0 + padding)
    if far - near < 1e-6:
        far = near + 1e-6
    return FrustumPartition(near=near, far=far, planes=planes)


@dataclass
class VoxelCoord:
    """Frustum cell of a projected point plus its two aggregation distances."""

    p: int
    h: int
    w: int
    d1: float
    d2: float = 0.0  # finalized by the voxelizer's min-depth pass


# ---------------------------------------------------------------------------
# projection


def project_points(points: np.ndarray, view: CameraView):
    """Vectorized perspective projection.

    Returns (u, v, z, in_front) where z is camera-frame depth along the
    optical axis and in_front flags z > DEPTH_EPS.  u, v are only
    meaningful where in_front holds.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    cam = points @ view.rotation.T + view.translation
    z = cam[:, 2]
    in_front = z > DEPTH_EPS
    safe_z = np.where(in_front, z, 1.0)
    u = view.fx * cam[:, 0] / safe_z + view.cx
    v = view.fy * cam[:, 1] / safe_z + view.cy
    return u, v, z, in_front


def project(point, view: CameraView):
    """Project one world point; returns (u, v, z) or None if behind the camera."""
    u, v, z, ok = project_points(np.asarray(point, dtype=np.float64).reshape(1, 3), view)
    if not ok[0]:
        return None
    return float(u[0]), float(v[0]), float(z[0])


def back_project(u: float, v: float, z: float, view: CameraView) -> np.ndarray:
    """Inverse of project(): pixel coordinates plus depth back to a world point."""
    cam = np.array([(u - view.cx) / view.fx * z, (v - view.cy) / view.fy * z, z])
    return view.rotation.T @ (cam - view.translation)


def pixel_rays(view: CameraView):
    """Per-pixel world-space rays through pixel centers.

    Returns (origin (3,), dirs (H, W, 3)).  Directions have unit z in
    the camera frame, so `origin + t * dir` sits at camera depth t.
    """
    ys, xs = np.meshgrid(np.arange(view.height), np.arange(view.width), indexing="ij")
    u = xs + 0.5
    v = ys + 0.5
    d_cam = np.stack([(u - view.cx) / view.fx, (v - view.cy) / view.fy,
                      np.ones_like(u, dtype=np.float64)], axis=-1)
    dirs = d_cam @ view.rotation  # == (R^T @ d_cam^T)^T
    return view.camera_center, dirs


# ---------------------------------------------------------------------------
# voxel lookup


def locate_points(u, v, z, partition: FrustumPartition, view: CameraView):
    """Vectorized voxel assignment with half-open bins.

    Returns (p, h, w, d1, inside).  Points at z == far are clamped to
    the last plane; u, v outside [0, W) x [0, H) are outside.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    inside = ((u >= 0) & (u < view.width) & (v >= 0) & (v < view.height)
              & (z >= partition.near) & (z <= partition.far))
    w = np.floor(u).astype(np.int64)
    h = np.floor(v).astype(np.int64)
    p = np.floor((z - partition.near) / partition.slab_depth).astype(np.int64)
    np.clip(p, 0, partition.planes - 1, out=p)
    d1 = np.hypot(u - (w + 0.5), v - (h + 0.5))
    return p, h, w, d1, inside


def locate(u: float, v: float, z: float, partition: FrustumPartition,
           view: CameraView) -> VoxelCoord | None:
    """Assign one projected point to its voxel; None if outside the frustum."""
    p, h, w, d1, inside = locate_points(
        np.array([u]), np.array([v]), np.array([z]), partition, view)
    if not inside[0]:
        return None
    return VoxelCoord(p=int(p[0]), h=int(h[0]), w=int(w[0]), d1=float(d1[0]))
