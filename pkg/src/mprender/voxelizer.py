"""Scatter point features into the layered frustum volume.

Each in-frustum point lands in exactly one voxel and contributes with
weight w = (1 - d1)^a * (1 / (1 + d2))^b, where d1 is the distance to
the pixel center and d2 the depth offset above the voxel's nearest
point.  Voxel features are the weight-normalized blend of their
contributors; the backward pass routes voxel gradients to the learnable
feature slots with the exact quotient-rule coefficients w_i / sum(w).

Weights and accumulation run in float64 regardless of the feature
dtype, so the 64-bit oracle comparisons are exact to rounding.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .camera import CameraView, FrustumPartition, VoxelCoord, fit_partition, locate_points, project_points
from .errors import ContractViolation, EmptyViewError
from .pointcloud import PointCloudStore, view_directions

WEIGHT_FLOOR = 1e-30  # below this total weight a voxel counts as empty


@dataclass
class AggregationParams:
    """Exponents steering the in-plane (a) and depth (b) falloff."""

    a: float = 1.0
    b: float = 1.0

    def __post_init__(self):
        if not (np.isfinite(self.a) and np.isfinite(self.b)):
            raise ContractViolation("aggregation exponents must be finite")
        if self.a < 0 or self.b < 0:
            raise ContractViolation("aggregation exponents must be nonnegative")


@dataclass
class VoxelBookkeeping:
    """Forward-pass record needed to scatter gradients back to points.

    point_idx / voxel_idx / weights are aligned per contribution;
    voxel_idx is flattened p * H * W + h * W + w.
    """

    point_idx: np.ndarray
    voxel_idx: np.ndarray
    weights: np.ndarray
    weight_sum: np.ndarray  # (P*H*W,)
    grid: tuple[int, int, int]
    n_points: int
    learn_dim: int


@dataclass
class FeatureVolume:
    """Aggregated (C, P, H, W) volume plus occupancy bookkeeping."""

    values: Tensor
    weight_sum: np.ndarray  # (P, H, W)
    bookkeeping: VoxelBookkeeping
    n_contributing: int

    @property
    def shape(self):
        return self.values.shape


def point_weights(d1, d2, params: AggregationParams) -> np.ndarray:
    """Blend weight per contribution, float64."""
    d1 = np.asarray(d1, dtype=np.float64)
    d2 = np.asarray(d2, dtype=np.float64)
    return (1.0 - d1) ** params.a * (1.0 + d2) ** (-params.b)


def _canonical_order(voxel_idx, d2, d1):
    # permutation-independent accumulation order (distinct points only
    # tie on all three keys with probability zero)
    return np.lexsort((d1, d2, voxel_idx))


def _aggregate_arrays(features, d1, d2, voxel_idx, grid, params,
                      deterministic=False):
    """Core scatter: returns (volume (C,P,H,W) f64, weights, weight_sum)."""
    features = np.asarray(features, dtype=np.float64)
    voxel_idx = np.asarray(voxel_idx, dtype=np.int64)
    n_vox = grid[0] * grid[1] * grid[2]
    w = point_weights(d1, d2, params)
    if deterministic and len(voxel_idx) > 1:
        order = _canonical_order(voxel_idx, d2, d1)
        inv = np.empty_like(order)
        inv[order] = np.arange(len(order))
        features_o, w_o, vidx_o = features[order], w[order], voxel_idx[order]
    else:
        inv = None
        features_o, w_o, vidx_o = features, w, voxel_idx
    den = np.bincount(vidx_o, weights=w_o, minlength=n_vox)
    c = features.shape[1]
    num = np.empty((c, n_vox), dtype=np.float64)
    for ch in range(c):
        num[ch] = np.bincount(vidx_o, weights=w_o * features_o[:, ch], minlength=n_vox)
    occupied = den >= WEIGHT_FLOOR
    vol = np.where(occupied, num / np.where(occupied, den, 1.0), 0.0)
    weights_out = w if inv is None else w_o[inv]  # original point order
    return vol.reshape((c,) + grid), weights_out, den


def aggregate_backward(volume_grad, book: VoxelBookkeeping) -> np.ndarray:
    """Exact chain rule through the normalized blend.

    volume_grad: (C, P, H, W) upstream gradient.  Returns the (N,
    learn_dim) per-point gradient; the view-direction channels carry
    none, and points that contributed nowhere get exact zeros.
    """
    volume_grad = np.asarray(volume_grad)
    c = volume_grad.shape[0]
    g_flat = volume_grad.reshape(c, -1).astype(np.float64, copy=False)
    den = book.weight_sum[book.voxel_idx]
    coef = np.where(den >= WEIGHT_FLOOR, book.weights / np.where(den > 0, den, 1.0), 0.0)
    contrib = coef[:, None] * g_flat[: book.learn_dim, book.voxel_idx].T
    out = np.zeros((book.n_points, book.learn_dim), dtype=np.float64)
    np.add.at(out, book.point_idx, contrib)
    return out


def aggregate(features, coords, partition: FrustumPartition, height: int,
              width: int, params: AggregationParams,
              deterministic: bool = False) -> FeatureVolume:
    """Blend already-located points into a (C, P, H, W) volume.

    features: (M, C) rows (appearance ++ view direction, or any feature
    layout); coords: matching VoxelCoord sequence with d2 already
    finalized.  Empty voxels hold exact zeros.
    """
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if len(coords) != features.shape[0]:
        raise ContractViolation(
            f"{features.shape[0]} feature rows but {len(coords)} voxel coords")
    grid = (partition.planes, height, width)
    p = np.array([c.p for c in coords], dtype=np.int64)
    h = np.array([c.h for c in coords], dtype=np.int64)
    w = np.array([c.w for c in coords], dtype=np.int64)
    d1 = np.array([c.d1 for c in coords], dtype=np.float64)
    d2 = np.array([c.d2 for c in coords], dtype=np.float64)
    if ((p < 0) | (p >= grid[0]) | (h < 0) | (h >= grid[1]) | (w < 0) | (w >= grid[2])).any():
        raise ContractViolation("voxel coordinate out of range")
    voxel_idx = (p * grid[1] + h) * grid[2] + w
    vol, weights, den = _aggregate_arrays(features, d1, d2, voxel_idx, grid,
                                          params, deterministic)
    book = VoxelBookkeeping(
        point_idx=np.arange(features.shape[0]),
        voxel_idx=voxel_idx, weights=weights, weight_sum=den, grid=grid,
        n_points=features.shape[0], learn_dim=features.shape[1],
    )
    return FeatureVolume(values=Tensor(vol), weight_sum=den.reshape(grid),
                         bookkeeping=book, n_contributing=features.shape[0])


def finalize_depth_offsets(voxel_idx, z, n_voxels: int) -> np.ndarray:
    """d2 per contribution: depth above the voxel's nearest point."""
    min_z = np.full(n_voxels, np.inf)
    np.minimum.at(min_z, voxel_idx, z)
    return z - min_z[voxel_idx]


def build_volume(store: PointCloudStore, view: CameraView,
                 params: AggregationParams, partition: FrustumPartition | None = None,
                 planes: int = 8, padding: float = 1e-3,
                 features=None, deterministic: bool = False) -> FeatureVolume:
    """project -> locate -> min-depth pass -> aggregate for a whole store.

    `features` selects the learnable feature source: None uses the
    store's 8-dim matrix untracked, an (N, k) array substitutes raw
    features (e.g. RGB-only), and a Tensor leaf additionally records the
    scatter on its tape so gradients flow back to the matrix.  The
    volume's channel count is k + 3 (unit view direction appended).

    With partition=None the depth range is fitted per view over the
    points that project into the image.
    """
    if features is None:
        features = store.features
    feature_tensor = features if isinstance(features, Tensor) else None
    feature_data = features.data if feature_tensor is not None else np.asarray(features)
    if feature_data.ndim != 2 or feature_data.shape[0] != len(store):
        raise ContractViolation(
            f"features must be (N, k) with N={len(store)}, got {feature_data.shape}")

    u, v, z, in_front = project_points(store.positions, view)
    dirs, excluded = view_directions(store, view)
    visible = in_front & ~excluded
    in_image = visible & (u >= 0) & (u < view.width) & (v >= 0) & (v < view.height)
    if partition is None:
        if not in_image.any():
            raise EmptyViewError("no points project into the view")
        partition = fit_partition(z[in_image], planes, padding)
    p, h, w, d1, in_bounds = locate_points(u, v, z, partition, view)
    included = visible & in_bounds
    idx = np.nonzero(included)[0]
    if idx.size == 0:
        raise EmptyViewError("no points fall inside the frustum")

    grid = (partition.planes, view.height, view.width)
    n_vox = grid[0] * grid[1] * grid[2]
    voxel_idx = (p[idx] * grid[1] + h[idx]) * grid[2] + w[idx]
    d2 = finalize_depth_offsets(voxel_idx, z[idx], n_vox)

    learn_dim = feature_data.shape[1]
    rows = np.concatenate([feature_data[idx].astype(np.float64), dirs[idx]], axis=1)
    vol, weights, den = _aggregate_arrays(rows, d1[idx], d2, voxel_idx, grid,
                                          params, deterministic)
    book = VoxelBookkeeping(
        point_idx=idx, voxel_idx=voxel_idx, weights=weights, weight_sum=den,
        grid=grid, n_points=len(store), learn_dim=learn_dim,
    )

    out_dtype = feature_data.dtype if feature_data.dtype in (np.float32, np.float64) else np.float32
    if feature_tensor is None:
        values = Tensor(vol.astype(out_dtype))
    else:
        values = Tensor(vol.astype(out_dtype), tape=feature_tensor.tape)
        if feature_tensor.tape is not None:
            def vjp(g):
                return (aggregate_backward(g, book).astype(feature_tensor.dtype),)

            values._parents = (feature_tensor,)
            values._vjp = vjp
    return FeatureVolume(values=values, weight_sum=den.reshape(grid),
                         bookkeeping=book, n_contributing=int(idx.size))


# ---------------------------------------------------------------------------
# debug dump (flat binary: int32 LE header C,P,H,W then float32 payload)


def save_volume_dump(volume: FeatureVolume, path) -> None:
    values = volume.values.data.astype("<f4")
    with open(path, "wb") as f:
        f.write(struct.pack("<4i", *values.shape))
        f.write(np.ascontiguousarray(values).tobytes())


def load_volume_dump(path) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.read(16)
        if len(header) != 16:
            raise ContractViolation("volume dump truncated: short header")
        shape = struct.unpack("<4i", header)
        payload = np.frombuffer(f.read(), dtype="<f4")
    if payload.size != int(np.prod(shape)):
        raise ContractViolation("volume dump truncated: payload size mismatch")
    return payload.reshape(shape)
