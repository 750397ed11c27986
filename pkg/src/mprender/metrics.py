"""z-buffer baseline renderer plus PSNR and SSIM."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .camera import CameraView
from .errors import ContractViolation
from .pointcloud import PointCloudStore

PSNR_CAP_DB = 99.0


@dataclass
class ZBufferImage:
    color: np.ndarray  # (3, H, W)
    depth: np.ndarray  # (H, W), +inf where empty
    mask: np.ndarray   # (H, W) bool


@dataclass
class MetricReport:
    psnr: float
    ssim: float


def zbuffer_render(store: PointCloudStore, view: CameraView, splat_size: int = 1,
                   background=(0.0, 0.0, 0.0)) -> ZBufferImage:
    """Project points and keep the nearest one per pixel.

    Each point covers a splat_size x splat_size square of pixels around
    its projection; colors come from the store's raw RGB.  Depth ties go
    to the lower point index.
    """
    if splat_size < 1 or splat_size % 2 == 0:
        raise ContractViolation(f"splat_size must be odd and >= 1, got {splat_size}")
    from .camera import project_points  # local import keeps module deps one-way

    h_img, w_img = view.height, view.width
    color = np.tile(np.asarray(background, dtype=np.float32).reshape(3, 1, 1),
                    (1, h_img, w_img))
    depth = np.full((h_img, w_img), np.inf, dtype=np.float64)
    mask = np.zeros((h_img, w_img), dtype=bool)

    u, v, z, in_front = project_points(store.positions, view)
    idx = np.nonzero(in_front)[0]
    if idx.size == 0:
        return ZBufferImage(color=color, depth=depth, mask=mask)
    px = np.floor(u[idx]).astype(np.int64)
    py = np.floor(v[idx]).astype(np.int64)
    half = splat_size // 2

    cells_x, cells_y, cells_z, cells_i = [], [], [], []
    for dy in range(-half, half + 1):
        for dx in range(-half, half + 1):
            cells_x.append(px + dx)
            cells_y.append(py + dy)
            cells_z.append(z[idx])
            cells_i.append(idx)
    cx = np.concatenate(cells_x)
    cy = np.concatenate(cells_y)
    cz = np.concatenate(cells_z)
    ci = np.concatenate(cells_i)
    ok = (cx >= 0) & (cx < w_img) & (cy >= 0) & (cy < h_img)
    cx, cy, cz, ci = cx[ok], cy[ok], cz[ok], ci[ok]
    if cx.size == 0:
        return ZBufferImage(color=color, depth=depth, mask=mask)

    flat = cy * w_img + cx
    order = np.lexsort((ci, cz, flat))
    flat, cz, ci = flat[order], cz[order], ci[order]
    first = np.ones(flat.size, dtype=bool)
    first[1:] = flat[1:] != flat[:-1]
    win_pix, win_z, win_i = flat[first], cz[first], ci[first]

    depth.reshape(-1)[win_pix] = win_z
    mask.reshape(-1)[win_pix] = True
    color.reshape(3, -1)[:, win_pix] = store.rgb[win_i].T
    return ZBufferImage(color=color, depth=depth, mask=mask)


def psnr(a, b, max_value: float = 1.0, cap_db: float = PSNR_CAP_DB) -> float:
    """10 * log10(max^2 / MSE), capped at cap_db (identical images hit the cap)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractViolation(f"psnr shapes differ: {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0.0:
        return cap_db
    return min(cap_db, 10.0 * np.log10(max_value * max_value / mse))


def _gaussian_kernel(window: int, sigma: float) -> np.ndarray:
    r = np.arange(window, dtype=np.float64) - (window - 1) / 2.0
    g = np.exp(-0.5 * (r / sigma) ** 2)
    k = np.outer(g, g)
    return k / k.sum()


def _to_gray(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        return img.mean(axis=0)
    if img.ndim == 2:
        return img
    raise ContractViolation(f"ssim expects (3, H, W) or (H, W), got shape {img.shape}")


def ssim(a, b, window: int = 11, k1: float = 0.01, k2: float = 0.03,
         sigma: float = 1.5, max_value: float = 1.0) -> float:
    """Mean local structural similarity over valid Gaussian windows."""
    x = _to_gray(a)
    y = _to_gray(b)
    if x.shape != y.shape:
        raise ContractViolation(f"ssim shapes differ: {x.shape} vs {y.shape}")
    if min(x.shape) < window:
        raise ContractViolation(
            f"image {x.shape} smaller than the {window}x{window} ssim window")
    kern = _gaussian_kernel(window, sigma)

    def filt(img):
        win = sliding_window_view(img, (window, window))
        return np.tensordot(win, kern, axes=((2, 3), (0, 1)))

    c1 = (k1 * max_value) ** 2
    c2 = (k2 * max_value) ** 2
    mu_x = filt(x)
    mu_y = filt(y)
    var_x = filt(x * x) - mu_x * mu_x
    var_y = filt(y * y) - mu_y * mu_y
    cov = filt(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    return float(np.mean(num / den))


def evaluate(prediction, target) -> MetricReport:
    return MetricReport(psnr=psnr(prediction, target), ssim=ssim(prediction, target))
