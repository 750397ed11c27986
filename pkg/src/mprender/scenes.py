"""Procedural ground-truth scenes: analytic primitives, a ray-cast
oracle renderer, and noisy surface-cloud sampling.

Shading is flat albedo so point colors and pixel colors are directly
comparable; an optional Phong-style highlight on spheres exercises
view-dependent appearance.  Depth noise is applied along the viewing
ray, modelling an RGBD sensor.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .camera import CameraView, make_camera, pixel_rays
from .errors import ContractViolation, EmptyViewError, FormatError
from .pointcloud import PointCloudStore, subsample

RAY_EPS = 1e-9
_LIGHT_DIR = np.array([-0.35, 0.45, -1.0]) / np.linalg.norm([-0.35, 0.45, -1.0])
_SPECULAR_EXP = 32.0

_AXES = {"x": 0, "y": 1, "z": 2}


@dataclass
class Sphere:
    center: np.ndarray
    radius: float
    albedo: np.ndarray
    specular: float = 0.0

    kind = "sphere"


@dataclass
class Box:
    """Axis-aligned box given by center and full extents."""

    center: np.ndarray
    size: np.ndarray
    albedo: np.ndarray

    kind = "box"


@dataclass
class Rect:
    """Axis-aligned rectangle perpendicular to `axis` (a finite backdrop)."""

    center: np.ndarray
    size: tuple[float, float]
    albedo: np.ndarray
    axis: str = "z"

    kind = "rect"


@dataclass
class NoiseSpec:
    depth_sigma: float = 0.0
    density_fraction: float = 1.0

    def __post_init__(self):
        if self.depth_sigma < 0:
            raise ContractViolation(f"depth_sigma must be >= 0, got {self.depth_sigma}")
        if not (0 < self.density_fraction <= 1):
            raise ContractViolation(
                f"density_fraction must be in (0, 1], got {self.density_fraction}")


@dataclass
class SceneSpec:
    primitives: list
    cameras: list[CameraView]
    seed: int = 0
    specular_enabled: bool = False

    def __post_init__(self):
        if not self.primitives:
            raise ContractViolation("a scene needs at least one primitive")
        if not self.cameras:
            raise ContractViolation("a scene needs at least one camera")
        for prim in self.primitives:
            alb = np.asarray(prim.albedo, dtype=np.float64)
            if alb.min() < 0 or alb.max() > 1:
                raise ContractViolation(f"albedo {alb} outside [0, 1]^3")


def _vec(x):
    return np.asarray(x, dtype=np.float64)


def primitive_from_dict(doc: dict):
    kind = doc.get("kind")
    if kind == "sphere":
        return Sphere(center=_vec(doc["center"]), radius=float(doc["radius"]),
                      albedo=_vec(doc["albedo"]), specular=float(doc.get("specular", 0.0)))
    if kind == "box":
        return Box(center=_vec(doc["center"]), size=_vec(doc["size"]), albedo=_vec(doc["albedo"]))
    if kind == "rect":
        return Rect(center=_vec(doc["center"]), size=tuple(doc["size"]),
                    albedo=_vec(doc["albedo"]), axis=doc.get("axis", "z"))
    raise FormatError(f"unknown primitive kind {kind!r}")


def primitive_to_dict(prim) -> dict:
    doc = {"kind": prim.kind, "albedo": [float(v) for v in prim.albedo]}
    if prim.kind == "sphere":
        doc.update(center=[float(v) for v in prim.center], radius=prim.radius,
                   specular=prim.specular)
    elif prim.kind == "box":
        doc.update(center=[float(v) for v in prim.center],
                   size=[float(v) for v in prim.size])
    else:
        doc.update(center=[float(v) for v in prim.center],
                   size=[float(v) for v in prim.size], axis=prim.axis)
    return doc


def scene_from_dict(doc: dict) -> SceneSpec:
    if "preset" in doc:
        spec = occlusion_case(doc["preset"])
        spec.seed = int(doc.get("seed", spec.seed))
        return spec
    for key in ("primitives", "cameras"):
        if key not in doc:
            raise FormatError(f"scene spec missing field '{key}'")
    return SceneSpec(
        primitives=[primitive_from_dict(p) for p in doc["primitives"]],
        cameras=[CameraView.from_dict(c) for c in doc["cameras"]],
        seed=int(doc.get("seed", 0)),
        specular_enabled=bool(doc.get("specular_enabled", False)),
    )


def scene_to_dict(spec: SceneSpec) -> dict:
    return {
        "primitives": [primitive_to_dict(p) for p in spec.primitives],
        "cameras": [c.to_dict() for c in spec.cameras],
        "seed": spec.seed,
        "specular_enabled": spec.specular_enabled,
    }


def load_scene(path) -> SceneSpec:
    with open(path, "r", encoding="utf-8") as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise FormatError(f"scene file {path}: {e}") from e
    return scene_from_dict(doc)


# ---------------------------------------------------------------------------
# ray casting


def _intersect_sphere(origin, dirs, sph: Sphere):
    oc = origin - sph.center
    a = np.einsum("ij,ij->i", dirs, dirs)
    b = 2.0 * dirs @ oc
    c = oc @ oc - sph.radius ** 2
    disc = b * b - 4 * a * c
    hit = disc >= 0
    sq = np.sqrt(np.where(hit, disc, 0.0))
    t0 = (-b - sq) / (2 * a)
    t1 = (-b + sq) / (2 * a)
    t = np.where(t0 > RAY_EPS, t0, t1)
    return np.where(hit & (t > RAY_EPS), t, np.inf)


def _intersect_box(origin, dirs, box: Box):
    lo = box.center - box.size / 2.0
    hi = box.center + box.size / 2.0
    with np.errstate(divide="ignore", invalid="ignore"):
        t_lo = (lo - origin) / dirs
        t_hi = (hi - origin) / dirs
    # rays parallel to a slab: inside iff origin between the slab planes
    par = dirs == 0.0
    inside = (origin >= lo) & (origin <= hi)
    t_lo = np.where(par, np.where(inside, -np.inf, np.inf), t_lo)
    t_hi = np.where(par, np.where(inside, np.inf, -np.inf), t_hi)
    near = np.maximum.reduce(np.minimum(t_lo, t_hi), axis=1)
    far = np.minimum.reduce(np.maximum(t_lo, t_hi), axis=1)
    hit = (far >= np.maximum(near, RAY_EPS))
    t = np.where(near > RAY_EPS, near, far)
    return np.where(hit & (t > RAY_EPS), t, np.inf)


def _intersect_rect(origin, dirs, rect: Rect):
    ax = _AXES[rect.axis]
    others = [i for i in range(3) if i != ax]
    d_ax = dirs[:, ax]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (rect.center[ax] - origin[ax]) / d_ax
    t = np.where(d_ax == 0.0, np.inf, t)
    pts = origin + t[:, None] * dirs
    half = np.asarray(rect.size, dtype=np.float64) / 2.0
    on = ((np.abs(pts[:, others[0]] - rect.center[others[0]]) <= half[0])
          & (np.abs(pts[:, others[1]] - rect.center[others[1]]) <= half[1]))
    return np.where(on & (t > RAY_EPS), t, np.inf)


_INTERSECT = {"sphere": _intersect_sphere, "box": _intersect_box, "rect": _intersect_rect}


def raycast_render(spec: SceneSpec, view: CameraView):
    """Exact reference render: (image (3, H, W) float32, depth (H, W) float64).

    Per-pixel nearest analytic intersection, flat albedo, black
    background with +inf depth.
    """
    origin, dirs = pixel_rays(view)
    flat_dirs = dirs.reshape(-1, 3)
    n = flat_dirs.shape[0]
    best_t = np.full(n, np.inf)
    best_prim = np.full(n, -1, dtype=np.int64)
    for k, prim in enumerate(spec.primitives):
        t = _INTERSECT[prim.kind](origin, flat_dirs, prim)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best_prim[closer] = k

    image = np.zeros((n, 3), dtype=np.float64)
    for k, prim in enumerate(spec.primitives):
        sel = best_prim == k
        if not sel.any():
            continue
        image[sel] = prim.albedo
        if (spec.specular_enabled and prim.kind == "sphere" and prim.specular > 0):
            pts = origin + best_t[sel, None] * flat_dirs[sel]
            normal = (pts - prim.center) / prim.radius
            view_dir = -flat_dirs[sel] / np.linalg.norm(flat_dirs[sel], axis=1, keepdims=True)
            refl = 2.0 * (normal @ _LIGHT_DIR)[:, None] * normal - _LIGHT_DIR
            gloss = np.clip(np.einsum("ij,ij->i", refl, view_dir), 0.0, None) ** _SPECULAR_EXP
            image[sel] = np.clip(image[sel] + prim.specular * gloss[:, None], 0.0, 1.0)

    h, w = view.height, view.width
    return (np.ascontiguousarray(image.T.reshape(3, h, w)).astype(np.float32),
            best_t.reshape(h, w))


def sample_cloud(spec: SceneSpec, views, points_per_view: int, noise: NoiseSpec,
                 seed: int) -> PointCloudStore:
    """Lift random finite-depth pixels into 3D with optional ray-depth noise.

    Colors come from the oracle image; density_fraction subsampling is
    applied to the pooled cloud at the end.
    """
    if points_per_view < 1:
        raise ContractViolation(f"points_per_view must be >= 1, got {points_per_view}")
    rng = np.random.default_rng(seed)
    positions, colors = [], []
    for vi, view in enumerate(views):
        image, depth = raycast_render(spec, view)
        origin, dirs = pixel_rays(view)
        finite = np.isfinite(depth.reshape(-1))
        avail = np.nonzero(finite)[0]
        if avail.size == 0:
            warnings.warn(f"view {vi} sees no geometry; skipped")
            continue
        take = min(points_per_view, avail.size)
        chosen = avail[rng.choice(avail.size, size=take, replace=False)]
        z = depth.reshape(-1)[chosen]
        if noise.depth_sigma > 0:
            z = z + rng.normal(0.0, noise.depth_sigma, size=take)
        pts = origin + z[:, None] * dirs.reshape(-1, 3)[chosen]
        positions.append(pts)
        colors.append(image.reshape(3, -1)[:, chosen].T)
    if not positions:
        raise EmptyViewError("no view sees any geometry")
    store = PointCloudStore(positions=np.concatenate(positions),
                            rgb=np.concatenate(colors))
    if noise.density_fraction < 1.0:
        store = subsample(store, noise.density_fraction,
                          seed=int(rng.integers(0, 2 ** 31)))
    return store


# ---------------------------------------------------------------------------
# canned cases

# front box face at depth 2.0, backdrop at 2.5: separation 0.5
BOX_PLANE_DEPTH_GAP = 0.5
_PRESETS = ("box-plane",)


def box_plane_rig(n_views: int = 9, width: int = 64, height: int = 64,
                  focal: float = 70.0) -> list[CameraView]:
    """Cameras strung along x, all looking down +z at the box."""
    offsets = np.linspace(-0.4, 0.4, n_views)
    return [make_camera(width, height, focal, position=(x, 0.0, 0.0)) for x in offsets]


def occlusion_case(spec_id: str) -> SceneSpec:
    """Canned near/far pair whose noisy clouds interleave in depth."""
    if spec_id != "box-plane":
        raise ContractViolation(
            f"unknown scene id {spec_id!r}; available: {', '.join(_PRESETS)}")
    box = Box(center=_vec([0.0, 0.0, 2.15]), size=_vec([0.6, 0.6, 0.3]),
              albedo=_vec([0.85, 0.25, 0.2]))
    backdrop = Rect(center=_vec([0.0, 0.0, 2.5]), size=(7.0, 7.0),
                    albedo=_vec([0.2, 0.35, 0.8]), axis="z")
    return SceneSpec(primitives=[box, backdrop], cameras=box_plane_rig(), seed=0)
