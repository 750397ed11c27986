"""Trainable point-cloud scene representation and PLY ingestion.

Each point carries an 8-dim learnable appearance vector; the first five
slots start at 0.5 and the last three at the point's RGB in [0, 1].
The 3-dim unit view direction is recomputed per view and never trained.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import CameraView
from .errors import ContractViolation, FormatError

APPEARANCE_DIM = 8
RGB_SLOTS = slice(5, 8)
_CENTER_EPS = 1e-9

_PLY_TYPE = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}


def init_appearance(rgb: np.ndarray) -> np.ndarray:
    """Appearance init rule: five 0.5 slots followed by the RGB slots."""
    rgb = np.asarray(rgb, dtype=np.float32).reshape(-1, 3)
    feats = np.full((rgb.shape[0], APPEARANCE_DIM), 0.5, dtype=np.float32)
    feats[:, RGB_SLOTS] = rgb
    return feats


@dataclass
class FeaturePoint:
    position: np.ndarray  # (3,) world
    appearance: np.ndarray  # (8,) learnable


@dataclass
class ViewFeature:
    """Appearance (learnable) concatenated with the unit view direction (fixed)."""

    appearance: np.ndarray
    view_direction: np.ndarray

    @property
    def full_feature(self) -> np.ndarray:
        return np.concatenate([self.appearance, self.view_direction.astype(np.float32)])


class PointCloudStore:
    """Point positions, their raw colors, and the learnable feature matrix.

    Point indices are stable for the lifetime of a store; gradients and
    optimizer moments address points by row.
    """

    def __init__(self, positions, rgb, features=None):
        self.positions = np.ascontiguousarray(positions, dtype=np.float64).reshape(-1, 3)
        self.rgb = np.ascontiguousarray(rgb, dtype=np.float32).reshape(-1, 3)
        if self.rgb.shape[0] != self.positions.shape[0]:
            raise ContractViolation("positions and rgb must have the same length")
        if features is None:
            self.features = init_appearance(self.rgb)
        else:
            self.features = np.ascontiguousarray(features, dtype=np.float32)
            if self.features.shape != (self.positions.shape[0], APPEARANCE_DIM):
                raise ContractViolation(
                    f"features must be (N, {APPEARANCE_DIM}), got {self.features.shape}"
                )
        if not np.isfinite(self.features).all():
            raise ContractViolation("appearance features must be finite")

    def __len__(self) -> int:
        return self.positions.shape[0]

    def point(self, i: int) -> FeaturePoint:
        return FeaturePoint(position=self.positions[i], appearance=self.features[i])


def view_directions(store: PointCloudStore, view: CameraView):
    """Unit camera-to-point directions in world coordinates.

    Returns (dirs (N, 3) float64, excluded (N,) bool); points closer
    than 1e-9 to the camera center get a zero direction and the flag.
    """
    delta = store.positions - view.camera_center
    dist = np.linalg.norm(delta, axis=1)
    excluded = dist < _CENTER_EPS
    safe = np.where(excluded, 1.0, dist)
    dirs = delta / safe[:, None]
    dirs[excluded] = 0.0
    return dirs, excluded


def view_features(store: PointCloudStore, view: CameraView):
    """Per-point ViewFeature list for one camera."""
    dirs, excluded = view_directions(store, view)
    return [ViewFeature(appearance=store.features[i], view_direction=dirs[i])
            for i in range(len(store))], excluded


def subsample(store: PointCloudStore, fraction: float, seed: int) -> PointCloudStore:
    """Uniform random subset (without replacement), deterministic under seed.

    The new store copies positions, colors, and the current feature
    values, so its parameters are independent of the source store.
    """
    if not (0 < fraction <= 1):
        raise ContractViolation(f"fraction must be in (0, 1], got {fraction}")
    n = len(store)
    count = int(round(n * fraction))
    count = max(1, min(n, count))
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(n, size=count, replace=False))
    return PointCloudStore(
        positions=store.positions[idx].copy(),
        rgb=store.rgb[idx].copy(),
        features=store.features[idx].copy(),
    )


# ---------------------------------------------------------------------------
# PLY I/O


def _parse_header(f):
    """Read a PLY header; returns (fmt, vertex_count, properties, data_offset)."""

    def next_line(lineno):
        raw = f.readline()
        if not raw:
            raise FormatError(f"ply header truncated at line {lineno}")
        try:
            return raw.decode("ascii").strip()
        except UnicodeDecodeError as e:
            raise FormatError(f"ply header line {lineno} is not ascii") from e

    if next_line(1) != "ply":
        raise FormatError("ply parse error at line 1: missing 'ply' magic")
    fmt = None
    count = None
    props: list[tuple[str, str]] = []
    in_vertex = False
    lineno = 1
    while True:
        lineno += 1
        line = next_line(lineno)
        if not line or line.startswith("comment"):
            continue
        parts = line.split()
        if parts[0] == "format":
            if len(parts) < 2 or parts[1] not in ("ascii", "binary_little_endian"):
                raise FormatError(f"ply parse error at line {lineno}: unsupported format {line!r}")
            fmt = parts[1]
        elif parts[0] == "element":
            if len(parts) != 3:
                raise FormatError(f"ply parse error at line {lineno}: bad element line")
            in_vertex = parts[1] == "vertex"
            if in_vertex:
                count = int(parts[2])
        elif parts[0] == "property":
            if not in_vertex:
                continue
            if parts[1] == "list":
                raise FormatError(f"ply parse error at line {lineno}: list properties unsupported")
            if len(parts) != 3 or parts[1] not in _PLY_TYPE:
                raise FormatError(f"ply parse error at line {lineno}: bad property {line!r}")
            props.append((parts[2], _PLY_TYPE[parts[1]]))
        elif parts[0] == "end_header":
            break
        elif parts[0] in ("ply",):
            raise FormatError(f"ply parse error at line {lineno}: unexpected {parts[0]!r}")
    if fmt is None:
        raise FormatError("ply header has no format line")
    if count is None:
        raise FormatError("ply header has no vertex element")
    return fmt, count, props


def load_ply(path) -> PointCloudStore:
    """Read an ASCII or binary-little-endian PLY with x,y,z and red,green,blue."""
    with open(path, "rb") as f:
        fmt, count, props = _parse_header(f)
        names = [name for name, _ in props]
        for required in ("x", "y", "z", "red", "green", "blue"):
            if required not in names:
                raise FormatError(f"missing property {required}")
        if fmt == "binary_little_endian":
            dtype = np.dtype([(name, "<" + code) for name, code in props])
            raw = f.read(dtype.itemsize * count)
            if len(raw) < dtype.itemsize * count:
                raise FormatError(f"ply payload truncated: expected {count} vertices")
            rec = np.frombuffer(raw, dtype=dtype, count=count)
        else:
            rows = []
            for i in range(count):
                line = f.readline()
                if not line:
                    raise FormatError(f"ply payload truncated at vertex {i}")
                values = line.split()
                if len(values) != len(props):
                    raise FormatError(f"ply vertex {i} has {len(values)} values, expected {len(props)}")
                rows.append(values)
            rec = np.zeros(count, dtype=np.dtype([(name, "<" + code) for name, code in props]))
            for j, (name, _) in enumerate(props):
                rec[name] = np.array([row[j] for row in rows], dtype=np.float64)
    positions = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float64)
    rgb = np.stack([rec["red"], rec["green"], rec["blue"]], axis=1).astype(np.float32) / 255.0
    return PointCloudStore(positions=positions, rgb=rgb)


def save_ply(store: PointCloudStore, path) -> None:
    """Write binary little-endian PLY: double x,y,z plus uchar red,green,blue.

    Double positions keep save -> load bit-exact; colors come from the
    store's raw RGB (quantized to a byte).
    """
    n = len(store)
    header = (
        "ply\n"
        "format binary_little_endian 1.0\n"
        f"element vertex {n}\n"
        "property double x\n"
        "property double y\n"
        "property double z\n"
        "property uchar red\n"
        "property uchar green\n"
        "property uchar blue\n"
        "end_header\n"
    )
    rec = np.zeros(n, dtype=np.dtype([("x", "<f8"), ("y", "<f8"), ("z", "<f8"),
                                      ("red", "u1"), ("green", "u1"), ("blue", "u1")]))
    rec["x"], rec["y"], rec["z"] = store.positions.T
    bytes_rgb = np.clip(np.rint(store.rgb * 255.0), 0, 255).astype(np.uint8)
    rec["red"], rec["green"], rec["blue"] = bytes_rgb.T
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(rec.tobytes())
