"""Point clouds: RGB-D back-projection, aggregation, sampling, recentering and PLY io."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import EmptySceneError, InvalidInputError
from .geometry import CameraExtrinsics


@dataclass(frozen=True)
class PointCloud:
    positions: np.ndarray  # (N, 3) world frame, meters
    colors: np.ndarray  # (N, 3) in [0, 1]

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        col = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        if pos.shape[0] != col.shape[0]:
            raise InvalidInputError(
                f"positions ({pos.shape[0]}) and colors ({col.shape[0]}) differ in length"
            )
        if not (np.all(np.isfinite(pos)) and np.all(np.isfinite(col))):
            raise InvalidInputError("point cloud contains non-finite entries")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "colors", col)

    def __len__(self) -> int:
        return self.positions.shape[0]

    @classmethod
    def empty(cls) -> "PointCloud":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)))

    def features(self) -> np.ndarray:
        """The (N, 6) xyz+rgb matrix consumed by the exploration policy."""
        return np.concatenate([self.positions, self.colors], axis=1)

    def select(self, index) -> "PointCloud":
        return PointCloud(self.positions[index], self.colors[index])


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidInputError("focal lengths must be positive")

    @classmethod
    def from_fov(cls, fov_y: float, height: int, width: int) -> "Intrinsics":
        f = (height / 2.0) / np.tan(fov_y / 2.0)
        return cls(fx=f, fy=f, cx=width / 2.0, cy=height / 2.0)


@dataclass(frozen=True)
class RgbdView:
    """A physical RGB-D observation. ``extrinsics`` maps camera to world as R^T p + t."""

    rgb: np.ndarray  # (H, W, 3)
    depth: np.ndarray  # (H, W), 0 marks invalid
    intrinsics: Intrinsics
    extrinsics: CameraExtrinsics

    def __post_init__(self):
        h, w = np.shape(self.depth)
        if h <= 0 or w <= 0:
            raise InvalidInputError("empty image")
        if np.shape(self.rgb) != (h, w, 3):
            raise InvalidInputError(f"rgb shape {np.shape(self.rgb)} does not match depth {(h, w)}")


@dataclass(frozen=True)
class Workspace:
    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.min, dtype=np.float64)
        hi = np.asarray(self.max, dtype=np.float64)
        if lo.shape != (3,) or hi.shape != (3,) or not np.all(lo < hi):
            raise InvalidInputError("workspace needs min < max componentwise")
        object.__setattr__(self, "min", lo)
        object.__setattr__(self, "max", hi)

    def contains(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return np.all((points >= self.min) & (points <= self.max), axis=1)

    @classmethod
    def unbounded(cls) -> "Workspace":
        return cls(np.full(3, -np.inf), np.full(3, np.inf))


def backproject(view: RgbdView) -> PointCloud:
    depth = np.asarray(view.depth, dtype=np.float64)
    rows, cols = np.nonzero(depth > 0)
    if rows.size == 0:
        return PointCloud.empty()
    d = depth[rows, cols]
    k = view.intrinsics
    cam = np.stack(
        [(cols - k.cx) * d / k.fx, -(rows - k.cy) * d / k.fy, -d],
        axis=1,
    )
    world = view.extrinsics.camera_to_world(cam)
    colors = np.asarray(view.rgb, dtype=np.float64)[rows, cols]
    return PointCloud(world, colors)


def aggregate(clouds, ws: Workspace) -> PointCloud:
    clouds = list(clouds)
    if not clouds:
        raise InvalidInputError("aggregate needs at least one cloud")
    pos = np.concatenate([c.positions for c in clouds], axis=0)
    col = np.concatenate([c.colors for c in clouds], axis=0)
    keep = ws.contains(pos)
    if not np.any(keep):
        raise EmptySceneError("no points left inside the workspace")
    return PointCloud(pos[keep], col[keep])


def downsample(cloud: PointCloud, n: int, seed: int) -> PointCloud:
    """Uniformly sample exactly ``n`` points; with replacement only when the cloud is smaller."""
    if n <= 0:
        raise InvalidInputError("downsample size must be positive")
    if len(cloud) == 0:
        raise EmptySceneError("cannot downsample an empty cloud")
    rng = np.random.default_rng(seed)
    replace = len(cloud) < n
    index = rng.choice(len(cloud), size=n, replace=replace)
    return cloud.select(index)


def recenter_scale_crop(cloud: PointCloud, center, half_extent: float, scale: float = 1.0) -> PointCloud:
    if not (half_extent > 0 and scale > 0):
        raise InvalidInputError("half_extent and scale must be positive")
    pos = (cloud.positions - np.asarray(center, dtype=np.float64)) * scale
    keep = np.all(np.abs(pos) <= half_extent, axis=1)
    if not np.any(keep):
        raise EmptySceneError("crop removed every point")
    return PointCloud(pos[keep], cloud.colors[keep])


# ASCII PLY: a fixed header followed by one "x y z r g b" line per point,
# positions as %.17g floats and colors as 0-255 integers.
_PLY_HEADER = (
    "ply\n"
    "format ascii 1.0\n"
    "element vertex {n}\n"
    "property double x\n"
    "property double y\n"
    "property double z\n"
    "property uchar red\n"
    "property uchar green\n"
    "property uchar blue\n"
    "end_header\n"
)


def write_ply(path, cloud: PointCloud) -> None:
    rgb = np.clip(np.rint(cloud.colors * 255.0), 0, 255).astype(np.int64)
    lines = [_PLY_HEADER.format(n=len(cloud))]
    for p, c in zip(cloud.positions, rgb):
        lines.append(f"{p[0]:.17g} {p[1]:.17g} {p[2]:.17g} {c[0]} {c[1]} {c[2]}\n")
    Path(path).write_text("".join(lines), encoding="ascii")


def read_ply(path) -> PointCloud:
    text = Path(path).read_text(encoding="ascii").splitlines()
    if not text or text[0] != "ply":
        raise InvalidInputError(f"{path}: not an ASCII PLY file")
    n = None
    body_start = None
    for i, line in enumerate(text):
        if line.startswith("element vertex"):
            n = int(line.split()[2])
        if line == "end_header":
            body_start = i + 1
            break
    if n is None or body_start is None:
        raise InvalidInputError(f"{path}: malformed PLY header")
    rows = [line.split() for line in text[body_start : body_start + n]]
    if len(rows) != n:
        raise InvalidInputError(f"{path}: expected {n} vertices, found {len(rows)}")
    if n == 0:
        return PointCloud.empty()
    arr = np.array(rows, dtype=np.float64)
    return PointCloud(arr[:, :3], arr[:, 3:6] / 255.0)
