"""Point-cloud re-rendering, ground-truth heatmaps and 2D-to-3D lifting."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels
from .errors import InvalidInputError, NoSignalError
from .geometry import CameraExtrinsics
from .pointcloud import Intrinsics, PointCloud


@dataclass(frozen=True)
class VirtualCamera:
    extrinsics: CameraExtrinsics
    fov_y: float = math.radians(60.0)
    resolution: tuple[int, int] = (224, 224)

    def __post_init__(self):
        if not (0.0 < self.fov_y < math.pi):
            raise InvalidInputError(f"fov_y must lie in (0, pi), got {self.fov_y}")
        h, w = self.resolution
        if h <= 0 or w <= 0:
            raise InvalidInputError("resolution must be positive")

    @property
    def intrinsics(self) -> Intrinsics:
        h, w = self.resolution
        return Intrinsics.from_fov(self.fov_y, h, w)

    def project(self, points) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return pixel coordinates (u, v) and depth along the viewing axis.

        Points with depth <= 0 are behind the camera; their (u, v) are NaN.
        """
        cam = self.extrinsics.world_to_camera(np.asarray(points, dtype=np.float64).reshape(-1, 3))
        k = self.intrinsics
        depth = -cam[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            front = depth > 0
            safe = np.where(front, depth, 1.0)
            u = np.where(front, k.cx + k.fx * cam[:, 0] / safe, np.nan)
            v = np.where(front, k.cy - k.fy * cam[:, 1] / safe, np.nan)
        return u, v, depth


@dataclass(frozen=True)
class RenderedView:
    rgb: np.ndarray  # (H, W, 3)
    depth: np.ndarray  # (H, W), 0 is background
    valid: bool
    index: np.ndarray  # (H, W) source point index, -1 for background


@dataclass(frozen=True)
class Heatmap:
    values: np.ndarray  # (H, W) nonnegative
    valid: bool


def render_pointcloud(cloud: PointCloud, cam: VirtualCamera, point_radius_px: int = 1) -> RenderedView:
    if len(cloud) == 0:
        raise InvalidInputError("cannot render an empty cloud")
    h, w = cam.resolution
    u, v, depth = cam.project(cloud.positions)
    depth = np.where(np.isfinite(u), depth, 0.0)
    u = np.nan_to_num(u, nan=-1e9)
    v = np.nan_to_num(v, nan=-1e9)
    zbuf, index = kernels.splat_zbuffer(
        np.ascontiguousarray(u), np.ascontiguousarray(v), np.ascontiguousarray(depth), h, w, int(point_radius_px)
    )
    hit = index >= 0
    rgb = np.zeros((h, w, 3))
    rgb[hit] = cloud.colors[index[hit]]
    return RenderedView(rgb=rgb, depth=zbuf, valid=bool(hit.any()), index=index)


def gt_heatmap(point_world, cam: VirtualCamera, sigma_px: float = 1.5, trunc_sigmas: float = 3.0) -> Heatmap:
    if not sigma_px > 0:
        raise InvalidInputError("sigma_px must be positive")
    h, w = cam.resolution
    u, v, depth = cam.project(np.asarray(point_world, dtype=np.float64).reshape(1, 3))
    u, v = float(u[0]), float(v[0])
    if not (depth[0] > 0 and 0.0 <= u <= w - 1 and 0.0 <= v <= h - 1):
        return Heatmap(values=np.zeros((h, w)), valid=False)
    cols = np.arange(w, dtype=np.float64)
    rows = np.arange(h, dtype=np.float64)
    d2 = (cols[None, :] - u) ** 2 + (rows[:, None] - v) ** 2
    # shift by the nearest-pixel distance so tiny sigmas collapse to a one-hot
    values = np.exp(-(d2 - d2.min()) / (2.0 * sigma_px**2))
    values[d2 > (trunc_sigmas * sigma_px) ** 2] = 0.0
    if values.sum() == 0.0:
        values[np.unravel_index(np.argmin(d2), d2.shape)] = 1.0
    values /= values.sum()
    return Heatmap(values=values, valid=True)


def score_3d_candidates(heatmaps, candidates) -> tuple[np.ndarray, np.ndarray]:
    """Score candidate 3D points by summed bilinear heatmap values over valid views.

    ``heatmaps`` is a sequence of ``(Heatmap, VirtualCamera)`` pairs. The best
    candidate is the argmax, with ties going to the lowest candidate index.
    """
    candidates = np.asarray(candidates, dtype=np.float64).reshape(-1, 3)
    scores = np.zeros(candidates.shape[0])
    n_valid = 0
    for hm, cam in heatmaps:
        if not hm.valid:
            continue
        n_valid += 1
        u, v, _ = cam.project(candidates)
        u = np.nan_to_num(u, nan=-1e9)
        v = np.nan_to_num(v, nan=-1e9)
        scores += kernels.bilinear_sample(np.ascontiguousarray(hm.values, dtype=np.float64), u, v)
    if n_valid == 0:
        raise NoSignalError("no valid heatmap to lift")
    best = int(np.argmax(scores))
    return candidates[best].copy(), scores


def candidate_grid(half_extent: float, step: float, center=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Regular cubic grid of candidate points, x-major ordering."""
    n = int(round(2 * half_extent / step)) + 1
    axis = np.linspace(-half_extent, half_extent, n)
    gx, gy, gz = np.meshgrid(axis, axis, axis, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1) + np.asarray(center, dtype=np.float64)


def write_ppm(path, view: RenderedView) -> None:
    """Binary P6 dump of the rendered colors."""
    h, w = view.depth.shape
    data = np.clip(np.rint(view.rgb * 255.0), 0, 255).astype(np.uint8)
    with open(Path(path), "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    # header is four whitespace-separated tokens followed by exactly one whitespace byte
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while not raw[pos : pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    pos += 1
    if tokens[0] != b"P6":
        raise InvalidInputError(f"{path}: not a binary PPM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise InvalidInputError("only 8-bit PPM is supported")
    data = np.frombuffer(raw[pos : pos + w * h * 3], dtype=np.uint8)
    return data.reshape(h, w, 3).astype(np.float64) / 255.0
