"""Procedural tabletop scenes observed by four physical RGB-D cameras.

Every scene is a table with one target sphere and, depending on the task
family, a wall, a distractor sphere or an open-sided box around the target.
Dense surface samples are rendered by the physical cameras (front, left and
right shoulder, wrist); the scene cloud is the workspace-cropped aggregation
of their back-projections, as a real multi-camera rig would produce.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from ..errors import SceneGenerationError
from ..geometry import look_at_from_vectors, spherical_to_cartesian
from ..pointcloud import (
    Intrinsics,
    PointCloud,
    RgbdView,
    Workspace,
    aggregate,
    backproject,
    read_ply,
    recenter_scale_crop,
    write_ply,
)
from ..render import VirtualCamera, render_pointcloud

WORKSPACE = Workspace(np.array([-0.45, -0.45, -0.01]), np.array([0.45, 0.45, 0.5]))
TABLE_COLOR = (0.55, 0.40, 0.25)
WALL_COLOR = (0.60, 0.60, 0.60)
BOX_COLOR = (0.35, 0.45, 0.55)
COLORS = {
    "red": (0.90, 0.10, 0.10),
    "green": (0.10, 0.80, 0.20),
    "blue": (0.15, 0.30, 0.95),
}
SPHERE_RADIUS = 0.03
PHYSICAL_FOV = math.radians(60.0)
# openings of the planted-reveal box, kept off the phi = 0 / 2pi seam
REVEAL_AZIMUTHS = tuple(math.radians(30.0 + 60.0 * k) for k in range(6))
REVEAL_ELEVATION = math.radians(15.0)
MAX_ATTEMPTS = 100


@dataclass(frozen=True)
class TaskSpec:
    name: str
    family: str  # reach-occluded | reach-clear | two-target | reveal
    color: str
    distractor: str | None
    instruction_id: int
    rotation_bins: tuple[int, int, int]
    gripper: int
    collision: int


def _roster() -> tuple[TaskSpec, ...]:
    names = list(COLORS)
    specs = []
    for i, c in enumerate(names):
        specs.append(TaskSpec(f"reach-clear-{c}", "reach-clear", c, None, i, (0, 0, 12 * i), 1, 0))
    for i, c in enumerate(names):
        specs.append(TaskSpec(f"reach-occluded-{c}", "reach-occluded", c, None, i, (0, 18, 12 * i + 6), 1, 1))
    for i, c in enumerate(names):
        other = names[(i + 1) % len(names)]
        specs.append(TaskSpec(f"two-target-{c}", "two-target", c, other, 3 + i, (36, 0, 12 * i), 0, 0))
    for i, c in enumerate(names):
        specs.append(TaskSpec(f"reveal-{c}", "reveal", c, None, i, (0, 9, 36 + 6 * i), 0, 1))
    return tuple(specs)


TASKS: tuple[TaskSpec, ...] = _roster()
TASK_INDEX = {t.name: i for i, t in enumerate(TASKS)}
N_INSTRUCTIONS = 6
INSTRUCTION_TEXT = ("reach the red ball", "reach the green ball", "reach the blue ball",
                    "pick the red ball", "pick the green ball", "pick the blue ball")


def task_names(family: str | None = None) -> list[str]:
    return [t.name for t in TASKS if family is None or t.family == family]


@dataclass
class Scene:
    cloud: PointCloud
    target_pos: np.ndarray
    gt_rotation_bins: tuple[int, int, int]
    gt_gripper: int
    gt_collision: int
    occluders: list[dict]
    fixed_views: list[RgbdView]
    task_id: int
    instruction_id: int
    seed: int
    task: str = ""
    target_color: tuple = ()
    occluded_view: str | None = None
    reveal_direction: np.ndarray | None = None
    fixed_view_names: tuple = field(default=())

    def metadata(self) -> dict:
        return {
            "task": self.task,
            "task_id": self.task_id,
            "instruction_id": self.instruction_id,
            "seed": self.seed,
            "target_pos": [float(x) for x in self.target_pos],
            "target_color": [float(x) for x in self.target_color],
            "gt_rotation_bins": list(self.gt_rotation_bins),
            "gt_gripper": self.gt_gripper,
            "gt_collision": self.gt_collision,
            "occluders": self.occluders,
            "occluded_view": self.occluded_view,
            "reveal_direction": None if self.reveal_direction is None else [float(x) for x in self.reveal_direction],
            "n_points": len(self.cloud),
        }


def save_scene(scene: Scene, json_path) -> None:
    """Write scene metadata as JSON plus the cloud as an ASCII PLY sidecar.

    Fixed RGB-D views are not stored; they are reproducible from (task, seed).
    """
    json_path = Path(json_path)
    ply_path = json_path.with_suffix(".ply")
    meta = scene.metadata()
    meta["cloud"] = ply_path.name
    json_path.write_text(json.dumps(meta, indent=2, sort_keys=True), encoding="utf-8")
    write_ply(ply_path, scene.cloud)


def load_scene(json_path) -> Scene:
    json_path = Path(json_path)
    meta = json.loads(json_path.read_text(encoding="utf-8"))
    cloud = read_ply(json_path.parent / meta["cloud"])
    rd = meta.get("reveal_direction")
    return Scene(
        cloud=cloud,
        target_pos=np.array(meta["target_pos"]),
        gt_rotation_bins=tuple(meta["gt_rotation_bins"]),
        gt_gripper=int(meta["gt_gripper"]),
        gt_collision=int(meta["gt_collision"]),
        occluders=meta["occluders"],
        fixed_views=[],
        task_id=int(meta["task_id"]),
        instruction_id=int(meta["instruction_id"]),
        seed=int(meta["seed"]),
        task=meta["task"],
        target_color=tuple(meta["target_color"]),
        occluded_view=meta.get("occluded_view"),
        reveal_direction=None if rd is None else np.array(rd),
    )


# --- surface sampling -------------------------------------------------------


def _sphere_points(center, radius, n=700):
    i = np.arange(n) + 0.5
    phi = np.arccos(1.0 - 2.0 * i / n)
    theta = math.pi * (1.0 + 5.0**0.5) * i
    pts = np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], axis=1)
    return pts * radius + np.asarray(center)


def _rect_points(origin, edge_u, edge_v, spacing=0.004):
    nu = max(2, int(math.ceil(np.linalg.norm(edge_u) / spacing)) + 1)
    nv = max(2, int(math.ceil(np.linalg.norm(edge_v) / spacing)) + 1)
    a, b = np.meshgrid(np.linspace(0, 1, nu), np.linspace(0, 1, nv), indexing="ij")
    return np.asarray(origin) + a.reshape(-1, 1) * np.asarray(edge_u) + b.reshape(-1, 1) * np.asarray(edge_v)


def _colored(points, color):
    return points, np.tile(np.asarray(color, dtype=np.float64), (len(points), 1))


def _wall(center_xy, normal_az, width, height, color):
    """Vertical rectangle centered on ``center_xy`` whose normal points along ``normal_az``."""
    tangent = np.array([-math.sin(normal_az), math.cos(normal_az), 0.0])
    base = np.array([center_xy[0], center_xy[1], 0.0]) - tangent * width / 2
    return _colored(_rect_points(base, tangent * width, np.array([0, 0, height])), color)


def _box(center_xy, open_az, half, height, color):
    """Three walls and a roof around ``center_xy``, open on the side facing ``open_az``."""
    parts = []
    for k in range(4):
        az = open_az + k * math.pi / 2
        if k == 0:
            continue
        normal = np.array([math.cos(az), math.sin(az)])
        parts.append(_wall(np.asarray(center_xy) + normal * half, az, 2 * half, height, color)[0])
    u = np.array([math.cos(open_az), math.sin(open_az), 0.0])
    v = np.array([-math.sin(open_az), math.cos(open_az), 0.0])
    corner = np.array([center_xy[0], center_xy[1], height]) - (u + v) * half
    parts.append(_rect_points(corner, u * 2 * half, v * 2 * half))
    return _colored(np.concatenate(parts), color)


# --- physical cameras -------------------------------------------------------


def physical_cameras(target, approach, resolution=128):
    """Front, shoulder and wrist cameras; the wrist sits 0.35 m from the target along ``approach``."""
    look = np.array([0.0, 0.0, 0.05])
    rigs = {
        "front": spherical_to_cartesian(math.radians(50), 0.0, 1.3),
        "left_shoulder": spherical_to_cartesian(math.radians(45), math.radians(120), 1.1),
        "right_shoulder": spherical_to_cartesian(math.radians(45), math.radians(240), 1.1),
    }
    cams = {}
    for name, pos in rigs.items():
        cams[name] = VirtualCamera(look_at_from_vectors(pos + look, (0, 0, 1), look), PHYSICAL_FOV, (resolution, resolution))
    wrist_pos = np.asarray(target) + 0.35 * np.asarray(approach)
    cams["wrist"] = VirtualCamera(look_at_from_vectors(wrist_pos, (0, 0, 1), target), PHYSICAL_FOV, (resolution, resolution))
    return cams


def _rgbd(surface: PointCloud, cam: VirtualCamera) -> RgbdView:
    view = render_pointcloud(surface, cam, point_radius_px=1)
    h, w = cam.resolution
    return RgbdView(view.rgb, view.depth, Intrinsics.from_fov(cam.fov_y, h, w), cam.extrinsics)


def target_pixel_count(rgb: np.ndarray, color) -> int:
    return int(np.all(np.abs(rgb - np.asarray(color)) < 1e-9, axis=-1).sum())


# directions used to confirm some free viewpoint sees the target
_PROBE_DIRECTIONS = [
    spherical_to_cartesian(math.radians(t), math.radians(p), 1.0)
    for t in (10, 45, 75)
    for p in range(0, 360, 30)
]


def _some_virtual_view_sees(cloud: PointCloud, target, color, min_pixels=15) -> bool:
    local = recenter_scale_crop(cloud, target, 0.35)
    for d in _PROBE_DIRECTIONS:
        cam = VirtualCamera(look_at_from_vectors(d, (0, 0, 1) if abs(d[2]) < 0.99 else (1, 0, 0)), math.radians(60), (96, 96))
        if target_pixel_count(render_pointcloud(local, cam).rgb, color) >= min_pixels:
            return True
    return False


def _layout(spec: TaskSpec, rng: np.random.Generator):
    """Sample object geometry; returns (target, surfaces, occluders, designated view, approach, reveal dir)."""
    target_xy = rng.uniform(-0.18, 0.18, size=2)
    target = np.array([target_xy[0], target_xy[1], SPHERE_RADIUS + 0.002])
    surfaces = [_colored(_sphere_points(target, SPHERE_RADIUS), COLORS[spec.color])]
    occluders: list[dict] = []
    designated = None
    reveal_dir = None
    approach = spherical_to_cartesian(math.radians(20), rng.uniform(0, 2 * math.pi), 1.0)

    if spec.family == "reach-occluded":
        designated = ["front", "left_shoulder", "right_shoulder"][int(rng.integers(3))]
        cam_az = {"front": 0.0, "left_shoulder": math.radians(120), "right_shoulder": math.radians(240)}[designated]
        dist = rng.uniform(0.07, 0.09)
        width, height = rng.uniform(0.16, 0.22), rng.uniform(0.14, 0.18)
        center = target_xy + dist * np.array([math.cos(cam_az), math.sin(cam_az)])
        surfaces.append(_wall(center, cam_az, width, height, WALL_COLOR))
        occluders.append({"kind": "wall", "center": center.tolist(), "normal_az": cam_az, "width": width, "height": height})
        # wrist looks from the side away from the wall
        approach = spherical_to_cartesian(math.radians(35), cam_az + math.pi + rng.uniform(-0.5, 0.5), 1.0)
    elif spec.family == "two-target":
        for _ in range(MAX_ATTEMPTS):
            other = rng.uniform(-0.25, 0.25, size=2)
            if 0.10 <= np.linalg.norm(other - target_xy) <= 0.22:
                break
        pos = np.array([other[0], other[1], target[2]])
        surfaces.append(_colored(_sphere_points(pos, SPHERE_RADIUS), COLORS[spec.distractor]))
        occluders.append({"kind": "distractor", "center": pos.tolist(), "color": spec.distractor})
    elif spec.family == "reveal":
        open_az = REVEAL_AZIMUTHS[int(rng.integers(len(REVEAL_AZIMUTHS)))]
        half, height = 0.065, 0.11
        surfaces.append(_box(target_xy, open_az, half, height, BOX_COLOR))
        occluders.append({"kind": "box", "center": target_xy.tolist(), "open_az": open_az, "half": half, "height": height})
        theta = math.pi / 2 - REVEAL_ELEVATION
        reveal_dir = spherical_to_cartesian(theta, open_az, 1.0)
        approach = spherical_to_cartesian(math.radians(78), open_az, 1.0)
        designated = "front"
    return target, surfaces, occluders, designated, approach, reveal_dir


def _table() -> tuple[np.ndarray, np.ndarray]:
    return _colored(_rect_points([-0.5, -0.5, 0.0], [1.0, 0, 0], [0, 1.0, 0], spacing=0.005), TABLE_COLOR)


_TABLE = None
_TABLE_FILL_SPACING = 0.008
_TABLE_FILL_GAP = 0.006


def fill_table(cloud: PointCloud) -> PointCloud:
    """Complete the table plane where no camera observed it (under and behind objects).

    The support surface is static, known geometry; filling the sensor shadows
    keeps it opaque when the cloud is re-rendered from below the table plane.
    """
    lo, hi = WORKSPACE.min, WORKSPACE.max
    axis_x = np.arange(lo[0], hi[0] + 1e-9, _TABLE_FILL_SPACING)
    axis_y = np.arange(lo[1], hi[1] + 1e-9, _TABLE_FILL_SPACING)
    gx, gy = np.meshgrid(axis_x, axis_y, indexing="ij")
    grid = np.stack([gx.ravel(), gy.ravel(), np.zeros(gx.size)], axis=1)
    near_table = cloud.positions[np.abs(cloud.positions[:, 2]) < _TABLE_FILL_GAP]
    if len(near_table):
        dist, _ = cKDTree(near_table[:, :2]).query(grid[:, :2], k=1)
        grid = grid[dist > _TABLE_FILL_GAP]
    fill = PointCloud(grid, np.tile(np.asarray(TABLE_COLOR, dtype=np.float64), (len(grid), 1)))
    return PointCloud(np.concatenate([cloud.positions, fill.positions]), np.concatenate([cloud.colors, fill.colors]))


def generate_scene(task, seed: int, view_resolution: int = 128) -> Scene:
    """Deterministic scene for ``task`` (a name or :class:`TaskSpec`) and ``seed``."""
    global _TABLE
    name = task if isinstance(task, str) else task.name
    if name not in TASK_INDEX:
        raise SceneGenerationError(f"unknown task {name!r}")
    spec = TASKS[TASK_INDEX[name]] if isinstance(task, str) else task
    if _TABLE is None:
        _TABLE = _table()
    rng = np.random.default_rng([int(seed), TASK_INDEX[spec.name]])
    color = COLORS[spec.color]

    for _ in range(MAX_ATTEMPTS):
        target, surfaces, occluders, designated, approach, reveal_dir = _layout(spec, rng)
        pts = np.concatenate([_TABLE[0]] + [s[0] for s in surfaces])
        cols = np.concatenate([_TABLE[1]] + [s[1] for s in surfaces])
        surface = PointCloud(pts, cols)
        cams = physical_cameras(target, approach, view_resolution)
        views = {name: _rgbd(surface, cam) for name, cam in cams.items()}
        if designated is not None and target_pixel_count(views[designated].rgb, color) > 0:
            continue
        cloud = fill_table(aggregate([backproject(v) for v in views.values()], WORKSPACE))
        if target_pixel_count(cloud.colors[None], color) == 0:
            continue
        if not _some_virtual_view_sees(cloud, target, color):
            continue
        return Scene(
            cloud=cloud,
            target_pos=target,
            gt_rotation_bins=spec.rotation_bins,
            gt_gripper=spec.gripper,
            gt_collision=spec.collision,
            occluders=occluders,
            fixed_views=list(views.values()),
            task_id=TASK_INDEX[spec.name],
            instruction_id=spec.instruction_id,
            seed=int(seed),
            task=spec.name,
            target_color=color,
            occluded_view=designated,
            reveal_direction=reveal_dir,
            fixed_view_names=tuple(views),
        )
    raise SceneGenerationError(f"{spec.name}: no valid layout after {MAX_ATTEMPTS} attempts (seed {seed})")
