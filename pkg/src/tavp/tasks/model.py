"""The view-planning model: context encoder, grounding heads, action heads and MVEP.

Heatmap heads score pixels from their rendered color only (plus a background
flag), modulated by the task context through FiLM. Pixels sharing a color
share a logit, so every head evaluation runs over the handful of distinct
colors in a view instead of over all H*W pixels; cross-entropy and entropy
are computed exactly on that compressed form.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from ..errors import NoSignalError
from ..geometry import CameraPose5, RadialBounds, look_at_extrinsics, look_at_from_vectors, squash_array
from ..netcore import ops
from ..netcore.layers import (
    GaussianPoseParams,
    build_mlp,
    dense,
    film_params,
    mlp_forward,
)
from ..netcore.params import ParamStore
from ..netcore.tensor import Tensor, no_grad
from ..pointcloud import PointCloud, downsample, recenter_scale_crop
from ..render import (
    Heatmap,
    VirtualCamera,
    candidate_grid,
    gt_heatmap,
    render_pointcloud,
    score_3d_candidates,
)
from ..taskmoe import N_TOKENS, TOKEN_DIM, MoEConfig, TaskContext, TaskMoE
from ..taskmoe import build_params as build_moe_params
from .scenes import N_INSTRUCTIONS, TASKS, Scene

N_ROT_BINS = 72
PIXEL_HIDDEN = 16
PROB_EPS = 1e-7
MVEP_PREFIXES = ("mvep.", "value.")


@dataclass(frozen=True)
class ModelConfig:
    K: int = 3
    bounds: RadialBounds = RadialBounds()
    theta_max: float = math.pi
    resolution: int = 224
    coarse_resolution: int = 96
    fov_y: float = math.radians(60.0)
    point_radius_px: int = 1
    sigma_px: float = 1.5
    trunc_sigmas: float = 3.0
    n_points: int = 2048
    crop_half_extent: float = 0.35
    crop_scale: float = 1.0
    fine_grid_half: float = 0.12
    fine_grid_step: float = 0.01
    coarse_grid_step: float = 0.02
    decode_blur_px: float = 2.0
    coarse_radius: float = 1.3
    coarse_center: tuple = (0.0, 0.0, 0.05)
    oracle_coarse: bool = False
    moe: MoEConfig = MoEConfig(n_tasks=len(TASKS))


@dataclass
class LossVector:
    l_hf: float
    l_rot: float
    l_gri: float
    l_col: float

    def as_array(self) -> np.ndarray:
        return np.array([self.l_hf, self.l_rot, self.l_gri, self.l_col])


@dataclass
class PixelBatch:
    """A rendered view compressed to distinct pixel colors."""

    features: np.ndarray  # (U, 4): r, g, b, background flag
    inverse: np.ndarray  # (H*W,) index into the distinct rows
    counts: np.ndarray  # (U,)
    shape: tuple[int, int]

    @classmethod
    def from_render(cls, codes: "ColorCodes", index: np.ndarray) -> "PixelBatch":
        h, w = index.shape
        flat = index.ravel()
        n_colors = codes.keys.size
        pix = np.where(flat >= 0, codes.point_code[np.maximum(flat, 0)], n_colors)
        counts = np.bincount(pix, minlength=n_colors + 1)
        present = np.flatnonzero(counts)
        remap = np.zeros(n_colors + 1, dtype=np.int64)
        remap[present] = np.arange(present.size)
        feats = np.zeros((present.size, 4))
        fg = present < n_colors
        k = codes.keys[present[fg]]
        feats[fg, 0] = ((k >> 16) & 255) / 255.0
        feats[fg, 1] = ((k >> 8) & 255) / 255.0
        feats[fg, 2] = (k & 255) / 255.0
        feats[~fg, 3] = 1.0
        return cls(feats, remap[pix], counts[present].astype(np.float64), (h, w))

    def gt_mass(self, hm: Heatmap) -> np.ndarray:
        return np.bincount(self.inverse, weights=hm.values.ravel(), minlength=self.counts.size)


def color_keys(colors: np.ndarray) -> np.ndarray:
    q = np.clip(np.rint(colors * 255.0), 0, 255).astype(np.int64)
    return (q[:, 0] << 16) | (q[:, 1] << 8) | q[:, 2]


@dataclass
class ColorCodes:
    """Distinct 8-bit colors of a cloud and each point's index into them."""

    keys: np.ndarray
    point_code: np.ndarray

    @classmethod
    def from_colors(cls, colors: np.ndarray) -> "ColorCodes":
        keys, code = np.unique(color_keys(colors), return_inverse=True)
        return cls(keys, code.astype(np.int64).ravel())


class PredictedHeatmap:
    """Softmax over pixels whose logits are shared per distinct color."""

    def __init__(self, logits: Tensor, pixels: PixelBatch):
        self.logits = logits
        self.pixels = pixels
        self._lse = None

    def _logsumexp(self) -> float:
        if self._lse is None:
            z = self.logits.data + np.log(self.pixels.counts)
            m = z.max()
            self._lse = float(m + np.log(np.exp(z - m).sum()))
        return self._lse

    def probs(self) -> np.ndarray:
        p = np.exp(self.logits.data - self._logsumexp())
        return p[self.pixels.inverse].reshape(self.pixels.shape)

    def entropy(self) -> float:
        logp = self.logits.data - self._logsumexp()
        return float(-(self.pixels.counts * np.exp(logp) * logp).sum())

    def cross_entropy(self, gt: Heatmap) -> Tensor:
        mass = self.pixels.gt_mass(gt)
        lse = ops.logsumexp(ops.add(self.logits, Tensor(np.log(self.pixels.counts))))
        return ops.sub(lse, ops.sum(ops.mul(self.logits, Tensor(mass))))


class DenseHeatmap:
    """An explicit probability map (oracle predictions and tests)."""

    def __init__(self, values: np.ndarray):
        self.values = np.asarray(values, dtype=np.float64)

    def probs(self) -> np.ndarray:
        return self.values

    def entropy(self) -> float:
        p = self.values[self.values > 0]
        return float(-(p * np.log(p)).sum())

    def cross_entropy(self, gt: Heatmap) -> Tensor:
        m = gt.values > 0
        return Tensor(-(gt.values[m] * np.log(np.maximum(self.values[m], PROB_EPS))).sum())


@dataclass
class ActionPrediction:
    position: np.ndarray
    rotation_logp: Tensor  # (3, 72) log-probabilities
    gripper_prob: Tensor  # (1,)
    collision_prob: Tensor  # (1,)
    view_heatmaps: list
    frame_center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    frame_scale: float = 1.0
    coarse_heatmaps: list | None = None
    coarse_cams: list | None = None
    focus: np.ndarray | None = None

    @property
    def rotation_bins(self) -> np.ndarray:
        return np.exp(self.rotation_logp.data)

    def to_local(self, world_point) -> np.ndarray:
        return (np.asarray(world_point) - self.frame_center) * self.frame_scale


def _bce(prob: Tensor, label: int) -> Tensor:
    p = ops.clamp(prob, PROB_EPS, 1.0 - PROB_EPS)
    if label:
        return ops.scale(ops.sum(ops.log(p)), -1.0)
    return ops.scale(ops.sum(ops.log(ops.add_scalar(ops.scale(p, -1.0), 1.0))), -1.0)


def heatmap_loss(heatmaps, cams, point_local, sigma_px, trunc_sigmas) -> Tensor:
    """Mean cross-entropy over views where the ground-truth point projects into the image."""
    terms = []
    for hm, cam in zip(heatmaps, cams):
        gt = gt_heatmap(point_local, cam, sigma_px, trunc_sigmas)
        if gt.valid:
            terms.append(hm.cross_entropy(gt))
    if not terms:
        raise NoSignalError("no view sees the ground-truth point")
    total = terms[0]
    for t in terms[1:]:
        total = ops.add(total, t)
    return ops.scale(total, 1.0 / len(terms))


def stage1_losses(pred: ActionPrediction, scene: Scene, cams, sigma_px=1.5, trunc_sigmas=3.0):
    """Per-head losses and their sum; the coarse heatmap term is added when present."""
    local = pred.to_local(scene.target_pos)
    l_hf = heatmap_loss(pred.view_heatmaps, cams, local, sigma_px, trunc_sigmas)
    rot_terms = [ops.scale(ops.index(pred.rotation_logp, (a, int(b))), -1.0) for a, b in enumerate(scene.gt_rotation_bins)]
    l_rot = ops.scale(ops.add(ops.add(rot_terms[0], rot_terms[1]), rot_terms[2]), 1.0 / 3.0)
    l_gri = _bce(pred.gripper_prob, scene.gt_gripper)
    l_col = _bce(pred.collision_prob, scene.gt_collision)
    total = ops.add(ops.add(ops.add(l_hf, l_rot), l_gri), l_col)
    if pred.coarse_heatmaps is not None:
        l_hc = heatmap_loss(pred.coarse_heatmaps, pred.coarse_cams, scene.target_pos, sigma_px, trunc_sigmas)
        total = ops.add(total, l_hc)
    lv = LossVector(l_hf.item(), l_rot.item(), l_gri.item(), l_col.item())
    return lv, total


def instruction_table(embed_dim: int) -> np.ndarray:
    """Fixed (untrained) instruction embeddings, one row per instruction id."""
    rows = [np.random.default_rng([977, i]).standard_normal(embed_dim) for i in range(N_INSTRUCTIONS)]
    return np.stack(rows)


def canonical_poses(bounds: RadialBounds) -> list[CameraPose5]:
    """Front, left and top viewpoints at the middle of the radial range."""
    r = 0.5 * (bounds.r_min + bounds.r_max)
    return [
        CameraPose5(math.pi / 2, 0.0, r, 0.0, 0.0),
        CameraPose5(math.pi / 2, math.pi / 2, r, 0.0, 0.0),
        CameraPose5(0.0, 0.0, r, math.pi / 2, 0.0),
    ]


@dataclass
class SceneInputs:
    """Per-scene tensors that do not depend on model parameters."""

    scene: Scene
    codes: ColorCodes
    token_points: np.ndarray  # (n_points, 6)
    token_segments: np.ndarray
    instruction: np.ndarray
    coarse_pixels: list


class TavpModel:
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.store = ParamStore(seed)
        d = cfg.moe.embed_dim
        s = self.store
        self.vision_spec = build_mlp(s, "vision.point", [6, TOKEN_DIM, TOKEN_DIM], final_activation="relu")
        s.dense("vision.proj", TOKEN_DIM, d)
        build_moe_params(s, cfg.moe)
        for head in ("coarse", "fine"):
            s.dense(f"{head}.pix0", 4, PIXEL_HIDDEN)
            s.add(f"{head}.film.gamma.w", (d, PIXEL_HIDDEN), "small")
            s.add(f"{head}.film.gamma.b", (PIXEL_HIDDEN,), "ones")
            s.add(f"{head}.film.beta.w", (d, PIXEL_HIDDEN), "small")
            s.add(f"{head}.film.beta.b", (PIXEL_HIDDEN,), "zeros")
            s.dense(f"{head}.pix1", PIXEL_HIDDEN, 1, "small")
        s.dense("rot", d, 3 * N_ROT_BINS, "small")
        s.dense("grip", d, 1, "small")
        s.dense("col", d, 1, "small")
        self.mvep_point_spec = build_mlp(s, "mvep.point", [6, 64, 128], final_activation="relu")
        s.dense("mvep.enc", 128, 512)
        s.dense("mvep.head", 512, cfg.K * 10, "small")
        self.value_spec = build_mlp(s, "value", [512, 64, 1])
        self.moe = TaskMoE(s, cfg.moe)
        self.instructions = instruction_table(d)
        self._coarse_cams = self._make_coarse_cams()
        self._coarse_grid = self._make_coarse_grid()
        self._fine_grid = candidate_grid(cfg.fine_grid_half, cfg.fine_grid_step)

    # --- parameter groups -------------------------------------------------

    def mvep_names(self) -> list[str]:
        return self.store.names(MVEP_PREFIXES)

    def non_mvep_names(self) -> list[str]:
        return [n for n in self.store.names() if not n.startswith(MVEP_PREFIXES)]

    # --- cameras ------------------------------------------------------------

    def camera(self, pose: CameraPose5) -> VirtualCamera:
        r = self.cfg.resolution
        return VirtualCamera(look_at_extrinsics(pose), self.cfg.fov_y, (r, r))

    def _make_coarse_cams(self) -> list[VirtualCamera]:
        c = np.asarray(self.cfg.coarse_center, dtype=np.float64)
        res = self.cfg.coarse_resolution
        cams = []
        for pose in canonical_poses(self.cfg.bounds):
            pose = CameraPose5(pose.theta, pose.phi, self.cfg.coarse_radius, pose.theta_up, pose.phi_up)
            ext = look_at_extrinsics(pose)
            ext = look_at_from_vectors(ext.translation + c, ext.rotation[1], c)
            cams.append(VirtualCamera(ext, self.cfg.fov_y, (res, res)))
        return cams

    def _make_coarse_grid(self) -> np.ndarray:
        from .scenes import WORKSPACE

        step = self.cfg.coarse_grid_step
        lo = np.array([WORKSPACE.min[0], WORKSPACE.min[1], 0.0])
        hi = np.array([WORKSPACE.max[0], WORKSPACE.max[1], 0.3])
        axes = [np.arange(a, b + 1e-9, step) for a, b in zip(lo, hi)]
        gx, gy, gz = np.meshgrid(*axes, indexing="ij")
        return np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)

    @property
    def coarse_cams(self) -> list[VirtualCamera]:
        return self._coarse_cams

    def canonical_cams(self) -> list[VirtualCamera]:
        return [self.camera(p) for p in canonical_poses(self.cfg.bounds)]

    # --- inputs ---------------------------------------------------------------

    def scene_inputs(self, scene: Scene) -> SceneInputs:
        codes = ColorCodes.from_colors(scene.cloud.colors)
        pts = downsample(scene.cloud, self.cfg.n_points, seed=scene.seed * 7919 + scene.task_id)
        center = np.array(self.cfg.coarse_center)
        rel = pts.positions - center
        segments = (rel[:, 0] > 0).astype(np.int64) * 4 + (rel[:, 1] > 0) * 2 + (rel[:, 2] > 0.05)
        token_points = np.concatenate([rel / 0.45, pts.colors], axis=1)
        coarse = []
        for cam in self._coarse_cams:
            view = render_pointcloud(scene.cloud, cam, self.cfg.point_radius_px)
            coarse.append(PixelBatch.from_render(codes, view.index))
        return SceneInputs(scene, codes, token_points, segments, self.instructions[scene.instruction_id], coarse)

    # --- forward pieces -----------------------------------------------------

    def context(self, si: SceneInputs, record: bool = True):
        feats = mlp_forward(Tensor(si.token_points), self.store, self.vision_spec)
        tokens = ops.segment_max(feats, si.token_segments, N_TOKENS)
        tokens = dense(tokens, self.store, "vision.proj")
        ctx = TaskContext(si.scene.task_id, si.instruction, tokens)
        return self.moe(ctx, record=record)

    def pixel_logits(self, pixels: PixelBatch, context: Tensor, head: str) -> Tensor:
        h = ops.relu(dense(Tensor(pixels.features), self.store, f"{head}.pix0"))
        gamma, beta = film_params(context, self.store, f"{head}.film")
        h = ops.relu(ops.add_row(ops.mul_row(h, gamma), beta))
        return ops.reshape(dense(h, self.store, f"{head}.pix1"), (-1,))

    def heatmaps(self, pixel_batches, context: Tensor, head: str) -> list[PredictedHeatmap]:
        return [PredictedHeatmap(self.pixel_logits(pb, context, head), pb) for pb in pixel_batches]

    def action_heads(self, context: Tensor):
        rot = ops.log_softmax(ops.reshape(dense(context, self.store, "rot"), (3, N_ROT_BINS)), axis=-1)
        grip = ops.reshape(ops.sigmoid(dense(context, self.store, "grip")), (1,))
        col = ops.reshape(ops.sigmoid(dense(context, self.store, "col")), (1,))
        return rot, grip, col

    def lift(self, heatmaps, cams, candidates) -> np.ndarray:
        pairs = []
        for hm, cam in zip(heatmaps, cams):
            values = gaussian_filter(hm.probs(), self.cfg.decode_blur_px, mode="constant")
            pairs.append((Heatmap(values, True), cam))
        best, _ = score_3d_candidates(pairs, candidates)
        return best

    def coarse_focus(self, si: SceneInputs, coarse_heatmaps) -> np.ndarray:
        if self.cfg.oracle_coarse:
            return np.asarray(si.scene.target_pos, dtype=np.float64).copy()
        return self.lift(coarse_heatmaps, self._coarse_cams, self._coarse_grid)

    def local_cloud(self, scene: Scene, focus) -> PointCloud:
        return recenter_scale_crop(scene.cloud, focus, self.cfg.crop_half_extent, self.cfg.crop_scale)

    def policy_features(self, local: PointCloud, seed: int) -> np.ndarray:
        pts = downsample(local, self.cfg.n_points, seed)
        return np.concatenate([pts.positions / self.cfg.crop_half_extent, pts.colors], axis=1)

    def policy(self, features: np.ndarray, batch: int = 1) -> tuple[GaussianPoseParams, Tensor]:
        """Gaussian pose parameters and value for ``batch`` stacked clouds of n_points each."""
        h = mlp_forward(Tensor(features), self.store, self.mvep_point_spec)
        h = ops.max_axis(ops.reshape(h, (batch, -1, 128)), axis=1)
        enc = ops.relu(dense(h, self.store, "mvep.enc"))
        out = dense(enc, self.store, "mvep.head")
        value = ops.reshape(mlp_forward(enc, self.store, self.value_spec), (batch,))
        k5 = self.cfg.K * 5
        mu = ops.reshape(ops.index(out, (slice(None), slice(0, k5))), (batch, self.cfg.K, 5))
        log_sigma = ops.reshape(ops.index(out, (slice(None), slice(k5, 2 * k5))), (batch, self.cfg.K, 5))
        return GaussianPoseParams.from_raw(mu, log_sigma), value

    def poses_from_raw(self, raw: np.ndarray) -> list[CameraPose5]:
        sq = squash_array(np.asarray(raw).reshape(-1, 5), self.cfg.bounds, self.cfg.theta_max)
        return [CameraPose5.from_array(row) for row in sq]

    def render_views(self, local: PointCloud, poses, codes: ColorCodes | None = None):
        cams = [self.camera(p) for p in poses]
        codes = ColorCodes.from_colors(local.colors) if codes is None else codes
        pixels = [PixelBatch.from_render(codes, render_pointcloud(local, cam, self.cfg.point_radius_px).index) for cam in cams]
        return cams, pixels

    def predict(self, si: SceneInputs, poses=None, focus=None, with_coarse: bool = True, record: bool = True):
        """Full forward pass. ``poses=None`` uses the canonical fixed views.

        Returns ``(ActionPrediction, cams)``. ``focus`` overrides the coarse
        prediction (used for training the fine branch around a jittered target).
        """
        context, _ = self.context(si, record=record)
        coarse_hms = None
        if with_coarse or (focus is None and not self.cfg.oracle_coarse):
            coarse_hms = self.heatmaps(si.coarse_pixels, context, "coarse")
        if focus is None:
            focus = self.coarse_focus(si, coarse_hms)
        local = self.local_cloud(si.scene, focus)
        pred, cams = self.fine_predict(context, local, focus, poses)
        if with_coarse:
            pred.coarse_heatmaps = coarse_hms
            pred.coarse_cams = self._coarse_cams
        return pred, cams

    def fine_predict(self, context: Tensor, local: PointCloud, focus, poses=None, codes: ColorCodes | None = None):
        """Fine heatmaps on views of the focus-centered cloud, plus the action heads."""
        if poses is None:
            poses = canonical_poses(self.cfg.bounds)
        cams, pixels = self.render_views(local, poses, codes)
        fine = self.heatmaps(pixels, context, "fine")
        rot, grip, col = self.action_heads(context)
        focus = np.asarray(focus, dtype=np.float64)
        pred = ActionPrediction(
            position=np.zeros(3),
            rotation_logp=rot,
            gripper_prob=grip,
            collision_prob=col,
            view_heatmaps=fine,
            frame_center=focus,
            frame_scale=self.cfg.crop_scale,
            focus=focus,
        )
        return pred, cams

    def decode_position(self, pred: ActionPrediction, cams) -> np.ndarray:
        local = self.lift(pred.view_heatmaps, cams, self._fine_grid)
        return local / pred.frame_scale + pred.frame_center

    def frozen_copy(self) -> "TavpModel":
        other = TavpModel.__new__(TavpModel)
        other.__dict__.update(self.__dict__)
        other.store = self.store.clone()
        other.moe = TaskMoE(other.store, self.cfg.moe)
        return other


def reference_losses(si: SceneInputs, model: TavpModel, focus=None) -> LossVector:
    """Losses of ``model`` on the canonical fixed views (the shadow-network reference)."""
    with no_grad():
        pred, cams = model.predict(si, poses=None, focus=focus, with_coarse=False, record=False)
        lv, _ = stage1_losses(pred, si.scene, cams, model.cfg.sigma_px, model.cfg.trunc_sigmas)
    return lv


def policy_mean_poses(model: TavpModel, features: np.ndarray) -> list[CameraPose5]:
    with no_grad():
        g, _ = model.policy(features)
    return model.poses_from_raw(g.mu.data[0])
