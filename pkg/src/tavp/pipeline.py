"""Three-stage training, evaluation and ablation runs.

Stage 1 trains the grounding model (TaskMoE, heatmap and action heads) on the
canonical front/left/top views. Stage 2 trains only the viewpoint policy and
its value head with PPO against the frozen Stage-1 model. Stage 3 fine-tunes
everything except the policy on the policy's own (mean) viewpoints.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import read_checkpoint, read_header, write_checkpoint
from .config import RunConfig, config_hash, parse_config_text, serialize_config
from .errors import FreezeViolationError, NoSignalError, TrainingDivergedError
from .geometry import CameraPose5
from .metrics import MetricsWriter, write_json
from .netcore.optim import Lamb, cosine_lr
from .netcore.tensor import no_grad
from .rl import (
    RewardNormalizer,
    pseudo_env_step,
    ppo_update,
    prepare_env_scene,
    reward_r0,
    reward_r2,
)
from .tasks.model import (
    MVEP_PREFIXES,
    N_ROT_BINS,
    DenseHeatmap,
    SceneInputs,
    TavpModel,
    canonical_poses,
    reference_losses,
    stage1_losses,
)
from .render import gt_heatmap
from .tasks.scenes import TASK_INDEX, generate_scene

EVAL_SEED_BASE = 1_000_000
MODES = ("fixed", "dynamic", "random")

__all__ = [
    "RunConfig", "Checkpoint", "EvalReport", "stage1", "stage2", "stage3", "evaluate",
    "run_pipeline", "ablate", "load_checkpoint", "train_scene_keys", "eval_scene_keys",
]


@dataclass
class Checkpoint:
    path: Path | None
    stage: str
    model: TavpModel
    cfg: RunConfig
    chain: list = field(default_factory=list)


@dataclass
class EvalReport:
    mode: str
    n_scenes: int
    per_task_success: dict
    mean_success: float
    mean_r0_margin: float
    position_error_mean: float
    viewpoint_stats: dict
    skipped: int = 0
    wall_clock: float = 0.0

    def to_dict(self, include_time: bool = False) -> dict:
        d = {
            "mode": self.mode,
            "n_scenes": self.n_scenes,
            "per_task_success": self.per_task_success,
            "mean_success": self.mean_success,
            "mean_r0_margin": self.mean_r0_margin,
            "position_error_mean": self.position_error_mean,
            "viewpoint_stats": self.viewpoint_stats,
            "skipped": self.skipped,
        }
        if include_time:
            d["wall_clock"] = self.wall_clock
        return d


# --- scene pools ------------------------------------------------------------


def train_scene_keys(cfg: RunConfig) -> list[tuple[str, int]]:
    base = cfg.seed * 10_000
    return [(t, base + i) for i in range(cfg.train_scenes_per_task) for t in cfg.task_names()]


def eval_scene_keys(cfg: RunConfig, n: int | None = None) -> list[tuple[str, int]]:
    """Held-out scenes, round-robin over the roster, disjoint from every training pool."""
    n = cfg.eval_scenes if n is None else n
    names = cfg.task_names()
    base = EVAL_SEED_BASE + cfg.seed * 10_000
    return [(names[i % len(names)], base + i // len(names)) for i in range(n)]


def load_inputs(model: TavpModel, key) -> SceneInputs:
    scene = generate_scene(key[0], key[1])
    scene.fixed_views = []
    return model.scene_inputs(scene)


# --- helpers ----------------------------------------------------------------


def _model_from(cfg: RunConfig) -> TavpModel:
    return TavpModel(cfg.model_config(), seed=cfg.seed)


def _save(model: TavpModel, cfg: RunConfig, stage: str, out_dir, chain) -> Checkpoint:
    chain = list(chain) + [model.store.digest()]
    path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / f"{stage}.ckpt"
        write_checkpoint(path, model.store, stage, serialize_config(cfg), chain)
    return Checkpoint(path, stage, model, cfg, chain)


def load_checkpoint(path) -> Checkpoint:
    header, _ = read_header(path)
    cfg = parse_config_text(header.config)
    model = _model_from(cfg)
    read_checkpoint(path, model.store)
    return Checkpoint(Path(path), header.stage, model, cfg, list(header.chain))


def _resolve(ckpt) -> Checkpoint:
    return ckpt if isinstance(ckpt, Checkpoint) else load_checkpoint(ckpt)


def _write_routing(model: TavpModel, out_dir, stage: str) -> None:
    if out_dir is not None:
        model.moe.stats.write_jsonl(Path(out_dir) / "routing_stats.jsonl", stage)
    model.moe.stats.clear()


def _check_finite(value: float, stage: str, step: int, extra: dict) -> None:
    if not math.isfinite(value):
        raise TrainingDivergedError(f"{stage}: loss is not finite at step {step}", {"step": step, **extra})


def _supervised(model: TavpModel, cfg: RunConfig, stage: str, names, steps: int, lr0: float,
                rng: np.random.Generator, inputs: list[SceneInputs], writer, dynamic: bool) -> None:
    opt = Lamb(model.store, names, weight_decay=0.0)
    acc = []
    for step in range(steps):
        si = inputs[int(rng.integers(len(inputs)))]
        focus = si.scene.target_pos + rng.uniform(-cfg.focus_jitter, cfg.focus_jitter, size=3)
        poses = None
        if dynamic:
            local = model.local_cloud(si.scene, focus)
            poses = policy_mean_poses_for(model, local, si)
        pred, cams = model.predict(si, poses=poses, focus=focus, with_coarse=True)
        try:
            lv, total = stage1_losses(pred, si.scene, cams, cfg.sigma_px)
        except NoSignalError:
            continue
        _check_finite(total.item(), stage, step, {"task": si.scene.task, "seed": si.scene.seed})
        model.store.zero_grad()
        total.backward()
        lr = cosine_lr(lr0, step, steps)
        gnorm = opt.step(lr)
        l_hc = total.item() - float(lv.as_array().sum())
        acc.append((total.item(), l_hc, *lv.as_array(), gnorm))
        if writer is not None and ((step + 1) % cfg.log_every == 0 or step == steps - 1):
            m = np.mean(acc, axis=0)
            writer.log(stage, step + 1, loss=float(m[0]), l_hc=float(m[1]), l_hf=float(m[2]), l_rot=float(m[3]),
                       l_gri=float(m[4]), l_col=float(m[5]), grad_norm=float(m[6]), lr=lr)
            acc = []


def policy_mean_poses_for(model: TavpModel, local, si: SceneInputs) -> list[CameraPose5]:
    feats = model.policy_features(local, seed=si.scene.seed * 7919 + si.scene.task_id + 1)
    with no_grad():
        g, _ = model.policy(feats)
    return model.poses_from_raw(g.mu.data[0])


# --- stages -----------------------------------------------------------------


def stage1(cfg: RunConfig, out_dir=None, writer: MetricsWriter | None = None) -> Checkpoint:
    model = _model_from(cfg)
    if writer is None and out_dir is not None:
        writer = MetricsWriter(out_dir)
    rng = np.random.default_rng([cfg.seed, 1])
    inputs = [load_inputs(model, k) for k in train_scene_keys(cfg)]
    names = model.non_mvep_names()
    _supervised(model, cfg, "stage1", names, cfg.stage1_steps, cfg.stage1_lr, rng, inputs, writer, dynamic=False)
    _write_routing(model, out_dir, "stage1")
    return _save(model, cfg, "stage1", out_dir, [])


def stage2(cfg: RunConfig, stage1_ckpt, out_dir=None, writer: MetricsWriter | None = None) -> Checkpoint:
    base = _resolve(stage1_ckpt)
    model = base.model
    reference = model.frozen_copy()
    if writer is None and out_dir is not None:
        writer = MetricsWriter(out_dir)
    frozen_before = model.store.digest(exclude=MVEP_PREFIXES)
    pcfg = cfg.ppo_config()
    rng = np.random.default_rng([cfg.seed, 2])
    envs = []
    for key in train_scene_keys(cfg):
        si = load_inputs(model, key)
        try:
            envs.append(prepare_env_scene(model, reference, si))
        except NoSignalError:
            continue
    norm = RewardNormalizer()
    opt = Lamb(model.store, model.mvep_names(), weight_decay=0.0)
    n_updates = max(1, (cfg.stage2_epochs * len(envs)) // pcfg.batch_size)
    total_steps = n_updates * pcfg.epochs_per_batch * math.ceil(pcfg.batch_size / pcfg.minibatch_size)
    buffer = []
    step = 0
    update = 0
    for _epoch in range(cfg.stage2_epochs):
        for idx in rng.permutation(len(envs)):
            try:
                buffer.append(pseudo_env_step(envs[idx], model, norm, rng, cfg.reward_weights()))
            except NoSignalError:
                continue
            if len(buffer) >= pcfg.batch_size:
                stats = ppo_update(buffer, model, pcfg, opt, step, total_steps, rng)
                step = stats["steps"]
                update += 1
                if writer is not None:
                    comps = [t.components for t in buffer]
                    writer.log(
                        "stage2", update,
                        reward=float(np.mean([t.reward for t in buffer])),
                        r0=float(np.mean([c.r0 for c in comps])),
                        r1=float(np.mean([c.r1 for c in comps])),
                        r2=float(np.mean([c.r2 for c in comps])),
                        z0=float(np.mean([c.z[0] for c in comps])),
                        z1=float(np.mean([c.z[1] for c in comps])),
                        z2=float(np.mean([c.z[2] for c in comps])),
                        surrogate=stats["surrogate"], value_loss=stats["value_loss"],
                        clip_frac=stats["clip_frac"], ratio_mean=stats["ratio_mean_first_epoch"],
                        grad_norm=stats["grad_norm"], loss=stats["loss"],
                        lr=cosine_lr(pcfg.lr, min(step, total_steps - 1), total_steps),
                    )
                buffer = []
    if model.store.digest(exclude=MVEP_PREFIXES) != frozen_before:
        raise FreezeViolationError("stage2 modified parameters outside the viewpoint policy")
    return _save(model, cfg, "stage2", out_dir, base.chain)


def stage3(cfg: RunConfig, stage2_ckpt, out_dir=None, writer: MetricsWriter | None = None) -> Checkpoint:
    base = _resolve(stage2_ckpt)
    model = base.model
    if writer is None and out_dir is not None:
        writer = MetricsWriter(out_dir)
    mvep_before = model.store.digest(prefixes=MVEP_PREFIXES)
    rng = np.random.default_rng([cfg.seed, 3])
    inputs = [load_inputs(model, k) for k in train_scene_keys(cfg)]
    _supervised(model, cfg, "stage3", model.non_mvep_names(), cfg.stage3_steps, cfg.stage3_lr, rng, inputs,
                writer, dynamic=True)
    if model.store.digest(prefixes=MVEP_PREFIXES) != mvep_before:
        raise FreezeViolationError("stage3 modified the viewpoint policy")
    _write_routing(model, out_dir, "stage3")
    return _save(model, cfg, "stage3", out_dir, base.chain)


# --- evaluation ---------------------------------------------------------------


def random_poses(rng: np.random.Generator, k: int, cfg: RunConfig) -> list[CameraPose5]:
    """Uniform over the valid pose box (theta, phi, r, up angles)."""
    out = []
    for _ in range(k):
        out.append(CameraPose5(
            float(rng.uniform(0.0, cfg.theta_max)),
            float(rng.uniform(0.0, 2 * math.pi)),
            float(rng.uniform(cfg.r_min, cfg.r_max)),
            float(rng.uniform(0.0, math.pi)),
            float(rng.uniform(0.0, 2 * math.pi)),
        ))
    return out


def _oracle_prediction(pred, scene, cams, sigma_px):
    """Replace every head output with ground truth (upper-bound evaluation)."""
    from .netcore.tensor import Tensor

    local = pred.to_local(scene.target_pos)
    hms = []
    for cam in cams:
        gt = gt_heatmap(local, cam, sigma_px)
        h, w = cam.resolution
        hms.append(DenseHeatmap(gt.values if gt.valid else np.full((h, w), 1.0 / (h * w))))
    rot = np.full((3, N_ROT_BINS), -50.0)
    for a, b in enumerate(scene.gt_rotation_bins):
        rot[a, b] = 0.0
    pred.view_heatmaps = hms
    pred.rotation_logp = Tensor(rot)
    pred.gripper_prob = Tensor(np.array([1.0 - 1e-7 if scene.gt_gripper else 1e-7]))
    pred.collision_prob = Tensor(np.array([1.0 - 1e-7 if scene.gt_collision else 1e-7]))
    return pred


def mean_camera_direction(cams, focus) -> np.ndarray:
    dirs = [(c.extrinsics.translation - focus) / np.linalg.norm(c.extrinsics.translation - focus) for c in cams]
    m = np.mean(dirs, axis=0)
    n = np.linalg.norm(m)
    return m / n if n > 0 else m


def evaluate(cfg: RunConfig, ckpt, mode: str, n_scenes: int | None = None, oracle_heads: bool = False,
             keys=None, return_details: bool = False, out_dir=None):
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    t0 = time.perf_counter()
    model = _resolve(ckpt).model
    rng = np.random.default_rng([cfg.seed, 4, MODES.index(mode)])
    keys = eval_scene_keys(cfg, n_scenes) if keys is None else keys
    succ: dict[str, list[int]] = {}
    margins, errors, thetas, radii, diversity = [], [], [], [], []
    details = []
    skipped = 0
    for key in keys:
        si = load_inputs(model, key)
        scene = si.scene
        with no_grad():
            context, _ = model.context(si, record=True)
            if cfg.oracle_coarse:
                focus = np.asarray(scene.target_pos, dtype=np.float64).copy()
            else:
                focus = model.coarse_focus(si, model.heatmaps(si.coarse_pixels, context, "coarse"))
            local = model.local_cloud(scene, focus)
            if mode == "fixed":
                poses = canonical_poses(cfg.bounds())
            elif mode == "dynamic":
                poses = policy_mean_poses_for(model, local, si)
            else:
                poses = random_poses(rng, cfg.K, cfg)
            pred, cams = model.fine_predict(context, local, focus, poses)
            if oracle_heads:
                pred = _oracle_prediction(pred, scene, cams, cfg.sigma_px)
            try:
                position = model.decode_position(pred, cams)
                lv, _ = stage1_losses(pred, scene, cams, cfg.sigma_px)
                l_ref = reference_losses(si, model, focus=focus)
            except NoSignalError:
                skipped += 1
                succ.setdefault(scene.task, []).append(0)
                continue
        err = float(np.linalg.norm(position - scene.target_pos))
        rot_ok = bool(np.all(np.argmax(pred.rotation_logp.data, axis=1) == np.asarray(scene.gt_rotation_bins)))
        grip_ok = int(pred.gripper_prob.data[0] > 0.5) == scene.gt_gripper
        col_ok = int(pred.collision_prob.data[0] > 0.5) == scene.gt_collision
        ok = int(err <= cfg.success_tau and rot_ok and grip_ok and col_ok)
        succ.setdefault(scene.task, []).append(ok)
        margins.append(reward_r0(l_ref, lv))
        errors.append(err)
        thetas.extend(p.theta for p in poses)
        radii.extend(p.r for p in poses)
        diversity.append(reward_r2([c.extrinsics.translation - focus for c in cams]))
        if return_details:
            details.append({
                "task": scene.task, "seed": scene.seed, "success": ok, "position_error": err,
                "mean_direction": mean_camera_direction(cams, focus),
                "reveal_direction": scene.reveal_direction, "poses": poses, "focus": focus,
            })
    per_task = {t: float(np.mean(v)) for t, v in sorted(succ.items(), key=lambda kv: TASK_INDEX[kv[0]])}
    all_ok = [x for v in succ.values() for x in v]
    report = EvalReport(
        mode=mode,
        n_scenes=len(keys),
        per_task_success=per_task,
        mean_success=float(np.mean(all_ok)) if all_ok else 0.0,
        mean_r0_margin=float(np.mean(margins)) if margins else 0.0,
        position_error_mean=float(np.mean(errors)) if errors else float("nan"),
        viewpoint_stats={
            "theta_mean_deg": float(np.degrees(np.mean(thetas))) if thetas else 0.0,
            "below_horizon_frac": float(np.mean(np.asarray(thetas) > math.pi / 2)) if thetas else 0.0,
            "r_mean": float(np.mean(radii)) if radii else 0.0,
            "diversity_mean": float(np.mean(diversity)) if diversity else 0.0,
        },
        skipped=skipped,
        wall_clock=time.perf_counter() - t0,
    )
    _write_routing(model, out_dir, f"eval-{mode}")
    if return_details:
        return report, details
    return report


# --- whole runs ---------------------------------------------------------------


def write_eval_report(out_dir, reports: list[EvalReport], cfg: RunConfig, chain) -> None:
    body = {
        "config_hash": config_hash(cfg),
        "chain": list(chain),
        "modes": {r.mode: r.to_dict() for r in reports},
    }
    write_json(Path(out_dir) / "eval_report.json", body)


def run_pipeline(cfg: RunConfig, out_dir, modes=MODES) -> dict:
    """Stage 1, 2, 3 and evaluation; returns per-mode reports."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    writer = MetricsWriter(out_dir)
    timings = {}
    t = time.perf_counter()
    c1 = stage1(cfg, out_dir, writer)
    timings["stage1"] = time.perf_counter() - t
    t = time.perf_counter()
    c2 = stage2(cfg, c1, out_dir, writer)
    timings["stage2"] = time.perf_counter() - t
    t = time.perf_counter()
    c3 = stage3(cfg, c2, out_dir, writer)
    timings["stage3"] = time.perf_counter() - t
    reports = []
    for mode in modes:
        r = evaluate(cfg, c3, mode, out_dir=out_dir)
        timings[f"eval_{mode}"] = r.wall_clock
        reports.append(r)
    write_eval_report(out_dir, reports, cfg, c3.chain)
    write_json(out_dir / "timings.json", timings)
    return {r.mode: r for r in reports}


def ablate(cfg: RunConfig, out_dir) -> dict:
    """Full runs with and without the task-aware experts; compares dynamic vs random views."""
    out_dir = Path(out_dir)
    summary = {}
    for label, use_moe in (("with_moe", True), ("without_moe", False)):
        reports = run_pipeline(cfg.with_overrides(use_moe=use_moe), out_dir / label, modes=("dynamic", "random"))
        summary[label] = {m: r.mean_success for m, r in reports.items()}
    write_json(out_dir / "ablation.json", {"config_hash": config_hash(cfg), "results": summary})
    return summary
