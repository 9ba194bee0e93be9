"""Pseudo-environment rewards and PPO for the viewpoint policy.

Each observation is a single-step episode: the policy proposes K camera poses,
the frozen grounding model is evaluated on the resulting views and compared
against its own losses on the canonical views.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import TrainingDivergedError
from .netcore import ops
from .netcore.layers import GaussianPoseParams
from .netcore.optim import Lamb, cosine_lr
from .netcore.tensor import Tensor, no_grad
from .tasks.model import (
    ColorCodes,
    LossVector,
    SceneInputs,
    TavpModel,
    reference_losses,
    stage1_losses,
)

REWARD_CLIP = 10.0
STD_FLOOR = 1e-8
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass(frozen=True)
class WelfordState:
    count: int = 0
    mean: float = 0.0
    m2: float = 0.0

    @property
    def variance(self) -> float:
        """Sample variance (n - 1 denominator); zero until two values are seen."""
        return self.m2 / (self.count - 1) if self.count >= 2 else 0.0

    @property
    def std(self) -> float:
        return math.sqrt(self.variance)


def welford_update(state: WelfordState, x: float) -> WelfordState:
    count = state.count + 1
    delta = x - state.mean
    mean = state.mean + delta / count
    m2 = state.m2 + delta * (x - mean)
    return WelfordState(count, mean, max(m2, 0.0))


def welford_update_normalize(state: WelfordState, x: float) -> tuple[WelfordState, float]:
    """Fold ``x`` into the running statistics and standardize it with the updated ones."""
    x = float(x)
    if not math.isfinite(x):
        raise ValueError(f"non-finite value {x!r} passed to the normalizer")
    new = welford_update(state, x)
    if new.count < 2:
        return new, 0.0
    return new, (x - new.mean) / max(new.std, STD_FLOOR)


# --- reward terms -----------------------------------------------------------


def reward_r0(l_ref: LossVector, l_tavp: LossVector) -> float:
    """Mean improvement of the dynamic-view losses over the reference losses."""
    diff = l_ref.as_array() - l_tavp.as_array()
    if not np.all(np.isfinite(diff)):
        raise ValueError("loss vectors must be finite")
    return float(diff.mean())


def reward_r1(heatmaps) -> float:
    """Negative mean entropy (nats) of the predicted view heatmaps."""
    if len(heatmaps) == 0:
        raise ValueError("reward_r1 needs at least one heatmap")
    ents = []
    for hm in heatmaps:
        if hasattr(hm, "entropy"):
            ents.append(hm.entropy())
        else:
            p = np.asarray(hm, dtype=np.float64).ravel()
            p = p[p > 0]
            ents.append(float(-(p * np.log(p)).sum()))
    return -float(np.mean(ents))


def reward_r2(positions) -> float:
    """Mean pairwise cosine distance over ordered pairs of camera centers."""
    p = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    k = len(p)
    if k < 2:
        raise ValueError("reward_r2 needs at least two cameras")
    norms = np.linalg.norm(p, axis=1)
    unit = np.zeros_like(p)
    ok = norms > 0
    unit[ok] = p[ok] / norms[ok, None]
    cos = np.clip(unit @ unit.T, -1.0, 1.0)
    off = ~np.eye(k, dtype=bool)
    return float((1.0 - cos[off]).sum() / (k * (k - 1)))


@dataclass
class RewardComponents:
    r0: float
    r1: float
    r2: float
    z: tuple[float, float, float]
    weights: tuple[float, float, float]
    total: float


class RewardNormalizer:
    """One Welford state per reward component, shared across tasks."""

    def __init__(self):
        self.states = [WelfordState(), WelfordState(), WelfordState()]

    def normalize(self, values) -> tuple[float, float, float]:
        out = []
        for i, x in enumerate(values):
            self.states[i], z = welford_update_normalize(self.states[i], x)
            out.append(z)
        return tuple(out)

    def as_dict(self) -> dict:
        return {f"r{i}": {"count": s.count, "mean": s.mean, "m2": s.m2} for i, s in enumerate(self.states)}


def combine_reward(z, weights) -> float:
    total = float(np.dot(np.asarray(weights, dtype=np.float64), np.asarray(z, dtype=np.float64)))
    return float(np.clip(total, -REWARD_CLIP, REWARD_CLIP))


def aggregate_reward(components, weights, normalizers: RewardNormalizer) -> RewardComponents:
    """Normalize each raw component with its running statistics, weight, sum and clip."""
    r0, r1, r2 = (float(c) for c in components)
    z = normalizers.normalize((r0, r1, r2))
    w = tuple(float(x) for x in weights)
    return RewardComponents(r0, r1, r2, z, w, combine_reward(z, w))


# --- pseudo-environment -----------------------------------------------------


@dataclass
class EnvScene:
    """A scene prepared for rollouts under a frozen grounding model."""

    inputs: SceneInputs
    focus: np.ndarray
    local: object
    codes: ColorCodes
    features: np.ndarray
    context: Tensor
    l_ref: LossVector
    key: tuple


def prepare_env_scene(model: TavpModel, reference: TavpModel, si: SceneInputs) -> EnvScene:
    """Cache everything that stays fixed while only the policy trains."""
    scene = si.scene
    with no_grad():
        context, _ = model.context(si, record=False)
        if model.cfg.oracle_coarse:
            focus = np.asarray(scene.target_pos, dtype=np.float64).copy()
        else:
            focus = model.coarse_focus(si, model.heatmaps(si.coarse_pixels, context, "coarse"))
    local = model.local_cloud(scene, focus)
    features = model.policy_features(local, seed=scene.seed * 7919 + scene.task_id + 1)
    l_ref = reference_losses(si, reference, focus=focus)
    return EnvScene(si, focus, local, ColorCodes.from_colors(local.colors), features, Tensor(context.data), l_ref, (scene.task, scene.seed))


@dataclass
class Transition:
    observation_ref: tuple
    poses: list
    raw: np.ndarray  # (K, 5) pre-squash sample
    reward: float
    old_log_prob: float
    old_value: float
    components: RewardComponents | None = None
    features: np.ndarray | None = field(default=None, repr=False)
    l_tavp: LossVector | None = None


def evaluate_views(model: TavpModel, env: EnvScene, poses) -> tuple[LossVector, float, object]:
    """Losses and r1 of the frozen grounding model on the given views."""
    with no_grad():
        pred, cams = model.fine_predict(env.context, env.local, env.focus, poses, env.codes)
        lv, _ = stage1_losses(pred, env.inputs.scene, cams, model.cfg.sigma_px, model.cfg.trunc_sigmas)
    return lv, reward_r1(pred.view_heatmaps), (pred, cams)


def batched_log_prob(g: GaussianPoseParams, x) -> Tensor:
    """Per-sample diagonal-Gaussian log density for (B, K, 5) parameters."""
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
    z = ops.mul(ops.sub(x, g.mu), ops.exp(ops.scale(g.log_sigma, -1.0)))
    per_dim = ops.add_scalar(ops.sub(ops.scale(ops.square(z), -0.5), g.log_sigma), -_HALF_LOG_2PI)
    return ops.sum(per_dim, axis=(1, 2))


def pseudo_env_step(env: EnvScene, model: TavpModel, normalizers: RewardNormalizer,
                    rng: np.random.Generator, weights=(1.0, 1.0, 1.0), poses=None) -> Transition:
    """One interaction: sample K poses, score their views against the reference losses.

    ``poses`` bypasses the policy sample (used to plug in a fixed viewpoint set).
    """
    with no_grad():
        g, value = model.policy(env.features)
    shape = g.mu.shape[1:]
    eps = rng.standard_normal(shape)
    raw = g.mu.data[0] + np.exp(g.log_sigma.data[0]) * eps
    with no_grad():
        logp = batched_log_prob(g, raw[None]).data[0]
    if poses is None:
        poses = model.poses_from_raw(raw)
    l_tavp, r1, (pred, cams) = evaluate_views(model, env, poses)
    r0 = reward_r0(env.l_ref, l_tavp)
    r2 = reward_r2([c.extrinsics.translation for c in cams])
    comp = aggregate_reward((r0, r1, r2), weights, normalizers)
    return Transition(env.key, list(poses), raw, comp.total, float(logp), float(value.data[0]), comp, env.features, l_tavp)


# --- PPO --------------------------------------------------------------------


@dataclass(frozen=True)
class PpoConfig:
    clip_eps: float = 0.2
    epochs_per_batch: int = 4
    value_coef: float = 0.5
    entropy_coef: float = 0.0
    batch_size: int = 96
    minibatch_size: int = 32
    lr: float = 2.0e-6
    lr_schedule: str = "cosine"

    def __post_init__(self):
        if not self.clip_eps > 0:
            raise ValueError("clip_eps must be positive")
        if self.batch_size < 1 or self.minibatch_size < 1 or self.epochs_per_batch < 1:
            raise ValueError("batch sizes and epochs must be positive")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")


def ppo_surrogate(logp_new: Tensor, old_logp, advantages, clip_eps: float) -> tuple[Tensor, np.ndarray]:
    """Clipped surrogate loss -E[min(rho A, clip(rho) A)] and the ratios."""
    old = Tensor(np.asarray(old_logp, dtype=np.float64))
    adv = Tensor(np.asarray(advantages, dtype=np.float64))
    ratio = ops.exp(ops.sub(logp_new, old))
    s1 = ops.mul(ratio, adv)
    s2 = ops.mul(ops.clamp(ratio, 1.0 - clip_eps, 1.0 + clip_eps), adv)
    return ops.scale(ops.mean(ops.minimum(s1, s2)), -1.0), ratio.data.copy()


def ppo_loss(model: TavpModel, batch: list[Transition], cfg: PpoConfig):
    n = len(batch)
    feats = np.concatenate([t.features for t in batch], axis=0)
    g, value = model.policy(feats, batch=n)
    raw = np.stack([t.raw for t in batch])
    logp = batched_log_prob(g, raw)
    rewards = np.array([t.reward for t in batch])
    adv = rewards - np.array([t.old_value for t in batch])
    surr, ratio = ppo_surrogate(logp, [t.old_log_prob for t in batch], adv, cfg.clip_eps)
    v_loss = ops.mean(ops.square(ops.sub(value, Tensor(rewards))))
    loss = ops.add(surr, ops.scale(v_loss, cfg.value_coef))
    if cfg.entropy_coef:
        ent = ops.add_scalar(ops.scale(ops.sum(g.log_sigma), 1.0 / n), g.mu.size / n * (0.5 + _HALF_LOG_2PI))
        loss = ops.sub(loss, ops.scale(ent, cfg.entropy_coef))
    clipped = np.abs(ratio - 1.0) > cfg.clip_eps
    stats = {
        "surrogate": surr.item(),
        "value_loss": v_loss.item(),
        "ratio_mean": float(ratio.mean()),
        "clip_frac": float(clipped.mean()),
    }
    return loss, stats


def ppo_update(buffer: list[Transition], model: TavpModel, cfg: PpoConfig, optimizer: Lamb,
               step: int = 0, total_steps: int = 1, rng: np.random.Generator | None = None) -> dict:
    """Run ``epochs_per_batch`` passes of minibatch PPO over ``buffer``."""
    if len(buffer) < 1:
        raise ValueError("empty PPO buffer")
    rng = rng if rng is not None else np.random.default_rng(0)
    logs = []
    n = len(buffer)
    for epoch in range(cfg.epochs_per_batch):
        order = rng.permutation(n)
        for start in range(0, n, cfg.minibatch_size):
            mb = [buffer[i] for i in order[start:start + cfg.minibatch_size]]
            model.store.zero_grad()
            loss, stats = ppo_loss(model, mb, cfg)
            if not math.isfinite(loss.item()):
                raise TrainingDivergedError("PPO loss is not finite", {"epoch": epoch, **stats})
            loss.backward()
            lr = cosine_lr(cfg.lr, step, total_steps) if cfg.lr_schedule == "cosine" else cfg.lr
            stats["grad_norm"] = optimizer.step(lr)
            stats["loss"] = loss.item()
            stats["epoch"] = epoch
            logs.append(stats)
            step += 1
    first = [s for s in logs if s["epoch"] == 0]
    out = {k: float(np.mean([s[k] for s in logs])) for k in ("loss", "surrogate", "value_loss", "clip_frac", "grad_norm")}
    out["ratio_mean_first_epoch"] = float(np.mean([s["ratio_mean"] for s in first]))
    out["ratio_mean"] = float(np.mean([s["ratio_mean"] for s in logs]))
    out["steps"] = step
    return out


__all__ = [
    "WelfordState", "welford_update", "welford_update_normalize", "reward_r0", "reward_r1",
    "reward_r2", "RewardComponents", "RewardNormalizer", "combine_reward", "aggregate_reward",
    "EnvScene", "prepare_env_scene", "Transition", "evaluate_views", "batched_log_prob",
    "pseudo_env_step", "PpoConfig", "ppo_surrogate", "ppo_loss", "ppo_update",
]
