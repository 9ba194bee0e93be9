"""Run configuration and its plain-text ``key = value`` file format.

One setting per line, ``#`` starts a comment, blank lines are ignored. Values
are parsed according to the field's type (int, float, bool, str). Unknown keys
are errors; missing keys keep their defaults.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .errors import ConfigError
from .geometry import RadialBounds
from .rl import PpoConfig
from .taskmoe import MoEConfig
from .tasks.model import ModelConfig
from .tasks.scenes import TASK_INDEX, TASKS

_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    # viewpoints
    K: int = 3
    r_min: float = 0.75
    r_max: float = 1.3
    theta_max: float = math.pi
    resolution: int = 224
    coarse_resolution: int = 96
    n_points: int = 2048
    fov_y_deg: float = 60.0
    point_radius_px: int = 1
    sigma_px: float = 1.5
    # task-aware mixture of experts
    use_moe: bool = True
    n_gates: int = 8
    n_experts: int = 16
    top_k: int = 2
    embed_dim: int = 512
    # roster and data
    tasks: str = "all"
    train_scenes_per_task: int = 8
    eval_scenes: int = 200
    oracle_coarse: bool = False
    success_tau: float = 0.05
    # stage 1 / stage 3 supervised phases
    stage1_steps: int = 800
    stage1_lr: float = 4.0e-3
    stage3_steps: int = 200
    stage3_lr: float = 5.0e-4
    focus_jitter: float = 0.04
    # stage 2 reinforcement learning
    stage2_epochs: int = 20
    ppo_batch_size: int = 96
    ppo_minibatch_size: int = 32
    ppo_epochs: int = 4
    ppo_clip: float = 0.2
    value_coef: float = 0.5
    entropy_coef: float = 0.0
    ppo_lr: float = 2.0e-6
    reward_w0: float = 1.0
    reward_w1: float = 1.0
    reward_w2: float = 1.0
    log_every: int = 20

    def __post_init__(self):
        _check(self)

    # --- derived configs ----------------------------------------------------

    def bounds(self) -> RadialBounds:
        return RadialBounds(self.r_min, self.r_max)

    def task_names(self) -> list[str]:
        if self.tasks.strip() == "all":
            return [t.name for t in TASKS]
        return [t.strip() for t in self.tasks.split(",") if t.strip()]

    def moe_config(self) -> MoEConfig:
        return MoEConfig(self.n_gates, self.n_experts, self.top_k, len(TASKS), self.embed_dim, self.use_moe)

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            K=self.K,
            bounds=self.bounds(),
            theta_max=self.theta_max,
            resolution=self.resolution,
            coarse_resolution=self.coarse_resolution,
            fov_y=math.radians(self.fov_y_deg),
            point_radius_px=self.point_radius_px,
            sigma_px=self.sigma_px,
            n_points=self.n_points,
            oracle_coarse=self.oracle_coarse,
            moe=self.moe_config(),
        )

    def ppo_config(self) -> PpoConfig:
        return PpoConfig(
            clip_eps=self.ppo_clip,
            epochs_per_batch=self.ppo_epochs,
            value_coef=self.value_coef,
            entropy_coef=self.entropy_coef,
            batch_size=self.ppo_batch_size,
            minibatch_size=self.ppo_minibatch_size,
            lr=self.ppo_lr,
        )

    def reward_weights(self) -> tuple[float, float, float]:
        return (self.reward_w0, self.reward_w1, self.reward_w2)

    def with_overrides(self, **kw) -> "RunConfig":
        return replace(self, **kw)


def _fail(msg: str, field_name: str):
    raise ConfigError(msg, field=field_name)


def _check(c: RunConfig) -> None:
    if not (0.0 < c.r_min < c.r_max):
        _fail(f"r_min/r_max: need 0 < r_min < r_max, got r_min={c.r_min}, r_max={c.r_max}", "r_min/r_max")
    positive_ints = ("K", "resolution", "coarse_resolution", "n_points", "n_gates", "n_experts", "top_k",
                     "embed_dim", "eval_scenes", "ppo_batch_size", "ppo_minibatch_size", "ppo_epochs", "log_every",
                     "train_scenes_per_task", "point_radius_px")
    for name in positive_ints:
        if getattr(c, name) < 1:
            _fail(f"{name} must be >= 1, got {getattr(c, name)}", name)
    if c.K < 2:
        _fail(f"K must be >= 2 for the diversity reward, got {c.K}", "K")
    if not (0.0 < c.theta_max <= math.pi):
        _fail(f"theta_max must lie in (0, pi], got {c.theta_max}", "theta_max")
    if not (0.0 < c.fov_y_deg < 180.0):
        _fail(f"fov_y_deg must lie in (0, 180), got {c.fov_y_deg}", "fov_y_deg")
    if c.top_k > c.n_experts:
        _fail(f"top_k ({c.top_k}) exceeds n_experts ({c.n_experts})", "top_k")
    if c.use_moe and c.n_gates >= len(TASKS):
        _fail(f"n_gates ({c.n_gates}) must be smaller than the number of tasks ({len(TASKS)})", "n_gates")
    for name in ("stage1_steps", "stage3_steps", "stage2_epochs"):
        if getattr(c, name) < 0:
            _fail(f"{name} must be >= 0", name)
    for name in ("stage1_lr", "stage3_lr", "ppo_lr", "ppo_clip", "sigma_px", "success_tau"):
        if not getattr(c, name) > 0:
            _fail(f"{name} must be positive, got {getattr(c, name)}", name)
    for name in ("value_coef", "entropy_coef", "focus_jitter"):
        if getattr(c, name) < 0:
            _fail(f"{name} must be non-negative", name)
    for name in c.task_names():
        if name not in TASK_INDEX:
            _fail(f"unknown task {name!r}", "tasks")
    if not c.task_names():
        _fail("task roster is empty", "tasks")


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _convert(name: str, text: str, line: int):
    kind = type(getattr(RunConfig(), name))
    try:
        if kind is bool:
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(text)
        if kind is int:
            return int(text)
        if kind is float:
            value = float(text)
            if not math.isfinite(value):
                raise ValueError(text)
            return value
        return text
    except ValueError:
        raise ConfigError(f"cannot parse {text!r} as {kind.__name__} for {name}", line=line, field=name) from None


def parse_config_text(text: str) -> RunConfig:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", line=lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"unknown key {key!r}", line=lineno, field=key)
        if key in values:
            raise ConfigError(f"duplicate key {key!r}", line=lineno, field=key)
        values[key] = _convert(key, value, lineno)
    return RunConfig(**values)


def parse_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(path.read_text(encoding="utf-8"))


def serialize_config(cfg: RunConfig) -> str:
    lines = []
    for f in fields(RunConfig):
        v = getattr(cfg, f.name)
        if isinstance(v, bool):
            text = "true" if v else "false"
        elif isinstance(v, float):
            text = repr(v)
        else:
            text = str(v)
        lines.append(f"{f.name} = {text}")
    return "\n".join(lines) + "\n"


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(serialize_config(cfg).encode("utf-8")).hexdigest()
