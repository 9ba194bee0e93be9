"""Task-aware mixture of experts.

A context vector is built by letting the instruction embedding attend over
visual tokens and modulating the result with a learned task embedding
(FiLM). One of ``n_gates`` gates is picked per context (fewer gates than
tasks, so tasks share gates), and that gate's router activates the top-k
experts of a shared pool.
"""

from __future__ import annotations

import json
from collections import Counter, defaultdict
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError, ShapeError
from .netcore import ops
from .netcore.layers import (
    Dense,
    add_cross_attention,
    add_film,
    build_mlp,
    cross_attention,
    dense,
    film,
    mlp_forward,
)
from .netcore.params import ParamStore
from .netcore.tensor import Tensor, as_tensor

TASK_EMBED_DIM = 32
TOKEN_DIM = 32
N_TOKENS = 8


@dataclass(frozen=True)
class MoEConfig:
    n_gates: int = 8
    n_experts: int = 16
    top_k: int = 2
    n_tasks: int = 12
    embed_dim: int = 512
    use_moe: bool = True

    def __post_init__(self):
        if self.use_moe and not (self.n_gates < self.n_tasks):
            raise InvalidInputError(
                f"n_gates ({self.n_gates}) must be smaller than n_tasks ({self.n_tasks})"
            )
        if not (1 <= self.top_k <= self.n_experts):
            raise InvalidInputError(f"top_k must lie in [1, n_experts], got {self.top_k}")
        if self.n_gates < 1 or self.embed_dim < 1:
            raise InvalidInputError("n_gates and embed_dim must be positive")


@dataclass
class TaskContext:
    task_id: int
    instruction_emb: np.ndarray  # (embed_dim,)
    visual_feat: Tensor  # (tokens, embed_dim)


@dataclass
class RoutingDecision:
    gate_index: int
    expert_indices: tuple[int, ...]
    expert_weights: np.ndarray
    weights_tensor: Tensor | None = field(default=None, repr=False, compare=False)


def build_params(store: ParamStore, cfg: MoEConfig, prefix: str = "moe") -> None:
    d = cfg.embed_dim
    add_cross_attention(store, f"{prefix}.xattn", d)
    if cfg.use_moe:
        store.add(f"{prefix}.task_embed", (cfg.n_tasks, TASK_EMBED_DIM), "he")
        add_film(store, f"{prefix}.film", TASK_EMBED_DIM, d)
        store.dense(f"{prefix}.gate", d, cfg.n_gates, "small")
        for g in range(cfg.n_gates):
            store.dense(f"{prefix}.router.{g}", d, cfg.n_experts, "small")
        for e in range(cfg.n_experts):
            build_mlp(store, f"{prefix}.expert.{e}", [d, d, d], init="small")
    else:
        build_mlp(store, f"{prefix}.dense", [d, d, d], init="small")


def expert_spec(prefix: str, d: int) -> list[Dense]:
    return [Dense(f"{prefix}.0", d, d, "relu"), Dense(f"{prefix}.1", d, d, "linear")]


def fuse_context(ctx: TaskContext, store: ParamStore, cfg: MoEConfig, prefix: str = "moe") -> Tensor:
    """Instruction-over-vision cross-attention, then FiLM with the task embedding. Returns (1, D)."""
    d = cfg.embed_dim
    q = Tensor(np.asarray(ctx.instruction_emb, dtype=np.float64).reshape(1, -1))
    if q.shape[1] != d or ctx.visual_feat.shape[1] != d:
        raise ShapeError(f"context embeddings must have width {d}")
    if not (0 <= ctx.task_id < cfg.n_tasks):
        raise InvalidInputError(f"task_id {ctx.task_id} outside [0, {cfg.n_tasks})")
    h = cross_attention(q, ctx.visual_feat, store, f"{prefix}.xattn")
    if not cfg.use_moe:
        return h
    task_vec = ops.index(store[f"{prefix}.task_embed"], ctx.task_id)
    return film(h, task_vec, store, f"{prefix}.film")


def gate_logits(fused: Tensor, store: ParamStore, prefix: str = "moe") -> Tensor:
    return ops.reshape(dense(fused, store, f"{prefix}.gate"), (-1,))


def select_gate(fused: Tensor, store: ParamStore, prefix: str = "moe") -> int:
    """Argmax of the gate classifier; ``np.argmax`` resolves ties to the lowest index."""
    return int(np.argmax(gate_logits(fused, store, prefix).data))


def route(fused: Tensor, gate_index: int, store: ParamStore, top_k: int, prefix: str = "moe") -> RoutingDecision:
    scores = ops.softmax(ops.reshape(dense(fused, store, f"{prefix}.router.{gate_index}"), (-1,)))
    # stable sort on negated scores keeps lower indices first among ties
    order = np.argsort(-scores.data, kind="stable")[:top_k]
    chosen = ops.index(scores, order)
    weights = ops.mul_scalar(chosen, ops.reshape(_reciprocal(ops.sum(chosen)), (1,)))
    return RoutingDecision(
        gate_index=int(gate_index),
        expert_indices=tuple(int(i) for i in order),
        expert_weights=weights.data.copy(),
        weights_tensor=weights,
    )


def _reciprocal(x: Tensor) -> Tensor:
    return ops.exp(ops.scale(ops.log(x), -1.0))


def moe_forward(inp, decision: RoutingDecision, store: ParamStore, cfg: MoEConfig, prefix: str = "moe") -> Tensor:
    """Weighted sum of the selected experts' outputs; unselected experts are never evaluated."""
    inp = as_tensor(inp)
    w = decision.weights_tensor if decision.weights_tensor is not None else Tensor(decision.expert_weights)
    out = None
    for slot, e in enumerate(decision.expert_indices):
        y = mlp_forward(inp, store, expert_spec(f"{prefix}.expert.{e}", cfg.embed_dim))
        term = ops.mul_scalar(y, ops.index(w, slice(slot, slot + 1)))
        out = term if out is None else ops.add(out, term)
    return out


class TaskMoE:
    """Context fusion + gated sparse experts, with routing statistics."""

    def __init__(self, store: ParamStore, cfg: MoEConfig, prefix: str = "moe"):
        self.store = store
        self.cfg = cfg
        self.prefix = prefix
        self.stats = RoutingStats()

    def __call__(self, ctx: TaskContext, record: bool = True) -> tuple[Tensor, RoutingDecision | None]:
        fused = fuse_context(ctx, self.store, self.cfg, self.prefix)
        if not self.cfg.use_moe:
            h = mlp_forward(fused, self.store, expert_spec(f"{self.prefix}.dense", self.cfg.embed_dim))
            return ops.add(h, fused), None
        logits = gate_logits(fused, self.store, self.prefix)
        gate = int(np.argmax(logits.data))
        decision = route(fused, gate, self.store, self.cfg.top_k, self.prefix)
        out = moe_forward(fused, decision, self.store, self.cfg, self.prefix)
        # straight-through: forward value unchanged, gradient reaches the chosen gate's logit
        p_gate = ops.index(ops.softmax(logits), slice(gate, gate + 1))
        out = ops.mul_scalar(out, ops.scale(p_gate, 1.0 / float(p_gate.data[0])))
        if record:
            self.stats.record(ctx.task_id, decision)
        return ops.add(out, fused), decision


class RoutingStats:
    """Per-step routing log plus per-gate / per-expert usage counts."""

    def __init__(self):
        self.records: list[dict] = []

    def record(self, task_id: int, decision: RoutingDecision, step: int | None = None) -> None:
        self.records.append(
            {
                "step": len(self.records) if step is None else step,
                "task_id": int(task_id),
                "gate": decision.gate_index,
                "experts": list(decision.expert_indices),
                "weights": [float(w) for w in decision.expert_weights],
            }
        )

    def clear(self) -> None:
        self.records.clear()

    def gate_usage(self) -> dict[int, int]:
        return dict(sorted(Counter(r["gate"] for r in self.records).items()))

    def expert_usage(self) -> dict[int, int]:
        c = Counter(e for r in self.records for e in r["experts"])
        return dict(sorted(c.items()))

    def tasks_per_gate(self) -> dict[int, list[int]]:
        out = defaultdict(set)
        for r in self.records:
            out[r["gate"]].add(r["task_id"])
        return {g: sorted(t) for g, t in sorted(out.items())}

    def shared_gates(self) -> dict[int, list[int]]:
        return {g: t for g, t in self.tasks_per_gate().items() if len(t) >= 2}

    def summary(self) -> dict:
        return {
            "gate_usage": {str(k): v for k, v in self.gate_usage().items()},
            "expert_usage": {str(k): v for k, v in self.expert_usage().items()},
            "tasks_per_gate": {str(k): v for k, v in self.tasks_per_gate().items()},
        }

    def write_jsonl(self, path, stage: str | None = None) -> None:
        with open(path, "a", encoding="utf-8") as fh:
            for r in self.records:
                row = dict(r)
                if stage is not None:
                    row = {"stage": stage, **row}
                fh.write(json.dumps(row, sort_keys=True) + "\n")
