"""Composite layers built from the primitives in :mod:`ops`."""

from __future__ import annotations

import math
from dataclasses import dataclass

from ..errors import ShapeError
from . import ops
from .params import ParamStore
from .tensor import Tensor, as_tensor

LOG_SIGMA_MIN = -5.0
LOG_SIGMA_MAX = 2.0
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass(frozen=True)
class Dense:
    name: str
    n_in: int
    n_out: int
    activation: str = "relu"  # "relu" or "linear"


def build_mlp(store: ParamStore, prefix: str, sizes, final_activation: str = "linear", init="he") -> list[Dense]:
    """Register an MLP's parameters and return its layer spec."""
    spec = []
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        last = i == len(sizes) - 2
        layer = Dense(f"{prefix}.{i}", n_in, n_out, final_activation if last else "relu")
        store.dense(layer.name, n_in, n_out, init if not last else init)
        spec.append(layer)
    return spec


def dense(x: Tensor, store: ParamStore, name: str) -> Tensor:
    return ops.add_row(ops.matmul(x, store[f"{name}.w"]), store[f"{name}.b"])


def mlp_forward(x, store: ParamStore, layer_spec) -> Tensor:
    h = as_tensor(x)
    for layer in layer_spec:
        if h.data.ndim != 2 or h.shape[1] != layer.n_in:
            raise ShapeError(f"{layer.name}: expected input width {layer.n_in}, got shape {h.shape}")
        h = dense(h, store, layer.name)
        if layer.activation == "relu":
            h = ops.relu(h)
        elif layer.activation != "linear":
            raise ValueError(f"unknown activation {layer.activation!r}")
    return h


def add_cross_attention(store: ParamStore, prefix: str, dim: int) -> None:
    for proj in ("q", "k", "v"):
        store.add(f"{prefix}.w{proj}", (dim, dim), "he" if proj != "v" else "small")


def cross_attention(query, keys_values, store: ParamStore, prefix: str) -> Tensor:
    """Single-head scaled dot-product attention of ``query`` rows over ``keys_values``, plus residual."""
    query, keys_values = as_tensor(query), as_tensor(keys_values)
    dim = store[f"{prefix}.wq"].shape[0]
    if query.data.ndim != 2 or keys_values.data.ndim != 2:
        raise ShapeError("cross_attention expects 2D query and key/value tensors")
    if query.shape[1] != dim or keys_values.shape[1] != dim:
        raise ShapeError(f"cross_attention: embedding dims {query.shape[1]}, {keys_values.shape[1]} != {dim}")
    q = ops.matmul(query, store[f"{prefix}.wq"])
    k = ops.matmul(keys_values, store[f"{prefix}.wk"])
    v = ops.matmul(keys_values, store[f"{prefix}.wv"])
    logits = ops.scale(ops.matmul(q, ops.transpose(k)), 1.0 / math.sqrt(dim))
    attn = ops.softmax(logits, axis=-1)
    return ops.add(ops.matmul(attn, v), query)


def add_film(store: ParamStore, prefix: str, cond_dim: int, feat_dim: int) -> None:
    # gamma starts at 1 and beta at 0 so the layer begins as the identity
    store.add(f"{prefix}.gamma.w", (cond_dim, feat_dim), "small")
    store.add(f"{prefix}.gamma.b", (feat_dim,), "ones")
    store.add(f"{prefix}.beta.w", (cond_dim, feat_dim), "small")
    store.add(f"{prefix}.beta.b", (feat_dim,), "zeros")


def film_params(condition, store: ParamStore, prefix: str) -> tuple[Tensor, Tensor]:
    condition = as_tensor(condition)
    c = ops.reshape(condition, (1, condition.size))
    gamma = ops.reshape(dense(c, store, f"{prefix}.gamma"), (-1,))
    beta = ops.reshape(dense(c, store, f"{prefix}.beta"), (-1,))
    return gamma, beta


def film(features, condition, store: ParamStore, prefix: str) -> Tensor:
    """Feature-wise affine modulation: gamma(condition) * features + beta(condition)."""
    features = as_tensor(features)
    gamma, beta = film_params(condition, store, prefix)
    if features.data.ndim != 2 or features.shape[1] != gamma.shape[0]:
        raise ShapeError(f"film: features {features.shape} vs modulation width {gamma.shape[0]}")
    return ops.add_row(ops.mul_row(features, gamma), beta)


def softmax_entropy(logits) -> Tensor:
    """Entropy in nats of softmax(logits) over all entries."""
    logits = as_tensor(logits)
    flat = ops.reshape(logits, (logits.size,))
    logp = ops.log_softmax(flat)
    return ops.scale(ops.sum(ops.mul(ops.exp(logp), logp)), -1.0)


@dataclass
class GaussianPoseParams:
    mu: Tensor  # (K, 5)
    log_sigma: Tensor  # (K, 5), already clamped

    @classmethod
    def from_raw(cls, mu, log_sigma_raw) -> "GaussianPoseParams":
        mu, log_sigma_raw = as_tensor(mu), as_tensor(log_sigma_raw)
        if mu.shape != log_sigma_raw.shape:
            raise ShapeError(f"mu {mu.shape} and log_sigma {log_sigma_raw.shape} differ")
        return cls(mu, ops.clamp(log_sigma_raw, LOG_SIGMA_MIN, LOG_SIGMA_MAX))


def sample_reparam(g: GaussianPoseParams, eps) -> Tensor:
    eps = as_tensor(eps)
    if eps.shape != g.mu.shape:
        raise ShapeError(f"eps {eps.shape} does not match mu {g.mu.shape}")
    return ops.add(g.mu, ops.mul(ops.exp(g.log_sigma), eps))


def gaussian_log_prob(g: GaussianPoseParams, x) -> Tensor:
    """Diagonal-Gaussian log density summed over every dimension."""
    x = as_tensor(x)
    if x.shape != g.mu.shape:
        raise ShapeError(f"x {x.shape} does not match mu {g.mu.shape}")
    z = ops.mul(ops.sub(x, g.mu), ops.exp(ops.scale(g.log_sigma, -1.0)))
    per_dim = ops.add_scalar(ops.add(ops.scale(ops.square(z), -0.5), ops.scale(g.log_sigma, -1.0)), -_HALF_LOG_2PI)
    return ops.sum(per_dim)


def gaussian_entropy(g: GaussianPoseParams) -> Tensor:
    return ops.add_scalar(ops.sum(g.log_sigma), g.mu.size * (0.5 + _HALF_LOG_2PI))
