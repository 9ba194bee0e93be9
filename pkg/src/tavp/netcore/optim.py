"""Optimizers and learning-rate schedules over a :class:`ParamStore`."""

from __future__ import annotations

import math

import numpy as np

from .params import ParamStore


def cosine_lr(base_lr: float, step: int, total_steps: int, floor: float = 0.0) -> float:
    if total_steps <= 1:
        return base_lr
    frac = min(max(step / (total_steps - 1), 0.0), 1.0)
    return floor + (base_lr - floor) * 0.5 * (1.0 + math.cos(math.pi * frac))


class Lamb:
    """Layer-wise adaptive moments (LAMB); ``trust_ratio=False`` reduces it to Adam(W).

    Only the parameters named in ``names`` are ever touched, which is what the
    stage freeze contracts rely on. With ``lazy=True`` (the default) a
    parameter that received no gradient in the current backward pass keeps its
    value and moment estimates, so unrouted experts stay exactly as they were;
    bias correction then uses each parameter's own update count.
    """

    def __init__(self, store: ParamStore, names, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay: float = 0.0, trust_ratio: bool = True, max_grad_norm: float | None = 1.0,
                 lazy: bool = True):
        self.store = store
        self.names = list(names)
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.trust_ratio = trust_ratio
        self.max_grad_norm = max_grad_norm
        self.lazy = lazy
        self.t = 0
        self.counts = {n: 0 for n in self.names}
        self.m = {n: np.zeros_like(store[n].data) for n in self.names}
        self.v = {n: np.zeros_like(store[n].data) for n in self.names}

    def active(self) -> list[str]:
        if not self.lazy:
            return self.names
        return [n for n in self.names if self.store[n].touched]

    def grad_norm(self, names=None) -> float:
        names = self.names if names is None else names
        return math.sqrt(sum(float(np.vdot(self.store[n].grad, self.store[n].grad)) for n in names))

    def step(self, lr: float) -> float:
        self.t += 1
        names = self.active()
        gnorm = self.grad_norm(names)
        clip = 1.0
        if self.max_grad_norm is not None and gnorm > self.max_grad_norm:
            clip = self.max_grad_norm / gnorm
        for n in names:
            self.counts[n] += 1
            c1 = 1.0 - self.b1 ** self.counts[n]
            c2 = 1.0 - self.b2 ** self.counts[n]
            p = self.store[n]
            g = p.grad if clip == 1.0 else p.grad * clip
            m, v = self.m[n], self.v[n]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * (g * g)
            update = np.sqrt(v * (1.0 / c2))
            update += self.eps
            np.divide(m, update, out=update)
            update *= 1.0 / c1
            if self.weight_decay:
                update += self.weight_decay * p.data
            ratio = 1.0
            if self.trust_ratio:
                w_norm = math.sqrt(float(np.vdot(p.data, p.data)))
                u_norm = math.sqrt(float(np.vdot(update, update)))
                if w_norm > 0.0 and u_norm > 0.0:
                    ratio = w_norm / u_norm
            update *= lr * ratio
            p.data -= update
        return gnorm
