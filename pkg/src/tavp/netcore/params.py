"""Named parameter storage with gradient buffers."""

from __future__ import annotations

import hashlib

import numpy as np

from ..errors import ShapeError
from .tensor import Tensor


class ParamStore:
    """Ordered collection of named leaf tensors.

    Every parameter owns a same-shaped ``grad`` buffer. Initialization draws
    from a generator seeded at construction, so the creation order fully
    determines the initial values.
    """

    def __init__(self, seed: int = 0):
        self.seed = seed
        self._rng = np.random.default_rng(seed)
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, shape, init="he") -> Tensor:
        if name in self._params:
            raise KeyError(f"parameter {name!r} already exists")
        shape = tuple(int(s) for s in shape)
        if isinstance(init, np.ndarray):
            if init.shape != shape:
                raise ShapeError(f"{name}: init array {init.shape} != {shape}")
            data = init.astype(np.float64).copy()
        elif init == "he":
            fan_in = shape[0] if len(shape) > 1 else max(shape[0], 1)
            bound = np.sqrt(6.0 / fan_in)
            data = self._rng.uniform(-bound, bound, size=shape)
        elif init == "small":
            fan_in = shape[0] if len(shape) > 1 else max(shape[0], 1)
            bound = 0.1 * np.sqrt(6.0 / fan_in)
            data = self._rng.uniform(-bound, bound, size=shape)
        elif init == "zeros":
            data = np.zeros(shape)
        elif init == "ones":
            data = np.ones(shape)
        else:
            raise ValueError(f"unknown init {init!r}")
        t = Tensor(data, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def dense(self, prefix: str, n_in: int, n_out: int, init="he") -> None:
        self.add(f"{prefix}.w", (n_in, n_out), init)
        self.add(f"{prefix}.b", (n_out,), "zeros")

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self, prefix: str | tuple = "") -> list[str]:
        return [n for n in self._params if n.startswith(prefix)]

    def items(self):
        return self._params.items()

    def zero_grad(self) -> None:
        """Clear gradients; only buffers written since the last call need resetting."""
        for p in self._params.values():
            if p.touched:
                p.grad[...] = 0.0
                p.touched = False

    def num_parameters(self) -> int:
        return sum(p.size for p in self._params.values())

    def state(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self._params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for name, arr in state.items():
            if name not in self._params:
                raise KeyError(f"unknown parameter {name!r}")
            p = self._params[name]
            if p.shape != arr.shape:
                raise ShapeError(f"{name}: expected {p.shape}, got {arr.shape}")
            p.data[...] = arr

    def clone(self) -> "ParamStore":
        other = ParamStore(self.seed)
        for name, p in self._params.items():
            other.add(name, p.shape, p.data)
        return other

    def digest(self, prefixes: tuple[str, ...] | None = None, exclude: tuple[str, ...] = ()) -> str:
        """SHA-256 over names and raw bytes of the selected parameters."""
        h = hashlib.sha256()
        for name, p in self._params.items():
            if prefixes is not None and not name.startswith(prefixes):
                continue
            if exclude and name.startswith(exclude):
                continue
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
        return h.hexdigest()
