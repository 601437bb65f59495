"""Parameter containers and the optimizer shared by the trainable parts."""

from __future__ import annotations

import contextlib
import hashlib
from typing import Iterator

import numpy as np

from .tensor import Tensor


class Module:
    """Ordered registry of named parameter tensors.

    Subclasses register parameters with :meth:`param`; registration order is
    the declaration order used for serialization and checksums.
    """

    def __init__(self) -> None:
        self._params: dict[str, Tensor] = {}

    def param(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(value, requires_grad=True)
        self._params[name] = t
        return t

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(self._params.items())

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) ^ set(state)
        if missing:
            raise KeyError(f"state keys differ: {sorted(missing)}")
        for k, t in params.items():
            v = np.asarray(state[k], dtype=np.float64)
            if v.shape != t.shape:
                raise ValueError(f"{k}: shape {v.shape} != {t.shape}")
            t.data = v.copy()

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.zero_grad()

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, t in self.named_parameters():
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
        return h.hexdigest()

    @contextlib.contextmanager
    def frozen(self) -> Iterator[None]:
        """Treat every parameter as a constant for graphs built inside the block."""
        flags = [(t, t.requires_grad) for t in self.parameters()]
        for t, _ in flags:
            t.requires_grad = False
        try:
            yield
        finally:
            for t, flag in flags:
                t.requires_grad = flag


def checksum_of(*modules: Module) -> str:
    h = hashlib.sha256()
    for m in modules:
        h.update(m.checksum().encode())
    return h.hexdigest()


class Adam:
    """Adam with bias correction; ``lr`` may be changed between steps."""

    def __init__(self, params: list[Tensor], lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
