"""Parameter containers and the SGD / Adam update rules.

Updates are pure functions: they take parameters, gradients and (for Adam)
an optimizer state, and return fresh objects. Replaying the same inputs
yields bit-identical outputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor

__all__ = ["ParamSet", "AdamState", "sgd_step", "adam_step"]


class ParamSet:
    """An ordered, named collection of parameter tensors."""

    def __init__(self, items=None):
        self._names: list[str] = []
        self._tensors: dict[str, Tensor] = {}
        for name, t in items or []:
            self.add(name, t)

    def add(self, name: str, t: Tensor):
        if name in self._tensors:
            raise ValueError(f"duplicate parameter name: {name!r}")
        self._names.append(name)
        self._tensors[name] = t

    @property
    def names(self) -> list:
        return list(self._names)

    def tensors(self) -> list:
        return [self._tensors[n] for n in self._names]

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __len__(self):
        return len(self._names)

    def __iter__(self):
        return iter(self._names)

    @property
    def total_count(self) -> int:
        return sum(t.size for t in self.tensors())

    def replace(self, tensors) -> "ParamSet":
        """New ParamSet with the same names bound to the given tensors."""
        tensors = list(tensors)
        if len(tensors) != len(self._names):
            raise ValueError("replace: tensor count mismatch")
        return ParamSet(zip(self._names, tensors))

    def copy_arrays(self) -> list:
        return [t.data.copy() for t in self.tensors()]


@dataclass
class AdamState:
    """First/second moment buffers plus the step counter."""

    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init(cls, params: ParamSet) -> "AdamState":
        return cls(
            m=[np.zeros(p.shape, dtype=p.dtype) for p in params.tensors()],
            v=[np.zeros(p.shape, dtype=p.dtype) for p in params.tensors()],
        )


def _check_aligned(params: ParamSet, grads, what: str):
    ts = params.tensors()
    if len(grads) != len(ts):
        raise ValueError(f"{what}: gradient count mismatch")
    for p, g in zip(ts, grads):
        if p.shape != g.shape:
            raise ValueError(f"{what}: shape mismatch {p.shape} vs {g.shape}")


def sgd_step(params: ParamSet, grads, lr: float) -> ParamSet:
    """theta <- theta - lr * g, elementwise."""
    if lr <= 0:
        raise ValueError("sgd_step: lr must be positive")
    _check_aligned(params, grads, "sgd_step")
    new = [
        Tensor(p.data - p.dtype.type(lr) * g.data, requires_grad=True)
        for p, g in zip(params.tensors(), grads)
    ]
    return params.replace(new)


def adam_step(params: ParamSet, grads, state: AdamState, lr: float):
    """Bias-corrected Adam update. Returns (new params, new state)."""
    if lr <= 0:
        raise ValueError("adam_step: lr must be positive")
    _check_aligned(params, grads, "adam_step")
    t = state.t + 1
    b1, b2, eps = state.beta1, state.beta2, state.eps
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params.tensors(), grads, state.m, state.v):
        dt = p.dtype.type
        gm = g.data
        m2 = dt(b1) * m + dt(1 - b1) * gm
        v2 = dt(b2) * v + dt(1 - b2) * (gm * gm)
        mhat = m2 / dt(1 - b1**t)
        vhat = v2 / dt(1 - b2**t)
        new_p.append(
            Tensor(p.data - dt(lr) * mhat / (np.sqrt(vhat) + dt(eps)), True)
        )
        new_m.append(m2)
        new_v.append(v2)
    return params.replace(new_p), AdamState(new_m, new_v, t, b1, b2, eps)
