"""Adam optimizer with bias correction and no weight decay."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, List

import numpy as np

from ..errors import OptimizerError
from .tensor import Param


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Iterable[Param], state: AdamState) -> AdamState:
    """Apply one Adam update in place to every param and advance ``state.step`` by one."""
    params = list(params)
    if not (0.0 < state.beta1 < 1.0 and 0.0 < state.beta2 < 1.0):
        raise OptimizerError(f"Adam betas must lie in (0, 1), got {state.beta1}, {state.beta2}")
    if state.step >= np.iinfo(np.int64).max:
        raise OptimizerError("Adam step counter overflow")
    for p in params:
        if p.grad is None or not np.all(np.isfinite(p.grad)):
            raise OptimizerError(f"non-finite or missing gradient for parameter {p.name!r}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for p in params:
        g = p.grad
        m = state.m.get(p.name)
        if m is None:
            m = np.zeros_like(p.data)
            state.v[p.name] = np.zeros_like(p.data)
        v = state.v[p.name]
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[p.name], state.v[p.name] = m, v
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - update).astype(p.data.dtype, copy=False)
    return state


class Adam:
    """Thin stateful wrapper: ``opt.zero_grad(); loss.backward(); opt.step()``."""

    def __init__(self, params: Iterable[Param], lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params: List[Param] = list(params)
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise OptimizerError("Adam needs uniquely named parameters")
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    @property
    def lr(self) -> float:
        return self.state.lr

    @lr.setter
    def lr(self, value: float) -> None:
        self.state.lr = value

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        adam_step(self.params, self.state)
