"""Adam moments over named float arrays."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


class Adam:
    """Bias-corrected Adam; `update` returns increments to subtract from the parameters."""

    def __init__(
        self,
        learning_rate: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        state: AdamState | None = None,
    ) -> None:
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state = state or AdamState()

    def update(self, grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        s = self.state
        s.step += 1
        c1 = 1.0 - self.beta1**s.step
        c2 = 1.0 - self.beta2**s.step
        steps = {}
        for name, g in grads.items():
            g = np.asarray(g, dtype=np.float64)
            m = s.m.get(name)
            v = s.v.get(name)
            m = np.zeros_like(g) if m is None else m.astype(np.float64)
            v = np.zeros_like(g) if v is None else v.astype(np.float64)
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * g * g
            s.m[name], s.v[name] = m, v
            steps[name] = self.learning_rate * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return steps
