from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    """First/second moment accumulators keyed by parameter name."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


class Adam:
    def __init__(self, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, state=None):
        if lr <= 0:
            raise ValueError(f"lr must be positive, got {lr}")
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.state = state if state is not None else AdamState()

    def step(self, params, grads):
        """In-place update of ``params[name]`` (numpy arrays) from ``grads[name]``."""
        st = self.state
        st.step += 1
        bc1 = 1.0 - self.beta1**st.step
        bc2 = 1.0 - self.beta2**st.step
        for name, g in grads.items():
            p = params[name]
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {p.shape}")
            m = st.m.get(name)
            v = st.v.get(name)
            if m is None:
                m = np.zeros_like(p)
                v = np.zeros_like(p)
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * g * g
            st.m[name], st.v[name] = m, v
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
