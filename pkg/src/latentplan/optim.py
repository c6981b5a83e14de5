"""Adam over a named parameter set, with checkpointable state."""

from __future__ import annotations

import numpy as np

from .nets import ParameterSet

ADAM_STEP = 3e-4
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class Adam:
    def __init__(self, params: ParameterSet, lr: float = ADAM_STEP,
                 beta1: float = ADAM_BETA1, beta2: float = ADAM_BETA2,
                 eps: float = ADAM_EPS):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.items()}

    def step(self, grads: dict) -> None:
        """Apply one update in place; ``grads`` maps parameter names to
        arrays (missing names are treated as zero gradient)."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, p in self.params.items():
            g = grads.get(k)
            if g is None:
                g = np.zeros_like(p.data)
            m = self.m[k]
            v = self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * np.square(g)
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)

    def state_arrays(self) -> dict:
        """Flat arrays for checkpointing (restores bit-exactly)."""
        out = {"adam.t": np.array([self.t], dtype=np.int64)}
        for k in self.params:
            out[f"adam.m.{k}"] = self.m[k]
            out[f"adam.v.{k}"] = self.v[k]
        return out

    def load_state_arrays(self, state: dict) -> None:
        self.t = int(state["adam.t"][0])
        for k in self.params:
            self.m[k] = state[f"adam.m.{k}"].copy()
            self.v[k] = state[f"adam.v.{k}"].copy()
