"""AdamW with decoupled weight decay."""

from __future__ import annotations

import numpy as np


class AdamW:
    def __init__(self, names, shapes, beta1=0.9, beta2=0.999, eps=1e-8, exempt=lambda name: False):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.exempt = exempt
        self.m = {n: np.zeros(s) for n, s in zip(names, shapes)}
        self.v = {n: np.zeros(s) for n, s in zip(names, shapes)}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float, weight_decay: float) -> bool:
        """Update ``params`` in place. Returns False (and changes nothing) on a non-finite gradient."""
        if not all(np.isfinite(g).all() for g in grads.values()):
            return False
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, p in params.items():
            g = grads[name]
            m = self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            v = self.v[name] = b2 * self.v[name] + (1.0 - b2) * g * g
            if weight_decay and not self.exempt(name):
                p *= 1.0 - lr * weight_decay
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return True

    def state(self) -> dict[str, np.ndarray]:
        out = {f"opt/m/{n}": a for n, a in self.m.items()}
        out.update({f"opt/v/{n}": a for n, a in self.v.items()})
        return out

    def load_state(self, tensors: dict[str, np.ndarray], t: int) -> None:
        for n in self.m:
            self.m[n] = tensors[f"opt/m/{n}"].copy()
            self.v[n] = tensors[f"opt/v/{n}"].copy()
        self.t = t

