"""AdamW over named numpy parameter arrays."""

from __future__ import annotations

import numpy as np


class AdamW:
    """Decoupled weight decay Adam.

    ``params`` maps names to :class:`~rlkv.autodiff.Tensor`; the update is
    written in place into ``tensor.data``.  ``decay_filter(name, tensor)``
    selects which parameters get weight decay (default: all).
    """

    def __init__(self, params: dict, lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0, decay_filter=None):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        if not all(0.0 < b < 1.0 for b in betas):
            raise ValueError("moment decays must lie in (0, 1)")
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        decay_filter = decay_filter or (lambda name, t: True)
        self.decay = {n: bool(decay_filter(n, t)) for n, t in params.items()}
        self.m = {n: np.zeros_like(t.data) for n, t in params.items()}
        self.v = {n: np.zeros_like(t.data) for n, t in params.items()}
        self.t = 0

    def step(self, grads: dict) -> None:
        self.t += 1
        b1, b2 = self.b1, self.b2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(p.data)
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            if self.weight_decay and self.decay[name]:
                p.data *= p.data.dtype.type(1.0 - self.lr * self.weight_decay)
            upd = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= upd.astype(p.data.dtype)

    def state_dict(self) -> dict:
        return {"t": self.t, "m": {k: v.copy() for k, v in self.m.items()},
                "v": {k: v.copy() for k, v in self.v.items()}}
