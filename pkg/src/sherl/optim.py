"""AdamW with optional warmup schedules."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .autograph import Tensor
from .errors import ConfigError

WARMUPS = ("none", "linear", "cosine")
WARMUP_FRACTION = 0.1


def lr_at(step: int, total: int, base: float, warmup: str) -> float:
    """Learning rate for 0-based ``step`` out of ``total``.

    ``linear`` and ``cosine`` ramp up linearly over the first tenth of the
    steps, then decay to zero linearly or along a half cosine.
    """
    if warmup == "none" or total <= 1:
        return base
    if warmup not in WARMUPS:
        raise ConfigError(f"unknown warmup {warmup!r}")
    ramp = max(1, int(round(WARMUP_FRACTION * total)))
    if step < ramp:
        return base * (step + 1) / ramp
    frac = (step - ramp) / max(1, total - ramp)
    if warmup == "linear":
        return base * (1.0 - frac)
    return base * 0.5 * (1.0 + math.cos(math.pi * frac))


class AdamW:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        if lr <= 0:
            raise ConfigError("learning_rate must be positive")
        if not all(0.0 < b < 1.0 for b in betas):
            raise ConfigError("adam betas must lie in (0, 1)")
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    @property
    def update_bytes(self) -> int:
        return int(sum(p.data.nbytes for p in self.params))

    def step(self, grads: dict, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self._m, self._v):
            g = grads.get(p)
            if g is None:
                g = np.zeros_like(p.data)
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            if self.weight_decay:
                p.data *= 1.0 - lr * self.weight_decay
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
