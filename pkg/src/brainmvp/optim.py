"""AdamW (decoupled weight decay) and the cosine learning-rate schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    """lr0 * (1 + cos(pi * step / total_steps)) / 2, held at 0 past the end."""
    if total_steps <= 0:
        return lr0
    t = min(max(step, 0), total_steps) / total_steps
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * t))


@dataclass
class AdamW:
    """Per-array AdamW state.

    Update for each parameter array ``p`` with gradient ``g`` at step t::

        p <- p - lr * wd * p
        m <- b1 * m + (1 - b1) * g
        v <- b2 * v + (1 - b2) * g^2
        p <- p - lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)

    With ``mask`` the update (moments, step count, decay) touches only the
    selected entries; each entry keeps its own step count so bias correction
    stays exact under sparse updates.
    """

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-5
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float,
             masks: dict[str, np.ndarray] | None = None) -> None:
        for k in params:
            g = grads.get(k)
            if g is None:
                continue
            self._update(k, params[k], g, lr, None if masks is None else masks.get(k))

    def _update(self, k: str, p: np.ndarray, g: np.ndarray, lr: float, mask) -> None:
        if k not in self.m:
            self.m[k] = np.zeros_like(p)
            self.v[k] = np.zeros_like(p)
            self.t[k] = np.zeros(p.shape, dtype=np.int64)
        m, v, t = self.m[k], self.v[k], self.t[k]
        g = g.astype(p.dtype, copy=False)
        sel = Ellipsis if mask is None else np.asarray(mask, dtype=bool)
        t[sel] += 1
        tt = t[sel]
        pp = p[sel]
        pp = pp - lr * self.weight_decay * pp
        m[sel] = self.beta1 * m[sel] + (1.0 - self.beta1) * g[sel]
        v[sel] = self.beta2 * v[sel] + (1.0 - self.beta2) * g[sel] * g[sel]
        mhat = m[sel] / (1.0 - self.beta1 ** tt)
        vhat = v[sel] / (1.0 - self.beta2 ** tt)
        p[sel] = pp - lr * mhat / (np.sqrt(vhat) + self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for k in sorted(self.m):
            out[f"m/{k}"], out[f"v/{k}"], out[f"t/{k}"] = self.m[k], self.v[k], self.t[k]
        return out


def sgd_step(p: np.ndarray, g: np.ndarray, lr: float, mask=None) -> None:
    if mask is None:
        p -= lr * g
    else:
        mask = np.asarray(mask, dtype=bool)
        p[mask] -= lr * g[mask]
