"""AdamW with decoupled weight decay and a linear-warmup cosine schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


def cosine_warmup_lr(step: int, config) -> float:
    """Linear ramp 0 -> lr_peak over ``warmup_steps``, then half-cosine to 0.

    ``config`` needs ``lr_peak``, ``warmup_steps`` and ``total_steps``.
    """
    peak, warm, total = config.lr_peak, config.warmup_steps, config.total_steps
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    if step < warm:
        return peak * step / warm
    if total == warm:
        return peak
    progress = (step - warm) / (total - warm)
    return peak * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class AdamWState:
    """First/second moments per parameter and a step count per group."""

    m: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)
    v: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)
    t: dict[str, int] = field(default_factory=dict)

    def copy(self) -> "AdamWState":
        return AdamWState(
            {g: {n: a.copy() for n, a in d.items()} for g, d in self.m.items()},
            {g: {n: a.copy() for n, a in d.items()} for g, d in self.v.items()},
            dict(self.t),
        )


def adamw_step(
    params: dict[str, dict[str, np.ndarray]],
    grads: dict[str, dict[str, np.ndarray | None]],
    state: AdamWState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    weight_decay: float = 0.0,
    eps: float = 1e-8,
    frozen: dict[str, bool] | None = None,
) -> None:
    """One in-place AdamW update.

    Frozen groups are skipped entirely: parameters, moments and step count
    stay untouched.  A missing gradient counts as zero.
    """
    b1, b2 = betas
    for g, arrs in params.items():
        if frozen is not None and frozen.get(g, False):
            continue
        m = state.m.setdefault(g, {})
        v = state.v.setdefault(g, {})
        t = state.t.get(g, 0) + 1
        state.t[g] = t
        c1 = 1.0 - b1**t
        c2 = 1.0 - b2**t
        for name, p in arrs.items():
            grad = grads.get(g, {}).get(name)
            if grad is None:
                grad = np.zeros_like(p)
            mg = m.setdefault(name, np.zeros_like(p))
            vg = v.setdefault(name, np.zeros_like(p))
            mg *= b1
            mg += (1.0 - b1) * grad
            vg *= b2
            vg += (1.0 - b2) * grad * grad
            if weight_decay:
                p *= 1.0 - lr * weight_decay
            p -= lr * (mg / c1) / (np.sqrt(vg / c2) + eps)
