from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .params import ParamStore


class NumericalError(RuntimeError):
    """Raised when training produces non-finite values."""


@dataclass
class OptimizerState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    weight_decay: float = 0.01
    clip_norm: float | None = 1.0
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    last_grad_norm: float = 0.0
    last_clipped_norm: float = 0.0


def global_grad_norm(store: ParamStore) -> float:
    sq = 0.0
    for p in store.trainable():
        if p.value.grad is not None:
            sq += float(np.sum(p.value.grad * p.value.grad))
    return math.sqrt(sq)


def clip_grad_norm(store: ParamStore, max_norm: float) -> tuple[float, float]:
    """Scale trainable gradients in place so the global L2 norm is at most ``max_norm``."""
    norm = global_grad_norm(store)
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in store.trainable():
            if p.value.grad is not None:
                p.value.grad *= scale
        return norm, norm * scale
    return norm, norm


def adamw_step(store: ParamStore, opt: OptimizerState) -> None:
    bad = [p.name for p in store.trainable() if p.value.grad is not None and not np.all(np.isfinite(p.value.grad))]
    if bad:
        raise NumericalError(f"non-finite gradient in {len(bad)} parameter(s): {', '.join(bad[:8])}")
    if opt.clip_norm is not None:
        opt.last_grad_norm, opt.last_clipped_norm = clip_grad_norm(store, opt.clip_norm)
    opt.step += 1
    bc1 = 1.0 - opt.beta1**opt.step
    bc2 = 1.0 - opt.beta2**opt.step
    for p in store.trainable():
        g = p.grad
        m = opt.m.get(p.name)
        if m is None:
            m = opt.m[p.name] = np.zeros_like(g)
            opt.v[p.name] = np.zeros_like(g)
        v = opt.v[p.name]
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * g * g
        w = p.value.data
        if opt.weight_decay and not p.decay_exempt:
            w *= 1.0 - opt.lr * opt.weight_decay
        w -= opt.lr * (m / bc1) / (np.sqrt(v / bc2) + opt.eps)


def lr_schedule(step: int, total_steps: int, warmup: int = 1000, lr_max: float = 1e-4, lr_min: float = 1e-6) -> float:
    """Linear warmup from 0 to ``lr_max`` then cosine decay to ``lr_min``."""
    if total_steps <= warmup:
        raise ValueError(f"total_steps ({total_steps}) must exceed warmup ({warmup})")
    if step < 0:
        raise ValueError("step must be non-negative")
    if step < warmup:
        return lr_max * step / warmup
    if step >= total_steps:
        return lr_min
    progress = (step - warmup) / (total_steps - warmup)
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * progress))
