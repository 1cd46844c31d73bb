from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .params import ParamStore
from .tensor import Tensor


@dataclass
class GradReport:
    per_param: dict[str, float] = field(default_factory=dict)
    frozen_grad_max: dict[str, float] = field(default_factory=dict)
    coords_checked: int = 0

    @property
    def max_rel_err(self) -> float:
        return max(self.per_param.values(), default=0.0)


EPS = np.finfo(np.float64).eps


def rel_err(g_ad: float, g_fd: float, noise: float = 0.0) -> float:
    """Relative disagreement after forgiving ``noise``, the rounding error of the difference quotient."""
    return max(0.0, abs(g_ad - g_fd) - noise) / max(1e-8, abs(g_ad) + abs(g_fd))


def rounding_noise(fp: float, fm: float, h: float) -> float:
    # each evaluation is off by a few ulps of |f|; the quotient divides that by 2h
    return 4.0 * EPS * max(abs(fp), abs(fm)) / h


def finite_diff_report(
    f: Callable[[ParamStore], Tensor],
    store: ParamStore,
    h: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradReport:
    """Compare reverse-mode gradients of scalar ``f`` with central differences.

    ``max_coords`` caps the coordinates probed per parameter (sampled with
    ``rng``); ``None`` probes every coordinate.
    """
    store.zero_grad()
    out = f(store)
    if out.data.size != 1:
        raise ValueError("finite_diff_check needs a scalar-valued function")
    out.backward()
    report = GradReport()
    rng = rng or np.random.default_rng(0)
    for p in store:
        g_ad = p.grad.copy()
        if p.frozen:
            report.frozen_grad_max[p.name] = float(np.abs(g_ad).max(initial=0.0))
            continue
        flat = p.value.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = rng.choice(flat.size, size=max_coords, replace=False)
        worst = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(store).data)
            flat[i] = orig - h
            fm = float(f(store).data)
            flat[i] = orig
            g_fd = (fp - fm) / (2.0 * h)
            worst = max(worst, rel_err(float(g_ad.reshape(-1)[i]), g_fd, rounding_noise(fp, fm, h)))
        report.per_param[p.name] = worst
        report.coords_checked += len(idx)
    store.zero_grad()
    return report


def finite_diff_check(f, store: ParamStore, h: float = 1e-5, max_coords: int | None = None, rng=None) -> float:
    return finite_diff_report(f, store, h, max_coords, rng).max_rel_err
