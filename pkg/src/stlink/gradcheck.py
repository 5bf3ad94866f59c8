"""Finite-difference verification of tape gradients."""

from __future__ import annotations

import math

import numpy as np

from .tensor import GradTape, Tensor


class GradCheckReport:
    """Per-parameter worst relative errors plus the overall verdict."""

    def __init__(self, tol: float):
        self.tol = tol
        self.per_param: dict[str, float] = {}

    @property
    def max_rel_err(self) -> float:
        return max(self.per_param.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol

    def __repr__(self):
        verdict = "pass" if self.passed else "FAIL"
        return f"GradCheckReport(max_rel_err={self.max_rel_err:.3e}, tol={self.tol:g}, {verdict})"


def _rel_err(analytic: float, numeric: float) -> float:
    scale = max(abs(analytic), abs(numeric))
    if scale < 1e-6:
        # both effectively zero; compare absolutely to avoid 0/0 blowups
        return abs(analytic - numeric)
    return abs(analytic - numeric) / scale


def grad_check(f, params: dict[str, Tensor], h: float = 1e-5, tol: float = 1e-4,
               max_entries_per_param: int | None = None,
               rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare tape gradients of the scalar ``f()`` against central differences.

    ``f`` must read the current ``.data`` of every tensor in ``params`` and be
    deterministic across calls. One taped evaluation collects the analytic
    gradients; each checked scalar entry is then perturbed by ±h and ``f``
    re-evaluated without a tape. ``max_entries_per_param`` subsamples large
    parameters (uniformly, via ``rng``) to bound the number of evaluations.
    """
    for t in params.values():
        t.zero_grad()
    with GradTape() as tape:
        loss = f()
        if not np.isfinite(loss.data).all():
            raise ValueError("grad_check: loss is non-finite at the base point")
        tape.backward(loss)

    report = GradCheckReport(tol)
    for name, t in params.items():
        if not t.requires_grad:
            continue
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        n = flat.size
        if max_entries_per_param is not None and n > max_entries_per_param:
            if rng is None:
                rng = np.random.default_rng(0)
            idx = rng.choice(n, size=max_entries_per_param, replace=False)
        else:
            idx = range(n)
        worst = 0.0
        aflat = analytic.reshape(-1)
        for i in idx:
            keep = flat[i]
            flat[i] = keep + h
            up = float(f().data)
            flat[i] = keep - h
            down = float(f().data)
            flat[i] = keep
            if not (math.isfinite(up) and math.isfinite(down)):
                raise ValueError(f"grad_check: non-finite loss while perturbing {name}[{i}]")
            numeric = (up - down) / (2.0 * h)
            worst = max(worst, _rel_err(float(aflat[i]), numeric))
        report.per_param[name] = worst
    return report
