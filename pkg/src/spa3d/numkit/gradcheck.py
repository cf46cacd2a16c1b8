"""Analytic-vs-central-difference gradient comparison."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .tensor import Tensor, is_verification_mode


@dataclass
class ParamCheck:
    name: str
    max_rel_error: float
    checked: int
    max_abs_analytic: float
    max_abs_numeric: float


@dataclass
class GradCheckReport:
    tolerance: float
    params: list[ParamCheck] = field(default_factory=list)

    @property
    def worst(self) -> ParamCheck | None:
        return max(self.params, key=lambda p: p.max_rel_error, default=None)

    @property
    def passed(self) -> bool:
        return all(p.max_rel_error < self.tolerance for p in self.params)

    def lines(self) -> list[str]:
        out = [f"{p.name}\trel={p.max_rel_error:.3e}\tn={p.checked}" for p in self.params]
        w = self.worst
        if w is not None:
            status = "PASS" if self.passed else "FAIL"
            out.append(f"{status} worst={w.name} rel={w.max_rel_error:.3e} tol={self.tolerance:g}")
        return out


def gradient_check(params: dict[str, Tensor], loss_fn: Callable[[], Tensor],
                   tolerance: float = 1e-4, h: float = 1e-5,
                   max_entries: int | None = 24, seed: int = 0,
                   floor: float = 1e-7) -> GradCheckReport:
    """Compare backprop gradients with central differences.

    ``loss_fn`` rebuilds the graph from the current parameter values and
    returns a scalar. At most ``max_entries`` coordinates per parameter are
    probed: the largest-magnitude analytic entries plus a seeded random draw.
    Relative error per coordinate is max(|a - n| - r, 0) / max(|a|, |n|, floor),
    where r = 8 eps |f| / h bounds the rounding error of the difference quotient;
    without it a structurally zero gradient (e.g. a key bias under softmax)
    would be judged on float noise alone.
    """
    if not is_verification_mode():
        raise RuntimeError("gradient_check requires verification mode (float64)")
    for p in params.values():
        p.grad = None
    f0 = loss_fn()
    roundoff = 8.0 * np.finfo(np.float64).eps * max(abs(float(f0.data)), 1.0) / h
    f0.backward()
    analytic = {name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
                for name, p in params.items()}
    rng = np.random.default_rng(seed)
    report = GradCheckReport(tolerance=tolerance)
    for name, p in params.items():
        a_full = analytic[name].ravel()
        n = a_full.size
        if max_entries is None or n <= max_entries:
            idx = np.arange(n)
        else:
            top = np.argsort(-np.abs(a_full), kind="stable")[: max_entries // 2]
            rest = np.setdiff1d(np.arange(n), top)
            extra = rng.choice(rest, size=max_entries - top.size, replace=False)
            idx = np.sort(np.concatenate([top, extra]))
        flat = p.data.reshape(-1)
        numeric = np.empty(idx.size)
        for i, j in enumerate(idx):
            orig = flat[j]
            flat[j] = orig + h
            f_plus = float(loss_fn().data)
            flat[j] = orig - h
            f_minus = float(loss_fn().data)
            flat[j] = orig
            numeric[i] = (f_plus - f_minus) / (2 * h)
        a = a_full[idx]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), floor)
        rel = np.maximum(np.abs(a - numeric) - roundoff, 0.0) / denom
        report.params.append(ParamCheck(
            name=name,
            max_rel_error=float(rel.max()) if rel.size else 0.0,
            checked=int(idx.size),
            max_abs_analytic=float(np.abs(a).max()) if a.size else 0.0,
            max_abs_numeric=float(np.abs(numeric).max()) if numeric.size else 0.0,
        ))
    for p in params.values():
        p.grad = None
    return report
