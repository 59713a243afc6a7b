"""Central finite-difference checking of analytic gradients.

The oracle perturbs each parameter coordinate by ±eps, re-evaluates the
scalar function, and compares (f(p+eps) - f(p-eps)) / 2eps against the
gradient the backward pass produced. Runs in float64; eps is restricted to
[1e-7, 1e-3] where central differences are trustworthy at that precision.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, no_grad
from .errors import TacticraftError


class EvaluationError(TacticraftError):
    """The checked function produced a non-finite value."""


@dataclass
class TensorReport:
    name: str
    max_rel_error: float
    worst_index: tuple
    checked: int


@dataclass
class GradCheckReport:
    eps: float
    tolerance: float
    entries: list = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        return max((e.max_rel_error for e in self.entries), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance

    def __str__(self):
        lines = [f"gradcheck eps={self.eps:g} tol={self.tolerance:g} "
                 f"{'PASS' if self.passed else 'FAIL'}"]
        for e in self.entries:
            lines.append(f"  {e.name}: max_rel_err={e.max_rel_error:.3e} "
                         f"at {e.worst_index} ({e.checked} coords)")
        return "\n".join(lines)


def _rel_error(analytic: float, numeric: float, floor: float) -> float:
    denom = max(abs(analytic), abs(numeric), floor)
    return abs(analytic - numeric) / denom


def finite_diff_check(f, params: dict, eps: float = 1e-5,
                      tolerance: float = 1e-4, max_coords_per_tensor=None,
                      rng=None, rel_floor: float = 1e-8) -> GradCheckReport:
    """Compare analytic gradients of ``f()`` against central differences.

    ``f`` must rebuild its graph on every call and return a scalar Tensor;
    ``params`` maps names to leaf tensors. Frozen tensors (requires_grad
    False) are skipped. ``max_coords_per_tensor`` subsamples coordinates of
    large tensors (seeded via ``rng``); by default every coordinate is
    checked.
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ValueError(f"eps {eps} outside [1e-7, 1e-3]")

    checked = {name: t for name, t in params.items() if t.requires_grad}
    for t in checked.values():
        t.zero_grad()
    out = f()
    if not isinstance(out, Tensor) or out.size != 1:
        raise EvaluationError("checked function must return a scalar Tensor")
    if not np.isfinite(out.data).all():
        raise EvaluationError("checked function returned a non-finite value")
    out.backward()
    analytic = {name: t.grad.copy() for name, t in checked.items()}

    report = GradCheckReport(eps=eps, tolerance=tolerance)
    for name, t in checked.items():
        flat = t.data.reshape(-1)
        n = flat.size
        if max_coords_per_tensor is not None and n > max_coords_per_tensor:
            r = rng if rng is not None else np.random.default_rng(0)
            coords = r.choice(n, size=max_coords_per_tensor, replace=False)
        else:
            coords = range(n)
        an_flat = analytic[name].reshape(-1)
        worst, worst_idx, count = 0.0, 0, 0
        with no_grad():
            for i in coords:
                orig = flat[i]
                flat[i] = orig + eps
                f_plus = float(f().data)
                flat[i] = orig - eps
                f_minus = float(f().data)
                flat[i] = orig
                if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                    raise EvaluationError(
                        f"non-finite value while perturbing {name}[{i}]")
                numeric = (f_plus - f_minus) / (2.0 * eps)
                err = _rel_error(an_flat[i], numeric, rel_floor)
                count += 1
                if err > worst:
                    worst, worst_idx = err, i
        report.entries.append(TensorReport(
            name=name, max_rel_error=worst,
            worst_index=np.unravel_index(worst_idx, t.data.shape),
            checked=count))
    return report
