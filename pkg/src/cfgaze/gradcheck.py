"""Central finite-difference gradient checking.

The oracle is independent of the tape: it re-evaluates the target function
with perturbed parameter entries and compares (f(x+h) - f(x-h)) / 2h
against the tape-computed gradient, entry by entry.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tape, Tensor


class GradCheckError(RuntimeError):
    """Non-finite value encountered while evaluating the checked function."""


@dataclass
class ParamReport:
    name: str
    max_rel_err: float
    checked_entries: int
    worst_index: tuple = ()


@dataclass
class GradCheckReport:
    tol: float
    h: float
    params: list = field(default_factory=list)  # ParamReport, input order

    @property
    def passed(self) -> bool:
        return all(p.max_rel_err <= self.tol for p in self.params)

    @property
    def worst(self) -> ParamReport:
        return max(self.params, key=lambda p: p.max_rel_err)

    def summary(self) -> str:
        lines = []
        for p in self.params:
            status = "ok" if p.max_rel_err <= self.tol else "FAIL"
            lines.append(f"{status:4s} {p.name}: max rel err {p.max_rel_err:.3e} "
                         f"({p.checked_entries} entries)")
        return "\n".join(lines)


def _eval_scalar(f, context: str) -> float:
    y = f()
    if isinstance(y, Tensor):
        y = y.item()
    y = float(y)
    if not np.isfinite(y):
        raise GradCheckError(f"non-finite value while evaluating {context}")
    return y


def finite_difference_check(f, params, h: float = 1e-5, tol: float = 1e-6,
                            max_entries_per_param=None, rng=None) -> GradCheckReport:
    """Compare tape gradients of scalar-valued ``f`` against central differences.

    params: iterable of (name, Tensor); every tensor must be float64 so the
    oracle is trustworthy. With ``max_entries_per_param`` set, a deterministic
    random subset of entries is checked per parameter (for large models).

    Relative error per entry is |g_ad - g_fd| / max(|g_ad|, |g_fd|, 1e-8).
    """
    params = list(params)
    for name, p in params:
        if p.dtype != np.float64:
            raise ValueError(f"gradient check requires float64 parameters; {name} is {p.dtype}")
        if not p.requires_grad:
            raise ValueError(f"parameter {name} does not require grad")

    for _, p in params:
        p.zero_grad()
    with Tape():
        y = f()
        if not isinstance(y, Tensor):
            raise TypeError("checked function must return a Tensor scalar")
        if not np.isfinite(y.data).all():
            raise GradCheckError("non-finite value while evaluating baseline")
        y.backward()
    grads = {}
    for name, p in params:
        grads[name] = np.zeros_like(p.data) if p.grad is None else p.grad.copy()

    if rng is None:
        rng = np.random.default_rng(0)

    report = GradCheckReport(tol=tol, h=h)
    for name, p in params:
        flat = p.data.reshape(-1)
        n = flat.size
        if max_entries_per_param is not None and n > max_entries_per_param:
            idxs = rng.choice(n, size=max_entries_per_param, replace=False)
        else:
            idxs = np.arange(n)
        g_flat = grads[name].reshape(-1)
        worst = 0.0
        worst_idx = ()
        for i in idxs:
            x0 = flat[i]
            flat[i] = x0 + h
            y_plus = _eval_scalar(f, f"parameter {name}[{i}] (+h)")
            flat[i] = x0 - h
            y_minus = _eval_scalar(f, f"parameter {name}[{i}] (-h)")
            flat[i] = x0
            g_fd = (y_plus - y_minus) / (2 * h)
            g_ad = g_flat[i]
            rel = abs(g_ad - g_fd) / max(abs(g_ad), abs(g_fd), 1e-8)
            if not np.isfinite(rel):
                rel = np.inf
            if rel > worst:
                worst = rel
                worst_idx = np.unravel_index(int(i), p.shape)
        report.params.append(ParamReport(name, worst, len(idxs), worst_idx))
    return report
