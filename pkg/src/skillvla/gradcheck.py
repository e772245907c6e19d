"""Central-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .params import ParamStore
from .tensor import backward, no_grad, reset_tape

# Relative error denominator floor. Parameters whose true gradient is zero
# (e.g. weights feeding only a non-differentiable selection) would otherwise
# divide finite-difference roundoff noise by ~0.
DENOM_FLOOR = 1e-3


@dataclass
class GradCheckReport:
    per_param: dict[str, float] = field(default_factory=dict)
    tol: float = 1e-4
    failures: list[str] = field(default_factory=list)

    @property
    def max_rel_err(self) -> float:
        return max(self.per_param.values()) if self.per_param else 0.0

    @property
    def passed(self) -> bool:
        return not self.failures


def grad_check(f, store: ParamStore, h: float = 1e-5, tol: float = 1e-4,
               names: list[str] | None = None) -> GradCheckReport:
    """Compare analytic gradients of f() against central differences.

    f must be a zero-argument callable returning a scalar DenseArray and be
    deterministic given the store contents (fix seeds and any retrieval
    memory before calling). Every element of every trainable parameter is
    perturbed by +-h; the report carries the max relative error per
    parameter and the list of parameters exceeding tol.
    """
    if names is None:
        names = [n for n, _, trainable in store.items() if trainable]

    store.reset_grads()
    reset_tape()
    loss = f()
    backward(loss)
    analytic = {n: store[n].grad.copy() for n in names}

    report = GradCheckReport(tol=tol)
    with no_grad():
        for name in names:
            arr = store[name]
            flat = arr.data.reshape(-1)
            fd = np.zeros_like(flat)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                f_plus = f().item()
                flat[i] = orig - h
                f_minus = f().item()
                flat[i] = orig
                fd[i] = (f_plus - f_minus) / (2.0 * h)
            a = analytic[name].reshape(-1)
            denom = np.maximum(np.maximum(np.abs(a), np.abs(fd)), DENOM_FLOOR)
            rel = float(np.max(np.abs(a - fd) / denom))
            report.per_param[name] = rel
            if rel > tol:
                report.failures.append(name)
    return report
