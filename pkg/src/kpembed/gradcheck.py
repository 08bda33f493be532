"""Finite-difference gradient checking.

Central differences (f(x+he) - f(x-he)) / (2h) are compared against the
gradients produced by ``backward()``. Relative error per element is
|a - n| / max(|a|, |n|, 1e-8). Large parameters can be spot-checked on a
seeded random subset of elements; that keeps a full-model check affordable
while still touching every parameter.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .tensor import Tensor, no_grad

__all__ = ["GradCheckReport", "ParamCheck", "grad_check"]


@dataclass
class ParamCheck:
    """Per-parameter outcome of a gradient check."""

    name: str
    max_rel_error: float
    worst_index: tuple
    checked: int
    nonfinite: int


@dataclass
class GradCheckReport:
    params: list[ParamCheck] = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        return max((p.max_rel_error for p in self.params), default=0.0)

    @property
    def nonfinite(self) -> int:
        return sum(p.nonfinite for p in self.params)

    def passed(self, tolerance: float) -> bool:
        return self.nonfinite == 0 and self.max_rel_error < tolerance

    def summary(self) -> str:
        lines = [
            f"{p.name}: max_rel_error={p.max_rel_error:.3e} "
            f"(checked {p.checked} elements, worst at {p.worst_index}, "
            f"nonfinite {p.nonfinite})"
            for p in self.params
        ]
        lines.append(f"overall max_rel_error={self.max_rel_error:.3e}")
        return "\n".join(lines)


def _rel_error(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), 1e-8)


def grad_check(
    f,
    inputs: list[Tensor] | dict[str, Tensor],
    step: float = 1e-5,
    max_elements_per_input: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare analytic gradients of scalar-valued ``f`` against central differences.

    ``f`` is called with no arguments and must read the given input tensors;
    it returns a scalar Tensor. Non-finite finite-difference evaluations are
    counted per element rather than raised.
    """
    if step <= 0:
        raise ContractError(f"grad_check step must be positive, got {step}")
    if isinstance(inputs, dict):
        named = list(inputs.items())
    else:
        named = [(f"input{i}", t) for i, t in enumerate(inputs)]
    for _, t in named:
        if not t.requires_grad:
            raise ContractError("grad_check inputs must have requires_grad=True")
        t.zero_grad()

    loss = f()
    if loss.size != 1:
        raise ContractError(f"grad_check target must be scalar, got shape {loss.shape}")
    loss.backward()
    analytic = {
        name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
        for name, t in named
    }

    if rng is None:
        rng = np.random.default_rng(0)

    report = GradCheckReport()
    for name, t in named:
        n_elems = t.data.size
        if max_elements_per_input is not None and n_elems > max_elements_per_input:
            idxs = rng.choice(n_elems, size=max_elements_per_input, replace=False)
        else:
            idxs = np.arange(n_elems)
        worst = 0.0
        worst_idx: tuple = ()
        nonfinite = 0
        a_flat = analytic[name].reshape(-1)
        for i in idxs:
            pos = np.unravel_index(int(i), t.shape) if t.shape else ()
            orig = t.data[pos]
            with no_grad():
                t.data[pos] = orig + step
                f_plus = f().item()
                t.data[pos] = orig - step
                f_minus = f().item()
            t.data[pos] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                nonfinite += 1
                continue
            numeric = (f_plus - f_minus) / (2.0 * step)
            err = _rel_error(float(a_flat[i]), numeric)
            if err > worst:
                worst = err
                worst_idx = pos
        report.params.append(
            ParamCheck(
                name=name,
                max_rel_error=worst,
                worst_index=worst_idx,
                checked=len(idxs),
                nonfinite=nonfinite,
            )
        )
    return report
