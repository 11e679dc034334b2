"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .layers import Module
from .tensor import Tensor, backward, no_grad


class NonDeterministicLoss(RuntimeError):
    pass


@dataclass
class ParamCheck:
    name: str
    n_checked: int
    max_rel_error: float
    max_abs_error: float
    grad_norm: float


@dataclass
class GradCheckReport:
    h: float
    tol: float
    params: list[ParamCheck] = field(default_factory=list)

    @property
    def worst(self) -> float:
        return max((p.max_rel_error for p in self.params), default=0.0)

    @property
    def failures(self) -> list[str]:
        return [p.name for p in self.params if not p.max_rel_error <= self.tol]

    @property
    def passed(self) -> bool:
        return not self.failures

    def format(self) -> str:
        lines = [f"{'parameter':<44} {'n':>4} {'max rel err':>12} {'|grad|':>10}"]
        for p in self.params:
            flag = "" if p.max_rel_error <= self.tol else "  FAIL"
            lines.append(f"{p.name:<44} {p.n_checked:>4} {p.max_rel_error:>12.3e} {p.grad_norm:>10.3e}{flag}")
        lines.append(f"worst {self.worst:.3e} (tol {self.tol:.1e}) -> {'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    # floor keeps near-zero gradients from turning roundoff into huge ratios
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def finite_diff_check(
    model: Module,
    inputs,
    loss_fn: Callable[[Module, object], Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    samples: int = 64,
    seed: int = 0,
    grad_hook: Optional[Callable[[str, np.ndarray], np.ndarray]] = None,
) -> GradCheckReport:
    """Compare backprop gradients with (L(θ+h) − L(θ−h)) / 2h.

    Up to ``samples`` scalars per parameter tensor are perturbed (all of
    them when the tensor is smaller).  ``grad_hook`` may rewrite the
    analytic gradient before comparison; it exists for fault injection.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    named = list(model.named_parameters())
    model.zero_grad()
    loss = loss_fn(model, inputs)
    backward(loss, [p for _, p in named])
    base = loss.item()
    if loss_fn(model, inputs).item() != base:
        raise NonDeterministicLoss("two forward passes at identical parameters gave different losses")

    rng = np.random.default_rng(seed)
    report = GradCheckReport(h=h, tol=tol)
    for name, p in named:
        analytic_full = p.grad.copy()
        if grad_hook is not None:
            analytic_full = grad_hook(name, analytic_full)
        flat = p.data.flat
        n = p.size
        idx = np.arange(n) if n <= samples else rng.choice(n, size=samples, replace=False)
        numeric = np.empty(len(idx))
        for j, i in enumerate(idx):
            orig = flat[i]
            with no_grad():
                flat[i] = orig + h
                lp = loss_fn(model, inputs).item()
                flat[i] = orig - h
                lm = loss_fn(model, inputs).item()
            flat[i] = orig
            numeric[j] = (lp - lm) / (2 * h)
        analytic = analytic_full.reshape(-1)[idx]
        err = relative_error(analytic, numeric)
        report.params.append(ParamCheck(
            name=name,
            n_checked=len(idx),
            max_rel_error=float(err.max()),
            max_abs_error=float(np.abs(analytic - numeric).max()),
            grad_norm=float(np.linalg.norm(analytic_full)),
        ))
    return report
