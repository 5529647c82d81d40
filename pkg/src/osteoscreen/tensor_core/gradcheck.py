"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from ..errors import InputError
from .ops import kink_recorder
from .rng import make_rng
from .tensor import FLOAT64, Tape, Tensor


@dataclass
class ParamCheck:
    name: str
    max_rel_error: float
    max_abs_error: float
    checked: int
    refined: int = 0  # coordinates that needed a step smaller than eps
    skipped: int = 0  # coordinates sitting on a kink
    failures: list[tuple[int, float, float]] = field(default_factory=list)  # (flat index, analytic, numeric)


@dataclass
class GradCheckReport:
    tolerance: float
    params: list[ParamCheck]

    @property
    def passed(self) -> bool:
        return all(not p.failures for p in self.params)

    @property
    def max_rel_error(self) -> float:
        return max((p.max_rel_error for p in self.params), default=0.0)

    def summary(self) -> str:
        lines = [f"{'PASS' if self.passed else 'FAIL'} max_rel_error={self.max_rel_error:.3e} tol={self.tolerance:g}"]
        for p in self.params:
            flag = "FAIL" if p.failures else "ok"
            lines.append(
                f"  {p.name:<24} {flag:<4} rel={p.max_rel_error:.3e} abs={p.max_abs_error:.3e} "
                f"n={p.checked} refined={p.refined} skipped={p.skipped}"
            )
        return "\n".join(lines)


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    tolerance: float = 1e-4,
    eps: float = 1e-3,
    abs_tolerance: float = 1e-6,
    max_coords: int = 32,
    seed: int = 0,
    min_eps: float = 1e-7,
) -> GradCheckReport:
    """Compare tape gradients of ``loss_fn()`` with central differences.

    ``loss_fn`` must read the parameter tensors in ``params`` and return a
    scalar tensor. Up to ``max_coords`` coordinates per parameter are sampled
    deterministically from ``seed``. The error of a coordinate is
    ``|a - n| / max(|a|, |n|, abs_tolerance / tolerance)``; it fails when that
    exceeds ``tolerance``, i.e. when it is off by more than ``tolerance``
    relative and ``abs_tolerance`` absolute.

    Central differences are only meaningful on a smooth piece of the loss.
    When the step ``eps`` moves a ReLU or max-pool across its switching
    point, the step is divided by 10 (down to ``min_eps``) until both probes
    share the unperturbed switching pattern; coordinates still straddling a
    kink at ``min_eps`` are skipped and counted.
    """
    for name, p in params.items():
        if p.dtype != FLOAT64:
            raise InputError(f"grad_check needs float64 parameters; {name!r} is {p.dtype}")
        p.requires_grad = True
        p.grad = None

    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    analytic = {name: (p.grad if p.grad is not None else np.zeros_like(p.data)).copy() for name, p in params.items()}

    # magnitudes below this count as absolute error, so rel <= tol <=> abs <= abs_tolerance there
    floor = abs_tolerance / tolerance
    rng = make_rng(seed)
    report = []
    for name, p in params.items():
        flat = p.data.reshape(-1)
        n = flat.size
        idx = np.arange(n) if n <= max_coords else np.sort(rng.choice(n, size=max_coords, replace=False))
        ga = analytic[name].reshape(-1)
        check = ParamCheck(name, 0.0, 0.0, len(idx))
        for i in idx:
            num, step = _central_difference(loss_fn, flat, int(i), eps, min_eps)
            if num is None:
                check.skipped += 1
                continue
            if step != eps:
                check.refined += 1
            a = float(ga[i])
            abs_err = abs(a - num)
            rel_err = abs_err / max(abs(a), abs(num), floor)
            check.max_abs_error = max(check.max_abs_error, abs_err)
            check.max_rel_error = max(check.max_rel_error, rel_err)
            if rel_err > tolerance:
                check.failures.append((int(i), a, num))
        report.append(check)
        p.grad = None
    return GradCheckReport(tolerance, report)


def _same(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def _central_difference(loss_fn, flat: np.ndarray, i: int, eps: float, min_eps: float):
    orig = flat[i]
    with kink_recorder() as base:
        loss_fn()
    step = eps
    try:
        while step >= min_eps:
            flat[i] = orig + step
            with kink_recorder() as hi:
                up = loss_fn().item()
            flat[i] = orig - step
            with kink_recorder() as lo:
                down = loss_fn().item()
            if _same(base, hi) and _same(base, lo):
                return (up - down) / (2 * step), step
            step /= 10
    finally:
        flat[i] = orig
    return None, step
