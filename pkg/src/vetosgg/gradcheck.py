"""Central finite-difference verification of tape gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .nn import Parameter
from .tensor import Tape, Tensor


class GradientCheckError(AssertionError):
    def __init__(self, report: "GradientReport"):
        self.report = report
        w = report.worst
        super().__init__(
            f"gradient check failed: {len(report.failures)} entries above {report.tolerance:g}; "
            f"worst {w.name}[{w.index}] analytic={w.analytic!r} numeric={w.numeric!r} rel_err={w.rel_err:.3g}"
        )


@dataclass
class EntryCheck:
    name: str
    index: tuple[int, ...]
    analytic: float
    numeric: float
    rel_err: float


@dataclass
class GradientReport:
    tolerance: float
    checked: int = 0
    worst: EntryCheck | None = None
    failures: list[EntryCheck] = field(default_factory=list)
    parameters: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures

    def as_dict(self) -> dict:
        w = self.worst
        return {
            "passed": self.passed,
            "tolerance": self.tolerance,
            "checked": self.checked,
            "parameters": self.parameters,
            "worst": None if w is None else {
                "name": w.name, "index": list(w.index), "analytic": w.analytic,
                "numeric": w.numeric, "rel_err": w.rel_err,
            },
            "failures": len(self.failures),
        }


def relative_error(a: float, n: float, floor: float = 1e-8) -> float:
    return abs(a - n) / max(abs(a), abs(n), floor)


def check_gradients(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Parameter],
    tolerance: float = 1e-4,
    step: float = 1e-5,
    max_entries: int = 64,
    rng: np.random.Generator | None = None,
    floor: float = 1e-8,
    raise_on_failure: bool = True,
) -> GradientReport:
    """Compare analytic gradients of ``loss_fn()`` with central differences.

    Only trainable parameters are examined. Parameters with more than
    ``max_entries`` entries are checked on a random subsample drawn from
    ``rng``. The relative error of an entry is
    ``|a - n| / max(|a|, |n|, floor)``.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    params = [p for p in params if getattr(p, "trainable", True)]
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    analytic = {id(p): (np.zeros(p.shape) if p.grad is None else p.grad.copy()) for p in params}

    report = GradientReport(tolerance=tolerance)
    for p in params:
        report.parameters.append(p.name)
        flat = p.data.reshape(-1)
        if flat.size > max_entries:
            picks = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        else:
            picks = np.arange(flat.size)
        for i in picks:
            orig = flat[i]
            flat[i] = orig + step
            up = float(loss_fn().data)
            flat[i] = orig - step
            down = float(loss_fn().data)
            flat[i] = orig
            numeric = (up - down) / (2.0 * step)
            idx = tuple(int(v) for v in np.unravel_index(i, p.shape))
            a = float(analytic[id(p)].reshape(-1)[i])
            entry = EntryCheck(p.name, idx, a, numeric, relative_error(a, numeric, floor))
            report.checked += 1
            if report.worst is None or entry.rel_err > report.worst.rel_err:
                report.worst = entry
            if entry.rel_err > tolerance:
                report.failures.append(entry)
    for p in params:
        p.grad = None
    if raise_on_failure and report.failures:
        raise GradientCheckError(report)
    return report


def numeric_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of an array."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = f(x)
        flat[i] = orig - step
        down = f(x)
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * step)
    return g
