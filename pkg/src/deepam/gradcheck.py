"""Central-difference verification of analytic gradients.

The checker perturbs every entry of every target array in place, re-runs a
caller-supplied scalar loss, and compares against the recorded analytic
gradient.  Per-entry relative error uses max(|analytic|, |numeric|) as the
denominator; entries where both magnitudes fall below `atol` count as
matching (their difference is finite-difference noise, not signal), and a
violation below the denominator floor is scored against `atol` itself.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class CheckEntry:
    name: str
    max_rel: float
    max_abs: float
    checked: int
    skipped: int  # entries below atol in both gradients


@dataclass
class GradCheckReport:
    entries: list[CheckEntry] = field(default_factory=list)
    step: float = 1e-5
    atol: float = 1e-7

    @property
    def max_rel_error(self) -> float:
        return max((e.max_rel for e in self.entries), default=0.0)

    def passed(self, tol: float) -> bool:
        return self.max_rel_error <= tol

    def summary(self) -> str:
        lines = [f"{'component':<28} {'max rel err':>12} {'max abs err':>12} checked/skipped"]
        for e in self.entries:
            lines.append(
                f"{e.name:<28} {e.max_rel:>12.3e} {e.max_abs:>12.3e} {e.checked}/{e.skipped}"
            )
        lines.append(f"overall max relative error: {self.max_rel_error:.3e}")
        return "\n".join(lines)


def finite_difference_check(loss_fn, targets, step: float = 1e-5, atol: float = 1e-7):
    """Check analytic gradients of `loss_fn` against central differences.

    `loss_fn()` must return the scalar loss recomputed from the current
    contents of the target arrays; `targets` is a list of (name, value,
    analytic_gradient) with arrays modified in place during the check.
    """
    report = GradCheckReport(step=step, atol=atol)
    for name, value, analytic in targets:
        value = np.asarray(value)
        analytic = np.asarray(analytic)
        if value.shape != analytic.shape:
            raise ValueError(f"{name}: value/gradient shape mismatch")
        flat = value.reshape(-1)
        aflat = analytic.reshape(-1)
        max_rel = 0.0
        max_abs = 0.0
        checked = 0
        skipped = 0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = loss_fn()
            flat[i] = orig - step
            fm = loss_fn()
            flat[i] = orig
            num = (fp - fm) / (2.0 * step)
            ana = aflat[i]
            denom = max(abs(num), abs(ana))
            diff = abs(num - ana)
            max_abs = max(max_abs, diff)
            if denom <= atol:
                if diff <= atol:
                    skipped += 1
                    continue
                rel = diff / atol
            else:
                rel = diff / denom
            checked += 1
            max_rel = max(max_rel, rel)
        report.entries.append(
            CheckEntry(name=name, max_rel=max_rel, max_abs=max_abs, checked=checked, skipped=skipped)
        )
    return report
