"""Bundled gradient-verification suite: layer-level checks, the solver
backward formulas against dense finite differences, and the end-to-end
cascade, plus a measurement of how much the capped backward solves
truncate the gradients."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .gradcheck import finite_difference_check
from .images import gradient_adjoint
from .model import CascadeModel, ModelConfig
from .nn import BatchNorm, Conv3x3, l1_loss, relu_backward, relu_forward
from .solver import GAMMA_FLOOR, SolverConfig, factorize, reconstruct_backward

TIGHT = SolverConfig(tol=1e-12, max_iter=400, backward_tol=1e-12, backward_max_iter=400)


@dataclass
class SuiteEntry:
    name: str
    max_rel: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel <= self.tol


@dataclass
class SuiteReport:
    entries: list[SuiteEntry] = field(default_factory=list)
    truncation_error: float = 0.0  # informational, not gated

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    def lines(self):
        out = []
        for e in self.entries:
            out.append(
                f"{e.name:<24} max rel err {e.max_rel:.3e}  tol {e.tol:.0e}  "
                f"{'PASS' if e.passed else 'FAIL'}"
            )
        out.append(
            f"{'backward truncation':<24} max rel dev {self.truncation_error:.3e}  "
            f"(10-iteration backward solves vs tight solves; informational)"
        )
        return out


def _check_conv(rng):
    conv = Conv3x3(2, 3, rng)
    x = rng.normal(size=(1, 2, 5, 5))
    c = rng.normal(size=(1, 3, 5, 5))

    def loss_fn():
        return float(np.sum(c * conv.forward(x)[0]))

    _, cache = conv.forward(x)
    for p in conv.params():
        p.zero_grad()
    dx = conv.backward(c, cache)
    targets = [("x", x, dx)] + [(p.name, p.value, p.grad) for p in conv.params()]
    return finite_difference_check(loss_fn, targets).max_rel_error


def _check_norm(rng):
    bn = BatchNorm(2)
    bn.scale.value[:] = rng.uniform(0.5, 1.5, 2)
    bn.shift.value[:] = rng.normal(size=2)
    x = rng.normal(size=(2, 2, 4, 4))
    c = rng.normal(size=(2, 2, 4, 4))

    def loss_fn():
        return float(np.sum(c * bn.forward(x, train=True)[0]))

    _, cache = bn.forward(x, train=True)
    for p in bn.params():
        p.zero_grad()
    dx = bn.backward(c, cache)
    targets = [("x", x, dx)] + [(p.name, p.value, p.grad) for p in bn.params()]
    return finite_difference_check(loss_fn, targets).max_rel_error


def _check_relu(rng):
    x = rng.normal(size=(5, 5)) * 2
    x[np.abs(x) < 0.3] = 0.5
    c = rng.normal(size=(5, 5))

    def loss_fn():
        return float(np.sum(c * relu_forward(x)[0]))

    _, mask = relu_forward(x)
    return finite_difference_check(loss_fn, [("x", x, relu_backward(c, mask))]).max_rel_error


def _check_loss(rng):
    u = rng.normal(size=(4, 4)) * 3
    t = rng.normal(size=(4, 4)) * 3
    u[np.abs(u - t) < 0.2] += 0.5

    def loss_fn():
        return l1_loss(u, t)[0]

    return finite_difference_check(loss_fn, [("u", u, l1_loss(u, t)[1])]).max_rel_error


def _check_solver_backward(rng):
    h = w = 6
    gamma = rng.uniform(0.5, 2.0, size=(h, w))
    f = rng.uniform(0, 1, size=(h, w))
    v = rng.normal(size=(2, h, w))
    c = rng.normal(size=(h, w))
    dense = np.zeros((h * w, h * w))
    system = factorize(gamma)
    for i in range(h * w):
        e = np.zeros(h * w)
        e[i] = 1.0
        dense[:, i] = system.L.matvec(e)

    def loss_for(gm, vv):
        geff = np.maximum(gm, GAMMA_FLOOR)
        a = dense + np.diag((geff - system.L.gamma_eff).ravel())
        rhs = (geff * f + gradient_adjoint(vv)).ravel()
        return float(c.ravel() @ np.linalg.solve(a, rhs))

    rhs = system.L.gamma_eff * f + gradient_adjoint(v)
    u, _ = system.solve(rhs, tol=1e-13, max_iter=500)
    dv, dg, _ = reconstruct_backward(system, c, f, u, tol=1e-13, max_iter=500)
    step = 1e-6
    atol = 1e-7  # below this both sides are finite-difference noise
    worst = 0.0

    def rel(fd, ana):
        denom = max(abs(fd), abs(ana))
        diff = abs(fd - ana)
        if denom <= atol:
            return 0.0 if diff <= atol else diff / atol
        return diff / denom

    for idx in np.ndindex(v.shape):
        vp, vm = v.copy(), v.copy()
        vp[idx] += step
        vm[idx] -= step
        fd = (loss_for(gamma, vp) - loss_for(gamma, vm)) / (2 * step)
        worst = max(worst, rel(fd, dv[idx]))
    for idx in np.ndindex(gamma.shape):
        gp, gm_ = gamma.copy(), gamma.copy()
        gp[idx] += step
        gm_[idx] -= step
        fd = (loss_for(gp, v) - loss_for(gm_, v)) / (2 * step)
        worst = max(worst, rel(fd, dg[idx]))
    return worst


def _cascade_setup(scale, seed):
    rng = np.random.default_rng((seed, 17))
    if scale == "tiny":
        cfg = ModelConfig(task="denoise", k=2, depth=3, width=4)
        size = 8
    else:
        cfg = ModelConfig(task="denoise", k=2, depth=4, width=8)
        size = 12
    model = CascadeModel(cfg, seed=seed)
    f = rng.uniform(40, 215, size=(1, 1, size, size))
    u0, _ = model.forward(f, train=True, solver_cfg=TIGHT)
    t = u0 + rng.choice([-1.0, 1.0], size=u0.shape) * rng.uniform(60, 120, size=u0.shape)
    return model, f, t


def _check_cascade(scale, seed):
    model, f, t = _cascade_setup(scale, seed)

    def loss_fn():
        u, _ = model.forward(f, train=True, solver_cfg=TIGHT)
        return l1_loss(u, t)[0]

    u, caches = model.forward(f, train=True, solver_cfg=TIGHT)
    _, dl = l1_loss(u, t)
    model.zero_grads()
    model.backward(caches, dl, solver_cfg=TIGHT)
    targets = [(p.name, p.value, p.grad) for p in model.params()]
    return finite_difference_check(loss_fn, targets).max_rel_error


def _check_truncation(scale, seed):
    """Relative deviation of gradients computed with the capped backward
    solver (10 iterations) from tight-solve gradients."""
    model, f, t = _cascade_setup(scale, seed)
    u, caches = model.forward(f, train=True, solver_cfg=TIGHT)
    _, dl = l1_loss(u, t)
    model.zero_grads()
    model.backward(caches, dl, solver_cfg=TIGHT)
    reference = [p.grad.copy() for p in model.params()]
    capped = SolverConfig(
        tol=1e-12, max_iter=400, backward_tol=1e-6, backward_max_iter=10
    )
    model.zero_grads()
    model.backward(caches, dl, solver_cfg=capped)
    worst = 0.0
    for p, ref in zip(model.params(), reference):
        denom = max(float(np.max(np.abs(ref))), 1e-12)
        worst = max(worst, float(np.max(np.abs(p.grad - ref))) / denom)
    return worst


def run_suite(scale: str = "tiny", seed: int = 0) -> SuiteReport:
    if scale not in ("tiny", "small"):
        raise ValueError("scale must be 'tiny' or 'small'")
    rng = np.random.default_rng((seed, 3))
    report = SuiteReport()
    report.entries.append(SuiteEntry("conv layer", _check_conv(rng), 1e-6))
    report.entries.append(SuiteEntry("norm layer", _check_norm(rng), 1e-5))
    report.entries.append(SuiteEntry("relu", _check_relu(rng), 1e-8))
    report.entries.append(SuiteEntry("l1 loss", _check_loss(rng), 1e-8))
    report.entries.append(SuiteEntry("solver backward", _check_solver_backward(rng), 1e-6))
    report.entries.append(SuiteEntry("cascade end-to-end", _check_cascade(scale, seed), 1e-5))
    report.truncation_error = _check_truncation(scale, seed)
    return report
