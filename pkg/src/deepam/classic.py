"""Handcrafted alternating minimization with penalty continuation.

The energy is (lam/2)||u - f||^2 + Phi(Du) with Phi one of L1 (total
variation, anisotropic), L0, or an Lp hyper-Laplacian with p in (0, 1).
Splitting Du = v decouples the problem into a pointwise proximal step on v
and a quadratic solve for u, while the coupling weight beta is multiplied
by alpha each round until it exceeds beta_max.

Intensities are normalized to [0, 1] internally (divide by `scale`,
default 255) so that the data weight lam is dimensionless with respect to
the intensity range; the trace reports objectives on that normalized
scale.  The FFT backend assumes periodic boundaries (circulant D), the
PCG backend the replicate-boundary operators of :mod:`deepam.images`; the
two agree on interior pixels when the data term is strong enough for
boundary effects to decay.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import solver as _solver
from .images import check_image, gradient, gradient_adjoint

REG_KINDS = ("l1", "l0", "lp")


class ProxError(RuntimeError):
    """Newton iteration for the Lp prox failed to converge."""


@dataclass(frozen=True)
class Regularizer:
    kind: str
    p: float = 1.0

    def __post_init__(self):
        if self.kind not in REG_KINDS:
            raise ValueError(f"kind must be one of {REG_KINDS}, got {self.kind!r}")
        if self.kind == "lp" and not 0.0 < self.p < 1.0:
            raise ValueError(f"lp regularizer needs p in (0, 1), got {self.p}")

    def penalty(self, v: np.ndarray) -> float:
        if self.kind == "l1":
            return float(np.sum(np.abs(v)))
        if self.kind == "l0":
            return float(np.count_nonzero(v))
        return float(np.sum(np.abs(v) ** self.p))

    def prox(self, z: np.ndarray, beta: float) -> np.ndarray:
        if self.kind == "l1":
            return prox_l1(z, 1.0 / beta)
        if self.kind == "l0":
            return prox_l0(z, 2.0 / beta)
        return prox_lp(z, beta, self.p)


@dataclass(frozen=True)
class ContinuationSchedule:
    beta0: float
    alpha: float
    beta_max: float
    lam: float

    def __post_init__(self):
        if self.beta0 <= 0:
            raise ValueError("beta0 must be positive")
        if self.alpha <= 1:
            raise ValueError("alpha must exceed 1")
        if self.beta_max < self.beta0:
            raise ValueError("beta_max must be >= beta0")
        if self.lam <= 0:
            raise ValueError("lambda must be positive")

    @classmethod
    def default(cls, lam: float) -> "ContinuationSchedule":
        # geometric continuation over ~8 rounds
        return cls(beta0=2.0 * lam, alpha=2.0, beta_max=(2.0**8) * lam, lam=lam)


@dataclass
class AMRecord:
    iteration: int
    beta: float
    objective: float  # penalized energy after the u-step
    gap: float  # ||Du - v|| after the u-step
    objective_before_v: float
    objective_after_v: float


@dataclass
class AMTrace:
    records: list[AMRecord] = field(default_factory=list)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["iteration", "beta", "objective", "gap"])
            for r in self.records:
                w.writerow([r.iteration, repr(r.beta), repr(r.objective), repr(r.gap)])


# ---------------------------------------------------------------------------
# Proximal mappings (pointwise, anisotropic: applied to every sample)
# ---------------------------------------------------------------------------


def prox_l1(z: np.ndarray, threshold: float) -> np.ndarray:
    """Soft threshold: max(|z| - threshold, 0) * sign(z)."""
    if threshold < 0:
        raise ValueError("threshold must be >= 0")
    z = np.asarray(z, dtype=np.float64)
    return np.maximum(np.abs(z) - threshold, 0.0) * np.sign(z)


def prox_l0(z: np.ndarray, threshold_sq: float) -> np.ndarray:
    """Hard threshold: keep z where z^2 > threshold_sq (= 2/beta), else 0."""
    if threshold_sq < 0:
        raise ValueError("threshold_sq must be >= 0")
    z = np.asarray(z, dtype=np.float64)
    return np.where(z * z > threshold_sq, z, 0.0)


def prox_lp(
    z: np.ndarray,
    beta: float,
    p: float,
    max_iter: int = 30,
    tol: float = 1e-10,
) -> np.ndarray:
    """Pointwise argmin_v |v|^p + (beta/2)(v - z)^2 for p in (0, 1].

    The scalar objective has at most two candidate minimizers: v = 0 and an
    interior stationary point on (0, |z|), located by a bisection-guarded
    Newton iteration started at |z|; the lower objective wins.  p = 1
    reduces to the soft threshold.
    """
    if beta <= 0:
        raise ValueError("beta must be positive")
    if not 0.0 < p <= 1.0:
        raise ValueError(f"p must be in (0, 1], got {p}")
    if p == 1.0:
        return prox_l1(z, 1.0 / beta)
    z = np.asarray(z, dtype=np.float64)
    a = np.abs(z)
    out = np.zeros_like(z)

    # g(v) = p v^{p-1} + beta (v - a) is minimized at v_g; an interior root
    # (the candidate minimizer) exists only when g(v_g) <= 0.
    v_g = (p * (1.0 - p) / beta) ** (1.0 / (2.0 - p))
    active = (a > 0) & (p * v_g ** (p - 1.0) + beta * (v_g - a) <= 0)
    if np.any(active):
        am = a[active]
        v = am.copy()
        lo = np.full_like(am, v_g)
        hi = am.copy()
        done = np.zeros(am.shape, dtype=bool)
        for _ in range(max_iter):
            g = p * v ** (p - 1.0) + beta * (v - am)
            hi = np.where(g > 0, v, hi)
            lo = np.where(g < 0, v, lo)
            dg = p * (p - 1.0) * v ** (p - 2.0) + beta
            with np.errstate(divide="ignore", invalid="ignore"):
                vn = v - g / dg
            # converged entries are frozen before the bracket safeguard can
            # bounce an exact root (which sits on the bracket edge)
            done |= np.isfinite(vn) & (np.abs(vn - v) <= tol)
            bad = ~np.isfinite(vn) | (vn <= lo) | (vn >= hi)
            vn = np.where(bad, 0.5 * (lo + hi), vn)
            v = np.where(done, v, vn)
            if bool(done.all()):
                break
        if not bool(done.all()):
            where = np.flatnonzero(active)[int(np.argmax(~done))]
            raise ProxError(
                f"Newton failed to converge after {max_iter} iterations "
                f"at flat sample index {where}"
            )
        interior = v**p + 0.5 * beta * (v - am) ** 2
        at_zero = 0.5 * beta * am**2
        keep = interior < at_zero
        out[active] = np.where(keep, v, 0.0) * np.sign(z[active])
    return out


# ---------------------------------------------------------------------------
# Periodic-boundary operators and the FFT u-step
# ---------------------------------------------------------------------------


def gradient_periodic(u: np.ndarray) -> np.ndarray:
    """Forward differences with wrap-around boundary (circulant D)."""
    u = np.asarray(u, dtype=np.float64)
    dx = np.roll(u, -1, axis=-1) - u
    dy = np.roll(u, -1, axis=-2) - u
    return np.stack([dx, dy], axis=-3)


def gradient_adjoint_periodic(v: np.ndarray) -> np.ndarray:
    vx = v[..., 0, :, :]
    vy = v[..., 1, :, :]
    return (
        np.roll(vx, 1, axis=-1)
        - vx
        + np.roll(vy, 1, axis=-2)
        - vy
    )


def _difference_otfs(h: int, w: int):
    kx = np.zeros((h, w))
    kx[0, 0] -= 1.0
    kx[0, (w - 1) % w] += 1.0
    ky = np.zeros((h, w))
    ky[0, 0] -= 1.0
    ky[(h - 1) % h, 0] += 1.0
    return np.fft.fft2(kx), np.fft.fft2(ky)


def u_subproblem_fft(f: np.ndarray, v: np.ndarray, lam: float, beta: float) -> np.ndarray:
    """Closed-form minimizer of (lam/2)||u-f||^2 + (beta/2)||Du-v||^2 under
    periodic boundaries, diagonalized by the 2-D FFT."""
    if lam <= 0 or beta <= 0:
        raise ValueError("lam and beta must be positive")
    f = np.asarray(f, dtype=np.float64)
    h, w = f.shape
    otf_x, otf_y = _difference_otfs(h, w)
    denom = lam + beta * (np.abs(otf_x) ** 2 + np.abs(otf_y) ** 2)
    numer = (
        lam * np.fft.fft2(f)
        + beta * np.conj(otf_x) * np.fft.fft2(v[0])
        + beta * np.conj(otf_y) * np.fft.fft2(v[1])
    )
    return np.real(np.fft.ifft2(numer / denom))


# ---------------------------------------------------------------------------
# The alternating minimization driver
# ---------------------------------------------------------------------------


def _energy(reg, lam, beta, u, v, f, grad_fn):
    data = 0.5 * lam * float(np.sum((u - f) ** 2))
    couple = 0.5 * beta * float(np.sum((grad_fn(u) - v) ** 2))
    return data + reg.penalty(v) + couple


def _am_solve_single(f, reg, sched, backend, solver_cfg, trace, channel_offset):
    if backend == "fft":
        grad_fn = gradient_periodic
    else:
        grad_fn = gradient
    u = f.copy()
    v = grad_fn(u)
    beta = sched.beta0
    it = 0
    while beta <= sched.beta_max * (1 + 1e-12):
        obj_before = _energy(reg, sched.lam, beta, u, v, f, grad_fn)
        v = reg.prox(grad_fn(u), beta)
        obj_after_v = _energy(reg, sched.lam, beta, u, v, f, grad_fn)
        if backend == "fft":
            u = u_subproblem_fft(f, v, sched.lam, beta)
        else:
            gamma = np.full(f.shape, sched.lam / beta)
            u = _solver.reconstruct(
                f,
                v,
                gamma,
                tol=solver_cfg.tol,
                max_iter=solver_cfg.max_iter,
            )
        obj = _energy(reg, sched.lam, beta, u, v, f, grad_fn)
        gap = float(np.linalg.norm(grad_fn(u) - v))
        trace.records.append(
            AMRecord(
                iteration=it + channel_offset,
                beta=beta,
                objective=obj,
                gap=gap,
                objective_before_v=obj_before,
                objective_after_v=obj_after_v,
            )
        )
        beta *= sched.alpha
        it += 1
    return u


def am_solve(
    f: np.ndarray,
    reg: Regularizer,
    sched: ContinuationSchedule,
    backend: str = "fft",
    solver_cfg=None,
    scale: float = 255.0,
):
    """Run the continuation loop; returns (restored image, trace).

    Input and output are on the caller's intensity scale; the energy is
    evaluated on intensities divided by `scale`.  Multi-channel images are
    restored per channel (records carry a per-channel iteration offset).
    """
    if backend not in ("fft", "pcg"):
        raise ValueError(f"backend must be 'fft' or 'pcg', got {backend!r}")
    if solver_cfg is None:
        solver_cfg = _solver.SolverConfig()
    a = check_image(f) / scale
    trace = AMTrace()
    if a.ndim == 2:
        u = _am_solve_single(a, reg, sched, backend, solver_cfg, trace, 0)
    else:
        chans = []
        for c, plane in enumerate(a):
            chans.append(
                _am_solve_single(plane, reg, sched, backend, solver_cfg, trace, c * 10000)
            )
        u = np.stack(chans)
    return u * scale, trace
