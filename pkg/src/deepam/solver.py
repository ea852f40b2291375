"""Spatially weighted reconstruction systems and their adjoints.

The system matrix is L = diag(gamma_eff) + D^T D on the pixel grid with
replicate-boundary forward differences, so L is a 5-point stencil whose
off-diagonals are all -1 and whose diagonal is gamma_eff plus the grid
degree.  gamma values below ``GAMMA_FLOOR`` are clamped up at assembly,
which keeps L uniformly positive definite even when a learned weight map
emits exact zeros.

Solves use conjugate gradients preconditioned by a zero-fill incomplete
Cholesky factor; for this stencil under row-major ordering the IC(0)
recurrence has no fill corrections, so the factor is three vectors
(diagonal, left-neighbor, up-neighbor coefficients).  The backward
operations differentiate a loss through the solve: one extra solve
z = L^{-1} dL/du serves both the gradient with respect to the split
variable (apply D to z) and with respect to gamma (z * (f - u)).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .images import gradient, gradient_adjoint

GAMMA_FLOOR = 1e-6

_stats = {"factorizations": 0}


def factorization_count() -> int:
    """Total successful IC(0) factorizations in this process (instrumentation)."""
    return _stats["factorizations"]


class SolverError(RuntimeError):
    pass


@dataclass(frozen=True)
class SolverConfig:
    tol: float = 1e-6
    max_iter: int = 100
    # training backward solves: a few PCG iterations are enough
    backward_tol: float = 1e-6
    backward_max_iter: int = 10

    def __post_init__(self):
        if self.tol <= 0 or self.backward_tol <= 0:
            raise ValueError("tolerances must be positive")
        if self.max_iter < 1 or self.backward_max_iter < 1:
            raise ValueError("iteration caps must be >= 1")


# ---------------------------------------------------------------------------
# Assembly
# ---------------------------------------------------------------------------


def _degree_map(h: int, w: int) -> np.ndarray:
    deg = np.zeros((h, w))
    deg[:, :-1] += 1.0
    deg[:, 1:] += 1.0
    deg[:-1, :] += 1.0
    deg[1:, :] += 1.0
    return deg


@dataclass
class SparseSPD:
    """5-point system L = diag(gamma_eff) + D^T D; off-diagonals are -1."""

    height: int
    width: int
    gamma_eff: np.ndarray  # (H, W), already floored
    diag: np.ndarray  # (N,)

    @property
    def n(self) -> int:
        return self.height * self.width

    def matvec(self, x: np.ndarray) -> np.ndarray:
        flat = x.ndim == 1
        x2 = x.reshape(self.height, self.width)
        y = self.diag.reshape(self.height, self.width) * x2
        y[:, :-1] -= x2[:, 1:]
        y[:, 1:] -= x2[:, :-1]
        y[:-1, :] -= x2[1:, :]
        y[1:, :] -= x2[:-1, :]
        return y.ravel() if flat else y

    def to_csr(self):
        import scipy.sparse as sp

        h, w, n = self.height, self.width, self.n
        idx = np.arange(n).reshape(h, w)
        rows = [np.arange(n)]
        cols = [np.arange(n)]
        vals = [self.diag]
        for a, b in (
            (idx[:, :-1].ravel(), idx[:, 1:].ravel()),
            (idx[:-1, :].ravel(), idx[1:, :].ravel()),
        ):
            rows += [a, b]
            cols += [b, a]
            vals += [np.full(a.size, -1.0), np.full(a.size, -1.0)]
        return sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(n, n),
        )

    def to_dense(self) -> np.ndarray:
        return self.to_csr().toarray()

    def to_banded_lower(self) -> np.ndarray:
        """Lower-banded storage for LAPACK-style banded solvers."""
        n, w = self.n, self.width
        ab = np.zeros((w + 1, n))
        ab[0] = self.diag
        left = np.full(n, -1.0)
        left[:: w if w > 0 else 1] = 0.0
        ab[1, : n - 1] = left[1:]
        if n > w:
            ab[w, : n - w] = -1.0
        return ab


def assemble(gamma: np.ndarray) -> SparseSPD:
    """Build L = diag(max(gamma, GAMMA_FLOOR)) + D^T D.

    Raises on an identically-zero gamma, which would make the unfloored
    system singular on constants.
    """
    g = np.asarray(gamma, dtype=np.float64)
    if g.ndim != 2:
        raise ValueError(f"gamma must be 2-D, got shape {g.shape}")
    if not np.all(np.isfinite(g)):
        raise SolverError("gamma contains non-finite values")
    if np.any(g < 0):
        raise SolverError("gamma must be nonnegative")
    if not np.any(g > 0):
        raise SolverError("all-zero gamma: system is singular on constants")
    h, w = g.shape
    eff = np.maximum(g, GAMMA_FLOOR)
    diag = (eff + _degree_map(h, w)).ravel()
    return SparseSPD(height=h, width=w, gamma_eff=eff, diag=diag)


# ---------------------------------------------------------------------------
# IC(0) factorization and triangular solves (numba kernels)
# ---------------------------------------------------------------------------


@njit(cache=True)
def _ic0_kernel(diag, h, w, shift):
    n = h * w
    d = np.zeros(n)
    ll = np.zeros(n)
    lu = np.zeros(n)
    for i in range(n):
        acc = diag[i] + shift
        if i % w > 0:
            ll[i] = -1.0 / d[i - 1]
            acc -= ll[i] * ll[i]
        if i >= w:
            lu[i] = -1.0 / d[i - w]
            acc -= lu[i] * lu[i]
        if acc <= 0.0:
            return d, ll, lu, i
        d[i] = np.sqrt(acc)
    return d, ll, lu, -1


@njit(cache=True)
def _ic0_apply(d, ll, lu, w, b):
    n = b.shape[0]
    y = np.empty(n)
    for i in range(n):
        acc = b[i]
        if i % w > 0:
            acc -= ll[i] * y[i - 1]
        if i >= w:
            acc -= lu[i] * y[i - w]
        y[i] = acc / d[i]
    x = np.empty(n)
    for i in range(n - 1, -1, -1):
        acc = y[i]
        if i + 1 < n:
            acc -= ll[i + 1] * x[i + 1]
        if i + w < n:
            acc -= lu[i + w] * x[i + w]
        x[i] = acc / d[i]
    return x


@dataclass
class ICPreconditioner:
    """Lower-triangular IC(0) factor on the pattern of tril(L)."""

    height: int
    width: int
    d: np.ndarray  # factor diagonal (positive)
    ll: np.ndarray  # coefficient for the left neighbor, 0 at row starts
    lu: np.ndarray  # coefficient for the up neighbor, 0 in the first row
    shift: float = 0.0  # diagonal shift that was needed (usually 0)

    def solve(self, r: np.ndarray) -> np.ndarray:
        return _ic0_apply(self.d, self.ll, self.lu, self.width, r)

    def factor_dense(self) -> np.ndarray:
        n = self.height * self.width
        m = np.zeros((n, n))
        m[np.arange(n), np.arange(n)] = self.d
        for i in range(n):
            if i % self.width > 0:
                m[i, i - 1] = self.ll[i]
            if i >= self.width:
                m[i, i - self.width] = self.lu[i]
        return m


def ic0_factorize(L: SparseSPD, max_retries: int = 3) -> ICPreconditioner:
    """Zero-fill incomplete Cholesky of L; on a nonpositive pivot, retry
    with a diagonal shift of 1e-8 * trace/N, doubling up to `max_retries`
    times before failing."""
    base_shift = 1e-8 * float(np.sum(L.diag)) / L.n
    shift = 0.0
    for attempt in range(max_retries + 1):
        d, ll, lu, bad = _ic0_kernel(L.diag, L.height, L.width, shift)
        if bad < 0:
            _stats["factorizations"] += 1
            return ICPreconditioner(
                height=L.height, width=L.width, d=d, ll=ll, lu=lu, shift=shift
            )
        shift = base_shift * (2.0**attempt)
    raise SolverError(
        f"IC(0) hit a nonpositive pivot at row {bad} even after "
        f"{max_retries} shifted retries"
    )


# ---------------------------------------------------------------------------
# Preconditioned conjugate gradients
# ---------------------------------------------------------------------------


@dataclass
class SolveReport:
    iterations: int
    relative_residual: float  # true ||Lx - b|| / ||b|| at exit
    history: list[float] = field(default_factory=list)
    converged: bool = True

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["iteration", "relative_residual"])
            for i, r in enumerate(self.history, start=1):
                w.writerow([i, repr(r)])


def pcg_solve(
    L: SparseSPD,
    M: ICPreconditioner | None,
    b: np.ndarray,
    tol: float = 1e-6,
    max_iter: int = 100,
):
    """PCG on L x = b; returns (x, SolveReport).

    Stops once both the preconditioned residual norm sqrt(r' M^-1 r) and
    the recursively updated residual fall below tol relative to their
    initial values; the report carries the recomputed true relative
    residual.  A zero-curvature direction raises SolverError.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    shape = b.shape
    bf = np.asarray(b, dtype=np.float64).ravel()
    if bf.size != L.n:
        raise ValueError(f"rhs size {bf.size} does not match system size {L.n}")
    bnorm = float(np.linalg.norm(bf))
    if bnorm == 0.0:
        return np.zeros(shape), SolveReport(iterations=0, relative_residual=0.0)

    x = np.zeros(L.n)
    r = bf.copy()
    z = M.solve(r) if M is not None else r.copy()
    rz = float(r @ z)
    pz0 = np.sqrt(max(rz, 0.0))
    p = z.copy()
    history: list[float] = []
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        q = L.matvec(p)
        pq = float(p @ q)
        if pq <= 0.0:
            raise SolverError(f"PCG breakdown: nonpositive curvature at iteration {it}")
        alpha = rz / pq
        x += alpha * p
        r -= alpha * q
        relres = float(np.linalg.norm(r)) / bnorm
        history.append(relres)
        z = M.solve(r) if M is not None else r.copy()
        rz_new = float(r @ z)
        if np.sqrt(max(rz_new, 0.0)) <= tol * pz0 and relres <= tol:
            converged = True
            break
        p = z + (rz_new / rz) * p
        rz = rz_new
    true_res = float(np.linalg.norm(bf - L.matvec(x))) / bnorm
    report = SolveReport(
        iterations=it,
        relative_residual=true_res,
        history=history,
        converged=converged and true_res <= tol * 10,
    )
    return x.reshape(shape), report


# ---------------------------------------------------------------------------
# Reconstruction and its backward passes
# ---------------------------------------------------------------------------


@dataclass
class FactorizedSystem:
    """One assembled + factorized system, reused across solves."""

    L: SparseSPD
    M: ICPreconditioner

    def solve(self, b, tol=1e-6, max_iter=100, require_convergence=False):
        x, report = pcg_solve(self.L, self.M, b, tol=tol, max_iter=max_iter)
        if require_convergence and not report.converged:
            raise SolverError(
                f"PCG did not reach tol {tol} in {max_iter} iterations "
                f"(relative residual {report.relative_residual:.3e})"
            )
        return x, report


def factorize(gamma: np.ndarray) -> FactorizedSystem:
    L = assemble(gamma)
    return FactorizedSystem(L=L, M=ic0_factorize(L))


def reconstruct(
    f: np.ndarray,
    v: np.ndarray,
    gamma: np.ndarray,
    tol: float = 1e-6,
    max_iter: int = 100,
) -> np.ndarray:
    """Solve L u = gamma_eff*f + D^T v per channel, sharing one factorization."""
    f = np.asarray(f, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    single = f.ndim == 2
    fc = f[None] if single else f
    vc = v[None] if single else v
    if vc.shape[0] != fc.shape[0] or vc.shape[-2:] != fc.shape[-2:]:
        raise ValueError(f"shape mismatch: f {f.shape} vs v {v.shape}")
    system = factorize(gamma)
    out = np.empty_like(fc)
    for c in range(fc.shape[0]):
        rhs = system.L.gamma_eff * fc[c] + gradient_adjoint(vc[c])
        out[c], _ = system.solve(rhs, tol=tol, max_iter=max_iter, require_convergence=True)
    return out[0] if single else out


def backward_v(
    system: FactorizedSystem,
    dl_du: np.ndarray,
    tol: float = 1e-6,
    max_iter: int = 10,
    z: np.ndarray | None = None,
) -> np.ndarray:
    """Gradient of the loss w.r.t. the split variable: D applied to
    z = L^{-1} dl_du (one solve, shared with :func:`backward_gamma`)."""
    if z is None:
        z, _ = system.solve(dl_du, tol=tol, max_iter=max_iter)
    return gradient(z)


def backward_gamma(
    system: FactorizedSystem,
    dl_du: np.ndarray,
    f: np.ndarray,
    u: np.ndarray,
    tol: float = 1e-6,
    max_iter: int = 10,
    z: np.ndarray | None = None,
) -> np.ndarray:
    """Gradient of the loss w.r.t. the effective data weights:
    (L^{-1} dl_du) * (f - u), with u the forward solution."""
    if z is None:
        z, _ = system.solve(dl_du, tol=tol, max_iter=max_iter)
    return z * (f - u)


def reconstruct_backward(
    system: FactorizedSystem,
    dl_du: np.ndarray,
    f: np.ndarray,
    u: np.ndarray,
    tol: float = 1e-6,
    max_iter: int = 10,
):
    """Both backward gradients from a single extra solve; returns
    (dl_dv, dl_dgamma_eff, z)."""
    z, _ = system.solve(dl_du, tol=tol, max_iter=max_iter)
    return gradient(z), z * (f - u), z


def dump_matrix_market(L: SparseSPD, path) -> None:
    """Coordinate-format export for external verification."""
    import scipy.io as sio

    sio.mmwrite(str(path), L.to_csr().tocoo())
