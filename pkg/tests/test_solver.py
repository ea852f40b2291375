import numpy as np
import pytest

from deepam import solver
from deepam.images import gradient, gradient_adjoint
from deepam.solver import (
    GAMMA_FLOOR,
    SolveReport,
    SolverConfig,
    SolverError,
    SparseSPD,
    assemble,
    backward_gamma,
    backward_v,
    dump_matrix_market,
    factorization_count,
    factorize,
    ic0_factorize,
    pcg_solve,
    reconstruct,
    reconstruct_backward,
)
from oracles import dense_gradient_matrix


def dense_system(gamma):
    h, w = gamma.shape
    d = dense_gradient_matrix(h, w)
    return np.diag(np.maximum(gamma, GAMMA_FLOOR).ravel()) + d.T @ d


class TestAssemble:
    def test_single_pixel(self):
        L = assemble(np.array([[2.0]]))
        assert np.allclose(L.to_dense(), [[2.0]])

    def test_two_pixel_column(self):
        L = assemble(np.ones((2, 1)))
        assert np.allclose(L.to_dense(), [[2.0, -1.0], [-1.0, 2.0]])

    def test_matches_dense_construction(self, rng):
        gamma = rng.uniform(0.1, 10.0, size=(5, 5))
        L = assemble(gamma)
        assert np.allclose(L.to_dense(), dense_system(gamma), atol=1e-14)

    def test_all_zero_gamma_rejected(self):
        with pytest.raises(SolverError):
            assemble(np.zeros((4, 4)))

    def test_negative_gamma_rejected(self):
        g = np.ones((3, 3))
        g[1, 1] = -0.5
        with pytest.raises(SolverError):
            assemble(g)

    def test_floor_applied_to_partial_zeros(self):
        g = np.zeros((3, 3))
        g[0, 0] = 1.0
        L = assemble(g)
        assert L.gamma_eff[1, 1] == GAMMA_FLOOR
        assert L.gamma_eff[0, 0] == 1.0

    def test_matvec_of_ones_gives_gamma(self, rng):
        gamma = rng.uniform(0.5, 3.0, size=(6, 7))
        L = assemble(gamma)
        assert np.allclose(L.matvec(np.ones((6, 7))), L.gamma_eff, atol=1e-12)

    def test_diagonal_dominance(self, rng):
        L = assemble(rng.uniform(0.0, 2.0, size=(5, 6)))
        dense = L.to_dense()
        offsum = np.sum(np.abs(dense), axis=1) - np.abs(np.diag(dense))
        assert np.all(np.diag(dense) >= offsum)

    def test_positive_definiteness_sampled(self, rng):
        L = assemble(rng.uniform(0.1, 10.0, size=(6, 6)))
        for _ in range(25):
            x = rng.normal(size=36)
            assert x @ L.matvec(x) > 0

    def test_matvec_matches_csr(self, rng):
        gamma = rng.uniform(0.1, 4.0, size=(4, 9))
        L = assemble(gamma)
        x = rng.normal(size=36)
        assert np.allclose(L.matvec(x), L.to_csr() @ x, atol=1e-12)


class TestIC0:
    def test_single_pixel_sqrt(self):
        L = assemble(np.array([[4.0]]))
        M = ic0_factorize(L)
        assert M.d[0] == pytest.approx(2.0)

    def test_hand_factor_2x1(self):
        L = assemble(np.ones((2, 1)))
        M = ic0_factorize(L)
        expect = np.array([[np.sqrt(2.0), 0.0], [-1.0 / np.sqrt(2.0), np.sqrt(1.5)]])
        assert np.allclose(M.factor_dense(), expect, atol=1e-14)

    def test_tridiagonal_equals_exact_cholesky(self, rng):
        gamma = rng.uniform(0.2, 3.0, size=(1, 8))
        L = assemble(gamma)
        M = ic0_factorize(L)
        assert np.allclose(M.factor_dense(), np.linalg.cholesky(L.to_dense()), atol=1e-12)

    def test_product_matches_on_pattern(self, rng):
        gamma = rng.uniform(0.1, 5.0, size=(5, 4))
        L = assemble(gamma)
        M = ic0_factorize(L)
        dense = L.to_dense()
        prod = M.factor_dense() @ M.factor_dense().T
        pattern = dense != 0
        assert np.allclose(prod[pattern], dense[pattern], atol=1e-12)

    def test_apply_is_inverse_of_product(self, rng):
        gamma = rng.uniform(0.1, 5.0, size=(6, 6))
        L = assemble(gamma)
        M = ic0_factorize(L)
        r = rng.normal(size=36)
        prod = M.factor_dense() @ M.factor_dense().T
        assert np.allclose(M.solve(r), np.linalg.solve(prod, r), atol=1e-10)

    def test_indefinite_diag_fails_after_retries(self):
        L = SparseSPD(
            height=1, width=3, gamma_eff=np.zeros((1, 3)), diag=np.full(3, 0.5)
        )
        with pytest.raises(SolverError, match="nonpositive pivot"):
            ic0_factorize(L)

    def test_instrumentation_counter(self, rng):
        before = factorization_count()
        factorize(rng.uniform(0.1, 1.0, size=(4, 4)))
        assert factorization_count() == before + 1


class TestPCG:
    def test_zero_rhs(self, rng):
        sys_ = factorize(rng.uniform(0.1, 2.0, size=(5, 5)))
        x, rep = pcg_solve(sys_.L, sys_.M, np.zeros((5, 5)))
        assert np.all(x == 0.0)
        assert rep.iterations == 0 and rep.relative_residual == 0.0

    def test_matches_direct_solve(self, rng):
        gamma = rng.uniform(0.1, 10.0, size=(16, 16))
        L = assemble(gamma)
        M = ic0_factorize(L)
        b = rng.normal(size=(16, 16))
        x, rep = pcg_solve(L, M, b, tol=1e-8, max_iter=200)
        expect = np.linalg.solve(L.to_dense(), b.ravel()).reshape(16, 16)
        assert rep.converged
        assert np.linalg.norm(x - expect) / np.linalg.norm(expect) < 1e-7

    def test_64x64_converges_within_30(self, rng):
        gamma = rng.uniform(0.1, 10.0, size=(64, 64))
        sys_ = factorize(gamma)
        b = rng.normal(size=(64, 64))
        x, rep = pcg_solve(sys_.L, sys_.M, b, tol=1e-5, max_iter=30)
        assert rep.converged and rep.relative_residual <= 1e-5

    def test_preconditioning_never_hurts(self, rng):
        for _ in range(5):
            gamma = rng.uniform(0.1, 10.0, size=(32, 32))
            L = assemble(gamma)
            M = ic0_factorize(L)
            b = rng.normal(size=(32, 32))
            _, rep_pcg = pcg_solve(L, M, b, tol=1e-6, max_iter=400)
            _, rep_cg = pcg_solve(L, None, b, tol=1e-6, max_iter=400)
            assert rep_pcg.iterations <= rep_cg.iterations

    def test_breakdown_raises(self):
        L = SparseSPD(
            height=1, width=2, gamma_eff=np.zeros((1, 2)), diag=np.array([-3.0, -3.0])
        )
        with pytest.raises(SolverError, match="curvature"):
            pcg_solve(L, None, np.ones(2), tol=1e-6, max_iter=10)

    def test_report_csv(self, tmp_path, rng):
        sys_ = factorize(rng.uniform(0.5, 2.0, size=(8, 8)))
        _, rep = pcg_solve(sys_.L, sys_.M, rng.normal(size=(8, 8)))
        p = tmp_path / "report.csv"
        rep.to_csv(p)
        lines = p.read_text().strip().splitlines()
        assert lines[0] == "iteration,relative_residual"
        assert len(lines) == 1 + len(rep.history)

    def test_tol_validation(self, rng):
        sys_ = factorize(rng.uniform(0.5, 2.0, size=(3, 3)))
        with pytest.raises(ValueError):
            pcg_solve(sys_.L, sys_.M, np.ones((3, 3)), tol=0.0)


class TestReconstruct:
    def test_gradient_rhs_returns_input(self, rng):
        f = rng.uniform(0, 255, size=(12, 12))
        gamma = rng.uniform(0.5, 2.0, size=(12, 12))
        u = reconstruct(f, gradient(f), gamma, tol=1e-10, max_iter=500)
        assert np.allclose(u, f, atol=1e-6)

    def test_huge_gamma_returns_input(self, rng):
        f = rng.uniform(0, 255, size=(10, 10))
        u = reconstruct(f, np.zeros((2, 10, 10)), np.full((10, 10), 1e8))
        assert np.max(np.abs(u - f)) / 255 < 1e-4

    def test_tiny_gamma_flattens_to_mean(self, rng):
        # condition number ~ 8/gamma here, so tolerances are modest
        f = rng.uniform(0, 255, size=(12, 12))
        gamma = np.full((12, 12), 1e-6)
        u = reconstruct(f, np.zeros((2, 12, 12)), gamma, tol=1e-8, max_iter=3000)
        dense = dense_system(gamma)
        rhs = gamma.ravel() * f.ravel()
        expect = np.linalg.solve(dense, rhs).reshape(12, 12)
        assert np.linalg.norm(u - expect) / np.linalg.norm(expect) < 1e-5
        assert np.max(np.abs(u[3:-3, 3:-3] - f.mean())) < 0.5

    def test_multichannel_shares_factorization(self, rng):
        f = rng.uniform(0, 255, size=(3, 8, 8))
        v = rng.normal(size=(3, 2, 8, 8))
        gamma = rng.uniform(0.5, 2.0, size=(8, 8))
        before = factorization_count()
        u = reconstruct(f, v, gamma)
        assert factorization_count() == before + 1
        assert u.shape == f.shape

    def test_shape_mismatch(self, rng):
        with pytest.raises(ValueError):
            reconstruct(np.zeros((4, 4)), np.zeros((2, 5, 5)), np.ones((4, 4)))


class TestBackward:
    def _setup(self, rng, h=6, w=6):
        gamma = rng.uniform(0.5, 2.0, size=(h, w))
        f = rng.uniform(0, 1, size=(h, w))
        v = rng.normal(size=(2, h, w))
        sys_ = factorize(gamma)
        rhs = sys_.L.gamma_eff * f + gradient_adjoint(v)
        u, _ = sys_.solve(rhs, tol=1e-13, max_iter=500)
        c = rng.normal(size=(h, w))  # dL/du for the linear loss sum(c * u)
        return gamma, f, v, sys_, u, c

    def test_zero_upstream_gives_zero(self, rng):
        gamma, f, v, sys_, u, _ = self._setup(rng)
        dv = backward_v(sys_, np.zeros_like(f), tol=1e-12, max_iter=200)
        dg = backward_gamma(sys_, np.zeros_like(f), f, u, tol=1e-12, max_iter=200)
        assert np.all(dv == 0) and np.all(dg == 0)

    def test_perfect_fit_gives_zero_gamma_grad(self, rng):
        h = w = 6
        gamma = rng.uniform(0.5, 2.0, size=(h, w))
        f = rng.uniform(0, 1, size=(h, w))
        sys_ = factorize(gamma)
        u = reconstruct(f, gradient(f), gamma, tol=1e-12, max_iter=500)
        c = rng.normal(size=(h, w))
        dg = backward_gamma(sys_, c, f, u, tol=1e-12, max_iter=500)
        assert np.max(np.abs(dg)) < 1e-6

    def test_linearity_in_upstream(self, rng):
        gamma, f, v, sys_, u, c = self._setup(rng)
        c2 = rng.normal(size=f.shape)
        lhs = backward_v(sys_, c + c2, tol=1e-12, max_iter=300)
        rhs = backward_v(sys_, c, tol=1e-12, max_iter=300) + backward_v(
            sys_, c2, tol=1e-12, max_iter=300
        )
        assert np.allclose(lhs, rhs, atol=1e-10)

    def test_v_gradient_matches_finite_differences(self, rng):
        gamma, f, v, sys_, u, c = self._setup(rng)
        dense = dense_system(gamma)
        geff = np.maximum(gamma, GAMMA_FLOOR)

        def loss_for_v(vv):
            rhs = (geff * f + gradient_adjoint(vv)).ravel()
            return float(c.ravel() @ np.linalg.solve(dense, rhs))

        dv = backward_v(sys_, c, tol=1e-13, max_iter=500)
        step = 1e-6
        for idx in [(0, 2, 3), (1, 4, 1), (0, 0, 0), (1, 5, 5), (0, 3, 4)]:
            vp = v.copy()
            vp[idx] += step
            vm = v.copy()
            vm[idx] -= step
            fd = (loss_for_v(vp) - loss_for_v(vm)) / (2 * step)
            assert dv[idx] == pytest.approx(fd, rel=1e-6, abs=1e-10)

    def test_gamma_gradient_matches_finite_differences(self, rng):
        gamma, f, v, sys_, u, c = self._setup(rng)

        def loss_for_gamma(g):
            geff = np.maximum(g, GAMMA_FLOOR)
            dense = dense_system(g)
            rhs = (geff * f + gradient_adjoint(v)).ravel()
            return float(c.ravel() @ np.linalg.solve(dense, rhs))

        dg = backward_gamma(sys_, c, f, u, tol=1e-13, max_iter=500)
        step = 1e-6
        for idx in [(0, 0), (2, 3), (5, 5), (1, 4), (3, 2)]:
            gp = gamma.copy()
            gp[idx] += step
            gm = gamma.copy()
            gm[idx] -= step
            fd = (loss_for_gamma(gp) - loss_for_gamma(gm)) / (2 * step)
            assert dg[idx] == pytest.approx(fd, rel=1e-6, abs=1e-10)

    def test_combined_backward_single_solve(self, rng):
        gamma, f, v, sys_, u, c = self._setup(rng)
        dv, dg, z = reconstruct_backward(sys_, c, f, u, tol=1e-12, max_iter=300)
        assert np.allclose(dv, backward_v(sys_, c, z=z), atol=1e-14)
        assert np.allclose(dg, backward_gamma(sys_, c, f, u, z=z), atol=1e-14)


def test_matrix_market_roundtrip(tmp_path, rng):
    import scipy.io as sio

    L = assemble(rng.uniform(0.1, 3.0, size=(4, 5)))
    p = tmp_path / "L.mtx"
    dump_matrix_market(L, p)
    back = sio.mmread(p).toarray()
    assert np.allclose(back, L.to_dense(), atol=1e-12)


def test_solver_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(tol=0.0)
    with pytest.raises(ValueError):
        SolverConfig(max_iter=0)
