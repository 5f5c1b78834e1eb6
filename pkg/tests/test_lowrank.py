import numpy as np
import pytest

from hdsa_lab.adjoint import OptimizationState
from hdsa_lab.forward import ComplementaryParams, HeatProblem, ObservationSet
from hdsa_lab.lowrank import build_lowrank
from hdsa_lab.mesh import build_mesh

from oracles import dense_hessian, generalized_eigs


def dense_misfit(state, gauss_newton=False):
    n = len(state.m)
    H = np.column_stack([state.misfit_hessian_apply(e, gauss_newton) for e in np.eye(n)])
    return 0.5 * (H + H.T)


def dense_R(prior):
    R = np.column_stack([prior.regularization(e) for e in np.eye(prior.n_m)])
    return 0.5 * (R + R.T)


@pytest.fixture(scope="module")
def dense4(map4):
    pb, obs, m, _, _ = map4
    st = OptimizationState(pb, m, obs)
    return st, dense_misfit(st), dense_R(pb.prior)


class TestEigenvalues:
    def test_matches_dense_generalized(self, map4, dense4):
        pb, obs, m, _, _ = map4
        _, Hm, R = dense4
        ref = generalized_eigs(Hm, R)
        lr = build_lowrank(OptimizationState(pb, m, obs), pb.n_m, threshold=None, clamp_negative=False)
        assert np.allclose(lr.ritz_values, ref, rtol=0, atol=1e-8 * ref[0])

    def test_leading_pairs(self, map4, dense4):
        pb, obs, m, _, _ = map4
        _, Hm, R = dense4
        ref = generalized_eigs(Hm, R)
        lr = build_lowrank(OptimizationState(pb, m, obs), 12, threshold=None)
        assert np.allclose(lr.eigenvalues[:3], ref[:3], rtol=1e-8)

    def test_r_orthonormal(self, map4, dense4):
        pb, obs, m, _, _ = map4
        _, _, R = dense4
        lr = build_lowrank(OptimizationState(pb, m, obs), 10, threshold=None)
        G = lr.vectors.T @ R @ lr.vectors
        assert np.allclose(G, np.eye(lr.rank), atol=1e-10)

    def test_eigen_residual(self, map4, dense4):
        pb, obs, m, _, _ = map4
        _, Hm, R = dense4
        lr = build_lowrank(OptimizationState(pb, m, obs), pb.n_m, threshold=None, clamp_negative=False)
        for lam, v in zip(lr.eigenvalues[:5], lr.vectors.T):
            res = Hm @ v - lam * R @ v
            assert np.linalg.norm(res) <= 1e-8 * lr.eigenvalues[0] * np.linalg.norm(R @ v)

    def test_gauss_newton_nonnegative(self, map4):
        pb, obs, m, _, _ = map4
        lr = build_lowrank(OptimizationState(pb, m, obs), pb.n_m, threshold=None, gauss_newton=True)
        assert lr.ritz_values.min() >= -1e-10 * lr.ritz_values.max()
        assert not lr.indefinite

    def test_threshold(self, map4):
        pb, obs, m, _, _ = map4
        lr = build_lowrank(OptimizationState(pb, m, obs), 15, threshold=0.1)
        assert np.all(lr.eigenvalues > 0.1)
        assert np.all(np.diff(lr.eigenvalues) <= 0)

    def test_bad_rank(self, map4):
        pb, obs, m, _, _ = map4
        with pytest.raises(ValueError):
            build_lowrank(OptimizationState(pb, m, obs), pb.n_m + 1)


class TestInverse:
    def test_no_data_gives_prior_covariance(self, rng):
        pb = HeatProblem(build_mesh(5))
        p = ComplementaryParams.nominal(noise_std=np.inf)
        obs = ObservationSet(pb.sensors, np.zeros(25), np.zeros(25))
        st = OptimizationState(pb, pb.prior.sample(1), obs, p)
        lr = build_lowrank(st, 6, threshold=None)
        assert np.all(lr.eigenvalues == 0)
        v = rng.standard_normal(pb.n_m)
        ref = pb.prior.covariance(v)
        assert np.allclose(lr.inv_apply(v), ref, rtol=1e-12, atol=1e-14 * np.abs(ref).max())

    def test_full_rank_exact(self, map4, rng):
        pb, obs, m, _, state = map4
        H = dense_hessian(OptimizationState(pb, m, obs))
        H = 0.5 * (H + H.T)
        lr = build_lowrank(OptimizationState(pb, m, obs), pb.n_m, threshold=None, clamp_negative=False)
        v = rng.standard_normal(pb.n_m)
        x = np.linalg.solve(H, v)
        assert np.linalg.norm(lr.inv_apply(v) - x) <= 1e-8 * np.linalg.norm(x)
        assert np.linalg.norm(lr.apply(x) - v) <= 1e-8 * np.linalg.norm(v)

    def test_error_bound(self, map4, dense4, rng):
        # in the eigenbasis the truncated inverse leaves exactly the dropped eigenvalues
        pb, obs, m, _, _ = map4
        _, Hm, R = dense4
        H = Hm + R
        ref = generalized_eigs(Hm, R)
        r = 6
        lr = build_lowrank(OptimizationState(pb, m, obs), pb.n_m, threshold=None, clamp_negative=False)
        trunc = type(lr)(lr.eigenvalues[:r], lr.vectors[:, :r], lr.ritz_values, lr.prior)
        L = np.linalg.cholesky(H)
        Hr_inv = np.column_stack([trunc.inv_apply(e) for e in np.eye(pb.n_m)])
        E = np.eye(pb.n_m) - L.T @ Hr_inv @ L
        assert np.linalg.norm(E, 2) == pytest.approx(np.abs(ref[r:]).max(), rel=1e-8)

    def test_clamped_indefinite_flag(self, map4):
        pb, obs, m, _, _ = map4
        lr = build_lowrank(OptimizationState(pb, m, obs), pb.n_m, threshold=None)
        if lr.indefinite:
            assert lr.eigenvalues.min() == 0.0
        assert np.all(lr.eigenvalues >= 0)


class TestCounts:
    @pytest.mark.parametrize("r", [1, 4, 9])
    def test_fresh_state(self, map4, r):
        pb, obs, m, _, _ = map4
        c0 = pb.counter.total
        lr = build_lowrank(OptimizationState(pb, m, obs), r, threshold=None)
        assert pb.counter.total - c0 == 2 * r + 2 == lr.pde_solves

    def test_cached_state(self, map4):
        pb, obs, m, _, _ = map4
        st = OptimizationState(pb, m, obs)
        st.gradient()
        lr = build_lowrank(st, 5, threshold=None)
        assert lr.pde_solves == 10
