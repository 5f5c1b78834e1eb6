r"""Low-rank approximation of the prior-preconditioned misfit Hessian.

Lanczos runs on ``T = C H_mis``, which is self-adjoint in the ``R`` inner
product, so Ritz vectors come out ``R``-orthonormal and

.. math::

    H \approx R + R V \Lambda V^\top R, \qquad
    H^{-1} \approx C - V \,\mathrm{diag}\!\left(\frac{\lambda_i}{1+\lambda_i}\right) V^\top .

Every Lanczos step applies ``H_mis`` once (two PDE solves); the state and
adjoint at the expansion point add two more if they are not cached yet, so a
fresh build of rank ``r`` costs ``2r + 2`` solves.
"""
import logging
from dataclasses import dataclass

import numpy as np
from scipy.linalg import eigh_tridiagonal

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LowRankHessian:
    """Dominant eigenpairs of ``C H_mis`` at one ``(m*, theta)``.

    Attributes
    ----------
    eigenvalues : ndarray
        Retained Ritz values, nonincreasing, clamped at zero.
    vectors : ndarray
        ``(n_m, r)`` Ritz vectors, ``V^T R V = I``.
    ritz_values : ndarray
        All Ritz values of the Lanczos run before thresholding and clamping.
    indefinite : bool
        True if a Ritz value fell below ``-negative_tol``. The SMW inverse
        then ignores the negative part, and callers should prefer a CG solve.
    """

    eigenvalues: np.ndarray
    vectors: np.ndarray
    ritz_values: np.ndarray
    prior: object
    indefinite: bool = False
    lanczos_steps: int = 0
    pde_solves: int = 0

    @property
    def rank(self):
        return len(self.eigenvalues)

    def inv_apply(self, v):
        """``H^{-1} v`` via Sherman-Morrison-Woodbury."""
        v = np.asarray(v, dtype=float)
        lam = self.eigenvalues
        coef = (lam / (1.0 + lam)) * (self.vectors.T @ v)
        return self.prior.covariance(v) - self.vectors @ coef

    def apply(self, v):
        """``H v`` under the same approximation."""
        v = np.asarray(v, dtype=float)
        Rv = self.prior.regularization(v)
        RV = np.column_stack([self.prior.regularization(c) for c in self.vectors.T]) if self.rank \
            else np.zeros((len(v), 0))
        return Rv + RV @ (self.eigenvalues * (self.vectors.T @ Rv))


def build_lowrank(state, r, threshold=0.1, gauss_newton=False, seed=0,
                  negative_tol=1e-10, breakdown_tol=1e-12, clamp_negative=True):
    """Lanczos with full ``R``-reorthogonalization, ``r`` steps.

    Parameters
    ----------
    state : OptimizationState
        Expansion point, normally the MAP point.
    r : int
        Number of Lanczos steps; also the maximum retained rank.
    threshold : float or None
        Keep Ritz values strictly above this. ``None`` keeps all ``r`` pairs
        (negative ones clamped to zero).
    gauss_newton : bool
        Use the Gauss-Newton misfit Hessian, which is PSD by construction.
    seed : int
        Seed for the start vector and any restart vectors.
    clamp_negative : bool
        Clamp negative Ritz values at zero (the default). With False, values in
        ``(-1, 0)`` are kept, which keeps the inverse exact at full rank for an
        indefinite but positive-definite-overall ``H``; values ``<= -1`` are
        rejected since ``H`` itself would not be positive definite.

    On breakdown (an invariant subspace has been found) Lanczos restarts with
    a random vector orthogonalized against the current basis.
    """
    prior = state.problem.prior
    n = len(state.m)
    if not 1 <= r <= n:
        raise ValueError(f"rank must lie in [1, {n}], got {r}")
    counter = state.problem.counter
    start = counter.total
    state.u, state.p  # noqa: B018 -- solve state and adjoint up front if needed

    rng = np.random.default_rng(seed)
    Q = np.zeros((n, r))
    RQ = np.zeros((n, r))
    alpha = np.zeros(r)
    beta = np.zeros(max(r - 1, 0))

    def fresh(k):
        x = rng.standard_normal(n)
        for _ in range(2):
            x -= Q[:, :k] @ (RQ[:, :k].T @ x)
        Rx = prior.regularization(x)
        return x / np.sqrt(x @ Rx)

    q = fresh(0)
    scale = 0.0
    for k in range(r):
        Q[:, k] = q
        RQ[:, k] = prior.regularization(q)
        hq = state.misfit_hessian_apply(q, gauss_newton)
        alpha[k] = q @ hq
        scale = max(scale, abs(alpha[k]))
        if k == r - 1:
            break
        w = prior.covariance(hq)
        for _ in range(2):
            w -= Q[:, :k + 1] @ (RQ[:, :k + 1].T @ w)
        b = np.sqrt(max(w @ prior.regularization(w), 0.0))
        if b <= breakdown_tol * max(scale, 1.0):
            log.debug("Lanczos breakdown at step %d; restarting", k + 1)
            beta[k] = 0.0
            q = fresh(k + 1)
        else:
            beta[k] = b
            q = w / b

    if r == 1:
        theta, S = alpha.copy(), np.ones((1, 1))
    else:
        theta, S = eigh_tridiagonal(alpha, beta)
    order = np.argsort(theta)[::-1]
    theta, S = theta[order], S[:, order]
    indefinite = bool(theta[-1] < -negative_tol * max(1.0, theta[0]))
    if indefinite:
        log.info("misfit Hessian is indefinite (min Ritz value %.3e); clamping at 0", theta[-1])

    keep = np.ones(r, dtype=bool) if threshold is None else theta > threshold
    if clamp_negative:
        lam = np.maximum(theta[keep], 0.0)
    else:
        if theta[-1] <= -1.0:
            raise np.linalg.LinAlgError(f"Hessian not positive definite (Ritz value {theta[-1]:.3e})")
        lam = theta[keep]
    V = Q @ S[:, keep]
    return LowRankHessian(lam, V, theta, prior, indefinite, r, counter.total - start)


def inv_apply(lr, v):
    return lr.inv_apply(v)
