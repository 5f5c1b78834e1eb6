r"""Adjoint-based derivatives of the MAP cost.

With ``A(m) u = b(theta)`` the discrete state equation, ``O`` the observation
matrix and ``r = O u - y(theta_e)``, the cost is

.. math::

    J(m, \theta) = \tfrac12 r^\top \Gamma^{-1}(\theta_e) r
                   + \tfrac12 (m - m_{pr})^\top R (m - m_{pr}).

Write ``C(w)`` for the Jacobian of ``m -> K(exp m) w``. Then

* adjoint:      ``A p = O^T Gamma^{-1} r``
* gradient:     ``g = R (m - m_pr) - C(u)^T p``
* incr. state:  ``A u^ = -C(u) m^``
* incr. adjoint:``A p^ = O^T Gamma^{-1} O u^ - C(p) m^``
* Hessian:      ``H m^ = R m^ - C(p)^T u^ - C(u)^T p^ - W m^``

where ``W`` is the second derivative of ``p^T K(exp m) u`` in ``m``. The
mixed block ``B = d^2 J / dm dtheta`` is applied either by reusing
``(u^, p^)`` (for ``B^T``) or with two modified incremental solves (for ``B``).

The returned gradient and Hessian act on coefficient vectors: the directional
derivative of ``J`` along ``m^`` is ``g @ m^``.
"""
from dataclasses import dataclass

import numpy as np

from . import kernels
from .mesh import element_coefficient


@dataclass
class IncrementalState:
    """Incremental state/adjoint pair for one direction ``mhat``."""

    mhat: np.ndarray
    uhat: np.ndarray
    phat: np.ndarray
    gauss_newton: bool
    owner: "OptimizationState"


class OptimizationState:
    """Cached state, adjoint and operators at a fixed ``(m, theta)``.

    State and adjoint are solved lazily, each exactly once. Every solve with
    the state operator is charged to ``problem.counter``.
    """

    def __init__(self, problem, m, obs, params=None):
        self.problem = problem
        self.m = np.array(m, dtype=float)
        self.obs = obs
        self.params = params if params is not None else problem.params
        mesh = problem.mesh
        self._tris = mesh.triangles
        self._ke = mesh.local_stiffness
        self.kappa = element_coefficient(mesh, self.m)
        self._lu = None
        self._A_ext = None
        self._u = None
        self._p = None

    # -- primal / adjoint ----------------------------------------------------

    @property
    def lu(self):
        if self._lu is None:
            self._lu = self.problem.factorize(self.m, self.params)
        return self._lu

    def solve(self, rhs):
        """One PDE solve with the state operator, refined in extended precision."""
        self.problem.counter.add()
        x = self.lu.solve(rhs)
        if self.problem.refine_steps:
            if self._A_ext is None:
                self._A_ext = self.problem.state_operator(self.m, self.params).astype(np.longdouble)
            rhs_ext = np.asarray(rhs, dtype=np.longdouble)
            x_ext = x.astype(np.longdouble)
            for _ in range(self.problem.refine_steps):
                x_ext += self.lu.solve((rhs_ext - self._A_ext @ x_ext).astype(float))
            x = x_ext.astype(float)
        return x

    @property
    def u(self):
        if self._u is None:
            self._u = self.solve(self.problem.rhs(self.params))
        return self._u

    @property
    def data(self):
        return self.obs.data(self.params)

    @property
    def gamma_inv(self):
        return 1.0 / self.params.sigma() ** 2

    @property
    def residual(self):
        return self.problem.O @ self.u - self.data

    @property
    def p(self):
        if self._p is None:
            O = self.problem.O
            self._p = self.solve(O.T @ (self.gamma_inv * self.residual))
        return self._p

    def misfit(self):
        r = self.residual
        return 0.5 * float(r @ (self.gamma_inv * r))

    def cost(self):
        return self.misfit() + self.problem.prior.cost(self.m)

    # -- C(w) and friends -------------------------------------------------------

    def _C(self, w, mhat):
        coef = self.kappa * mhat[self._tris].sum(axis=1) / 3.0
        return kernels.stiffness_action(self._tris, self._ke, coef, w, len(w))

    def _CT(self, w, q):
        pair = kernels.stiffness_pairing(self._tris, self._ke, q, w)
        return kernels.scatter_to_nodes(self._tris, self.kappa * pair / 3.0, len(w))

    def _W(self, mhat):
        pair = kernels.stiffness_pairing(self._tris, self._ke, self.p, self.u)
        vals = self.kappa * pair * mhat[self._tris].sum(axis=1) / 9.0
        return kernels.scatter_to_nodes(self._tris, vals, len(mhat))

    # -- derivatives ----------------------------------------------------------

    def gradient(self):
        prior = self.problem.prior
        return prior.regularization(self.m - prior.mean) - self._CT(self.u, self.p)

    def incremental(self, mhat, gauss_newton=False):
        """Incremental state and adjoint for ``mhat`` (two PDE solves)."""
        mhat = np.asarray(mhat, dtype=float)
        O = self.problem.O
        uhat = self.solve(-self._C(self.u, mhat))
        rhs = O.T @ (self.gamma_inv * (O @ uhat))
        if not gauss_newton:
            rhs = rhs - self._C(self.p, mhat)
        phat = self.solve(rhs)
        return IncrementalState(mhat, uhat, phat, gauss_newton, self)

    def hessian_from(self, inc):
        out = self.problem.prior.regularization(inc.mhat) - self._CT(self.u, inc.phat)
        if not inc.gauss_newton:
            out -= self._CT(self.p, inc.uhat) + self._W(inc.mhat)
        return out

    def hessian_apply(self, mhat, gauss_newton=False):
        """``H mhat`` via two PDE solves on top of the cached state/adjoint."""
        return self.hessian_from(self.incremental(mhat, gauss_newton))

    def misfit_hessian_apply(self, mhat, gauss_newton=False):
        """Data-misfit part ``(H - R) mhat``."""
        inc = self.incremental(mhat, gauss_newton)
        out = -self._CT(self.u, inc.phat)
        if not gauss_newton:
            out -= self._CT(self.p, inc.uhat) + self._W(inc.mhat)
        return out

    # -- mixed derivatives ----------------------------------------------------

    def _theta_partials(self):
        """Pieces of ``d/dtheta`` shared by the B and B^T applies."""
        pb = self.problem
        params = self.params
        db = pb.rhs_derivatives(params)                   # (n_m, n_aux)
        dbeta = pb.beta_rates(params)                      # (n_aux,)
        a = params.sigma_scale
        fac = params.noise_factor()
        dgamma_inv = -2.0 * a / (params.sigma_nominal**2 * fac**3)
        dy = self.obs.noise * a
        return db, dbeta, dgamma_inv, dy

    def bt_apply(self, inc):
        """``B^T mhat`` (length n_theta), reusing the incremental solves in ``inc``."""
        if inc.owner is not self:
            raise ValueError("incremental state belongs to a different optimization state")
        if inc.gauss_newton:
            raise ValueError("B^T apply needs the full-Newton incremental adjoint")
        pb = self.problem
        n_aux = self.params.n_aux
        db, dbeta, dgamma_inv, dy = self._theta_partials()
        bu = pb.B_right @ self.u
        bp = pb.B_right @ self.p
        out = np.empty(self.params.n_theta)
        out[:n_aux] = inc.phat @ db - dbeta * (inc.phat @ bu) - dbeta * (inc.uhat @ bp)
        ouh = pb.O @ inc.uhat
        out[n_aux:] = ouh * (dgamma_inv * self.residual - self.gamma_inv * dy)
        return out

    def bt_apply_direction(self, mhat):
        return self.bt_apply(self.incremental(mhat))

    def b_apply(self, theta_dir):
        """``B theta_dir`` via two modified incremental solves."""
        pb = self.problem
        theta_dir = np.asarray(theta_dir, dtype=float)
        n_aux = self.params.n_aux
        ta, te = theta_dir[:n_aux], theta_dir[n_aux:]
        db, dbeta, dgamma_inv, dy = self._theta_partials()
        dbeta_t = dbeta @ ta
        du = self.solve(db @ ta - dbeta_t * (pb.B_right @ self.u))
        O = pb.O
        rhs = (O.T @ (self.gamma_inv * (O @ du))
               + O.T @ (te * (dgamma_inv * self.residual - self.gamma_inv * dy))
               - dbeta_t * (pb.B_right @ self.p))
        dp = self.solve(rhs)
        return -self._CT(self.p, du) - self._CT(self.u, dp)


def cost(problem, m, params, obs):
    """MAP cost at ``(m, theta)``; one PDE solve."""
    return OptimizationState(problem, m, obs, params).cost()


def gradient(state):
    return state.gradient()


def hessian_apply(state, mhat):
    return state.hessian_apply(mhat)


def bt_apply(state, inc):
    return state.bt_apply(inc)


def b_apply(state, theta_dir):
    return state.b_apply(theta_dir)
