"""Steady heat conduction forward model and the complementary-parameter model.

State equation (weak form, P1)::

    [K(exp m) + beta * B_right] u = M f + B_left s + beta * T_amb * B_right 1

Every uncertain scalar ``rho`` is realized as ``rho_nominal * (1 + a * theta)``.
The experimental parameters are the per-sensor noise standard deviations;
their perturbation also rescales the stored noise realization, so
``y(theta_e) = F + eta * (1 + a * theta_e)``.
"""
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse.linalg as spla

from .ledger import SolveCounter
from .mesh import LEFT, RIGHT, assemble_boundary_mass, interpolation_matrix
from .prior import PriorOperators

AUX_NAMES = ("beta", "s1", "s2", "s3", "f1", "f2", "w1", "w2", "z1", "z2", "gamma1", "gamma2")

AUX_NOMINAL = {
    "beta": 1.0,
    "s1": 30.0,
    "s2": 0.1,
    "s3": 0.65,
    "f1": 100.0,
    "f2": 105.0,
    "w1": 0.8,
    "w2": 0.25,
    "z1": 0.5,
    "z2": 0.8,
    "gamma1": -np.pi / 4,
    "gamma2": 0.15,
}


def default_sensors():
    """Evenly spaced interior 5x5 grid at ``(i/6, j/6)``, ``i, j = 1..5``."""
    g = np.arange(1, 6) / 6.0
    gx, gy = np.meshgrid(g, g)
    return np.column_stack([gx.ravel(), gy.ravel()])


@dataclass(frozen=True)
class ComplementaryParams:
    """Nominal values, uncertainty scales and the perturbation coordinates.

    ``theta`` stacks the auxiliary coordinates (in ``aux_names`` order) and
    then one coordinate per sensor noise level.
    """

    aux_names: tuple = AUX_NAMES
    aux_nominal: np.ndarray = field(default_factory=lambda: np.array([AUX_NOMINAL[k] for k in AUX_NAMES]))
    aux_scale: np.ndarray = field(default_factory=lambda: np.full(len(AUX_NAMES), 0.05))
    sigma_nominal: np.ndarray = field(default_factory=lambda: np.full(25, 0.1))
    sigma_scale: np.ndarray = field(default_factory=lambda: np.ones(25))
    theta: np.ndarray = None

    def __post_init__(self):
        conv = lambda v: np.atleast_1d(np.asarray(v, dtype=float))
        object.__setattr__(self, "aux_names", tuple(self.aux_names))
        object.__setattr__(self, "aux_nominal", conv(self.aux_nominal))
        object.__setattr__(self, "aux_scale", np.broadcast_to(conv(self.aux_scale), (len(self.aux_names),)).copy())
        object.__setattr__(self, "sigma_nominal", conv(self.sigma_nominal))
        n_y = len(self.sigma_nominal)
        object.__setattr__(self, "sigma_scale", np.broadcast_to(conv(self.sigma_scale), (n_y,)).copy())
        if len(self.aux_nominal) != len(self.aux_names):
            raise ValueError("aux_nominal and aux_names differ in length")
        if self.theta is None:
            object.__setattr__(self, "theta", np.zeros(self.n_theta))
        else:
            theta = conv(self.theta)
            if theta.shape != (self.n_theta,):
                raise ValueError(f"theta must have length {self.n_theta}")
            object.__setattr__(self, "theta", theta)
        if np.any(self.sigma_nominal < 0):
            raise ValueError("noise standard deviations must be nonnegative")

    @classmethod
    def nominal(cls, n_y=25, noise_std=0.1, aux_scale=0.05, experimental_scale=1.0, overrides=None):
        values = dict(AUX_NOMINAL)
        values.update(overrides or {})
        return cls(
            aux_names=AUX_NAMES,
            aux_nominal=np.array([values[k] for k in AUX_NAMES]),
            aux_scale=aux_scale,
            sigma_nominal=np.broadcast_to(np.asarray(noise_std, dtype=float), (n_y,)).copy(),
            sigma_scale=experimental_scale,
        )

    @property
    def n_aux(self):
        return len(self.aux_names)

    @property
    def n_y(self):
        return len(self.sigma_nominal)

    @property
    def n_theta(self):
        return self.n_aux + self.n_y

    @property
    def theta_names(self):
        return list(self.aux_names) + [f"sigma_{j + 1}" for j in range(self.n_y)]

    def with_theta(self, theta):
        return replace(self, theta=np.array(theta, dtype=float))

    def aux_value(self, name):
        k = self.aux_names.index(name)
        return self.aux_nominal[k] * (1.0 + self.aux_scale[k] * self.theta[k])

    def aux_values(self):
        vals = self.aux_nominal * (1.0 + self.aux_scale * self.theta[: self.n_aux])
        return dict(zip(self.aux_names, vals))

    def aux_rate(self, name):
        """``d rho / d theta`` for an auxiliary scalar."""
        k = self.aux_names.index(name)
        return self.aux_nominal[k] * self.aux_scale[k]

    @property
    def theta_e(self):
        return self.theta[self.n_aux:]

    def noise_factor(self):
        return 1.0 + self.sigma_scale * self.theta_e

    def sigma(self):
        return self.sigma_nominal * self.noise_factor()


def _bump_matrix(gamma, sx1, sx2):
    c, s = np.cos(gamma), np.sin(gamma)
    s2 = np.sin(2 * gamma)
    off = s2 / (2 * sx2**2) - s2 / (2 * sx1**2)
    return np.array([[c**2 / sx1**2 + s**2 / sx2**2, off],
                     [off, s**2 / sx1**2 + c**2 / sx2**2]])


def _bump_matrix_dgamma(gamma, sx1, sx2):
    s2, c2 = np.sin(2 * gamma), np.cos(2 * gamma)
    diag = s2 / sx2**2 - s2 / sx1**2
    off = c2 * (1 / sx2**2 - 1 / sx1**2)
    return np.array([[diag, off], [off, -diag]])


def _bump(points, amp, center, gamma, sx1, sx2):
    d = points - center
    C = _bump_matrix(gamma, sx1, sx2)
    e = np.exp(-0.5 * np.einsum("ni,ij,nj->n", d, C, d))
    return amp * e, d, C, e


def volume_source(params, points, sigma_x=(0.8, 0.1)):
    """Two rotated anisotropic Gaussian bars evaluated at ``points``."""
    v = params.aux_values()
    sx1, sx2 = sigma_x
    f1, *_ = _bump(points, v["f1"], np.array([v["w1"], v["w2"]]), v["gamma1"], sx1, sx2)
    f2, *_ = _bump(points, v["f2"], np.array([v["z1"], v["z2"]]), v["gamma2"], sx1, sx2)
    return f1 + f2


def volume_source_derivatives(params, points, sigma_x=(0.8, 0.1)):
    """``{name: d f / d rho}`` for the eight source parameters (not yet chained to theta)."""
    v = params.aux_values()
    sx1, sx2 = sigma_x
    out = {}
    for amp, cx, cy, gam, tag in (("f1", "w1", "w2", "gamma1", 1), ("f2", "z1", "z2", "gamma2", 2)):
        val, d, C, e = _bump(points, v[amp], np.array([v[cx], v[cy]]), v[gam], sx1, sx2)
        Cd = d @ C
        out[amp] = e
        out[cx] = val * Cd[:, 0]
        out[cy] = val * Cd[:, 1]
        dC = _bump_matrix_dgamma(v[gam], sx1, sx2)
        out[gam] = val * (-0.5 * np.einsum("ni,ij,nj->n", d, dC, d))
    return out


def boundary_source(params, x2):
    """``s1 * exp(-((x2 - s3) / s2)^2)``."""
    v = params.aux_values()
    if v["s2"] <= 0:
        raise ValueError("boundary source spread s2 must be positive")
    return v["s1"] * np.exp(-(((x2 - v["s3"]) / v["s2"]) ** 2))


def boundary_source_derivatives(params, x2):
    v = params.aux_values()
    t = (x2 - v["s3"]) / v["s2"]
    e = np.exp(-(t**2))
    return {
        "s1": e,
        "s2": v["s1"] * e * 2 * t**2 / v["s2"],
        "s3": v["s1"] * e * 2 * t / v["s2"],
    }


@dataclass(frozen=True)
class ObservationSet:
    """Sensor locations, data at nominal theta, and the stored noise draw."""

    sensors: np.ndarray
    y: np.ndarray
    noise: np.ndarray

    @property
    def n_y(self):
        return len(self.y)

    def data(self, params):
        """``y(theta_e) = y + eta * a * theta_e``; bit-exact at ``theta_e = 0``."""
        te = params.theta_e
        if not np.any(te):
            return self.y
        return self.y + self.noise * params.sigma_scale * te


class HeatProblem:
    """The discretized model problem: mesh, prior, sensors and nominal parameters.

    Holds only immutable operators plus a :class:`SolveCounter`; pipelines
    running in separate processes each build their own instance.
    """

    def __init__(self, mesh, prior=None, params=None, sensors=None, t_amb=22.0,
                 sigma_x=(0.8, 0.1), counter=None, refine_steps=0):
        self.mesh = mesh
        self.prior = prior if prior is not None else PriorOperators(mesh)
        self.sensors = default_sensors() if sensors is None else np.asarray(sensors, dtype=float)
        self.params = params if params is not None else ComplementaryParams.nominal(n_y=len(self.sensors))
        if self.params.n_y != len(self.sensors):
            raise ValueError("number of noise levels must equal the number of sensors")
        self.t_amb = float(t_amb)
        self.sigma_x = tuple(sigma_x)
        self.counter = counter if counter is not None else SolveCounter()
        # extended-precision iterative refinement sweeps per state-operator solve
        self.refine_steps = int(refine_steps)

        self.M = self.prior.M
        self.B_right = assemble_boundary_mass(mesh, RIGHT).tocsc()
        self.B_left = assemble_boundary_mass(mesh, LEFT).tocsc()
        self.O = interpolation_matrix(mesh, self.sensors)
        self._ones = np.ones(mesh.n_m)

    @property
    def n_m(self):
        return self.mesh.n_m

    # -- assembly ----------------------------------------------------------

    def state_operator(self, m, params=None):
        from .mesh import assemble_weighted_stiffness

        params = params or self.params
        beta = params.aux_value("beta")
        if beta <= 0:
            raise ValueError("heat transfer coefficient beta must be positive")
        return (assemble_weighted_stiffness(self.mesh, m) + beta * self.B_right).tocsc()

    def source(self, params=None):
        return volume_source(params or self.params, self.mesh.nodes, self.sigma_x)

    def rhs(self, params=None):
        params = params or self.params
        f = volume_source(params, self.mesh.nodes, self.sigma_x)
        s = boundary_source(params, self.mesh.nodes[:, 1])
        beta = params.aux_value("beta")
        return self.M @ f + self.B_left @ s + beta * self.t_amb * (self.B_right @ self._ones)

    def rhs_derivatives(self, params=None):
        """``d b / d theta_j`` for every auxiliary coordinate, as an ``(n_m, n_aux)`` array.

        Coordinates the model does not depend on get zero columns.
        """
        params = params or self.params
        dF = volume_source_derivatives(params, self.mesh.nodes, self.sigma_x)
        dS = boundary_source_derivatives(params, self.mesh.nodes[:, 1])
        out = np.zeros((self.n_m, params.n_aux))
        for k, name in enumerate(params.aux_names):
            if name in dF:
                col = self.M @ dF[name]
            elif name in dS:
                col = self.B_left @ dS[name]
            elif name == "beta":
                col = self.t_amb * (self.B_right @ self._ones)
            else:
                continue
            out[:, k] = params.aux_rate(name) * col
        return out

    def beta_rates(self, params=None):
        """``d beta / d theta`` per auxiliary coordinate (nonzero only for beta)."""
        params = params or self.params
        return np.array([params.aux_rate(n) if n == "beta" else 0.0 for n in params.aux_names])

    # -- solves ------------------------------------------------------------

    def factorize(self, m, params=None):
        return spla.splu(self.state_operator(m, params))

    def solve_state(self, m, params=None, lu=None):
        """Forward solve; counts one PDE solve."""
        params = params or self.params
        lu = lu if lu is not None else self.factorize(m, params)
        self.counter.add()
        return lu.solve(self.rhs(params))

    def observe(self, u):
        return self.O @ u

    def forward(self, m, params=None):
        return self.observe(self.solve_state(m, params))

    def synthesize(self, m_true, seed=None, rng=None, noiseless=False):
        """Data ``F(m_true, theta_a*) + eta`` with ``eta ~ N(0, sigma_nominal^2)``.

        Always generated at the nominal parameters. Counts one PDE solve.
        """
        clean = self.forward(m_true, self.params)
        if noiseless:
            eta = np.zeros_like(clean)
        else:
            if rng is None:
                rng = np.random.default_rng(seed)
            eta = self.params.sigma_nominal * rng.standard_normal(len(clean))
        return ObservationSet(self.sensors.copy(), clean + eta, eta)


def eval_volume_source(params, mesh, sigma_x=(0.8, 0.1)):
    return volume_source(params, mesh.nodes, sigma_x)


def eval_boundary_source(params, mesh):
    """Boundary source at the nodes of the left side (zero elsewhere)."""
    out = np.zeros(mesh.n_m)
    idx = mesh.side_nodes(LEFT)
    out[idx] = boundary_source(params, mesh.nodes[idx, 1])
    return out
