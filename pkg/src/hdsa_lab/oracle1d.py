r"""A one-dimensional miniature with a closed-form forward map.

The observable is the solution of a 1D heat equation on ``(0, pi)`` at time
``t``, sampled at a handful of sensors:

.. math::

    F(m, \theta; x) = e^{-e^m t} \sin x + e^{-c\,\theta e^m t} \sin 2x

with ``c = 4`` by default (``c = 0`` removes the dependence on ``theta``).
The alternative ``e^{\theta} e^{-4 e^m t} \sin 2x`` second term, which
matches an initial condition ``sin x + e^theta sin 2x``, is available with
``consistent=True``.

Everything here is scalar, so the MAP point, its derivative in ``theta``
and the Bayes-risk gradient all have closed forms that can be checked
against brute-force finite differences.
"""
from dataclasses import dataclass, field, replace

import numpy as np


@dataclass(frozen=True)
class ScalarProblem:
    """Prior ``N(prior_mean, prior_var)`` on ``m``, Gaussian noise, fixed sensors."""

    prior_mean: float = 1.3
    prior_var: float = 0.1
    theta: float = -0.3
    noise_std: float = 26.0
    sensors: tuple = field(default_factory=lambda: tuple(k * np.pi / 7 for k in range(1, 7)))
    t: float = 1.0
    mode2_rate: float = 4.0
    consistent: bool = False

    def __post_init__(self):
        if not self.noise_std > 0:
            raise ValueError("noise_std must be positive")
        if not self.prior_var > 0:
            raise ValueError("prior_var must be positive")
        s = np.asarray(self.sensors, dtype=float)
        if s.ndim != 1 or s.size == 0 or np.any(s <= 0) or np.any(s >= np.pi):
            raise ValueError("sensors must lie strictly inside (0, pi)")
        object.__setattr__(self, "sensors", tuple(float(v) for v in s))

    @property
    def x(self):
        return np.asarray(self.sensors)

    def with_theta(self, theta):
        return replace(self, theta=float(theta))


def forward_1d(m, theta, x, t=1.0, mode2_rate=4.0, consistent=False):
    """Closed-form state at abscissa ``x`` (scalar or array)."""
    x = np.asarray(x, dtype=float)
    em = np.exp(m)
    first = np.exp(-em * t) * np.sin(x)
    if consistent:
        second = np.exp(theta) * np.exp(-4.0 * em * t) * np.sin(2 * x)
    else:
        second = np.exp(-mode2_rate * theta * em * t) * np.sin(2 * x)
    return first + second


def _derivatives(pb, m, theta):
    """``F, F_m, F_mm, F_theta, F_mtheta`` at the sensors."""
    x, t = pb.x, pb.t
    em = np.exp(m)
    s1, s2 = np.sin(x), np.sin(2 * x)
    a = np.exp(-em * t)
    F1, F1m, F1mm = a * s1, -em * t * a * s1, (em * t) * (em * t - 1.0) * a * s1
    if pb.consistent:
        b = np.exp(theta) * np.exp(-4.0 * em * t) * s2
        k = 4.0 * em * t
        F2, F2m, F2mm = b, -k * b, k * (k - 1.0) * b
        F2t, F2mt = b, -k * b
    else:
        c = pb.mode2_rate
        k = c * theta * em * t
        b = np.exp(-k) * s2
        F2, F2m, F2mm = b, -k * b, k * (k - 1.0) * b
        # d/dtheta of k is c e^m t = k / theta, written without the division
        kt = c * em * t
        F2t = -kt * b
        F2mt = -kt * b + k * kt * b
    return F1 + F2, F1m + F2m, F1mm + F2mm, F2t, F2mt


def cost_1d(pb, y, m, theta=None):
    """Negative log-posterior (up to a constant)."""
    theta = pb.theta if theta is None else theta
    r = forward_1d(m, theta, pb.x, pb.t, pb.mode2_rate, pb.consistent) - np.asarray(y)
    return 0.5 * np.sum(r**2) / pb.noise_std**2 + 0.5 * (m - pb.prior_mean) ** 2 / pb.prior_var


def cost_derivatives(pb, y, m, theta=None):
    """``(J_m, J_mm, J_mtheta)`` at ``(m, theta)``."""
    theta = pb.theta if theta is None else theta
    F, Fm, Fmm, Ft, Fmt = _derivatives(pb, m, theta)
    r = F - np.asarray(y)
    s2 = pb.noise_std**2
    Jm = np.sum(r * Fm) / s2 + (m - pb.prior_mean) / pb.prior_var
    Jmm = np.sum(Fm * Fm + r * Fmm) / s2 + 1.0 / pb.prior_var
    Jmt = np.sum(Ft * Fm + r * Fmt) / s2
    return Jm, Jmm, Jmt


def map_1d(pb, y, theta=None, tol=1e-12, max_iter=100):
    """Scalar MAP point by safeguarded Newton on ``J'``.

    Newton steps that leave the current sign-change bracket, meet
    nonpositive curvature or fail to halve the previous step are replaced by
    bisection. The initial bracket is
    the prior mean plus or minus ten prior standard deviations.
    """
    theta = pb.theta if theta is None else theta
    sd = np.sqrt(pb.prior_var)
    lo, hi = pb.prior_mean - 10 * sd, pb.prior_mean + 10 * sd
    g_lo = cost_derivatives(pb, y, lo, theta)[0]
    g_hi = cost_derivatives(pb, y, hi, theta)[0]
    if not (g_lo < 0 < g_hi):
        raise RuntimeError("MAP point is not bracketed by the search interval")
    m = pb.prior_mean
    dx_old = hi - lo
    for _ in range(max_iter):
        g, h, _ = cost_derivatives(pb, y, m, theta)
        if abs(g) <= tol:
            return float(m)
        if g < 0:
            lo = m
        else:
            hi = m
        step = m - g / h if h > 0 else np.nan
        # Newton only while it stays in the bracket and at least halves the step
        if lo < step < hi and abs(step - m) <= 0.5 * dx_old:
            dx_old, m = abs(step - m), step
        else:
            dx_old, m = 0.5 * (hi - lo), 0.5 * (lo + hi)
        if hi - lo <= 4 * np.finfo(float).eps * max(1.0, abs(m)):
            return float(m)
    raise RuntimeError(f"scalar MAP did not converge (|J'| = {abs(g):.3e})")


def prior_pdf(pb, grid):
    grid = np.asarray(grid, dtype=float)
    return np.exp(-0.5 * (grid - pb.prior_mean) ** 2 / pb.prior_var) / np.sqrt(2 * np.pi * pb.prior_var)


def posterior_pdf(pb, y, grid, theta=None):
    """Posterior density on ``grid``, normalized with the trapezoid rule."""
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid.size < 3 or np.any(np.diff(grid) <= 0):
        raise ValueError("grid must be a strictly increasing 1D array of at least 3 points")
    if grid[-1] - grid[0] < 6 * np.sqrt(pb.prior_var):
        raise ValueError("grid must span at least 6 prior standard deviations")
    logp = -np.array([cost_1d(pb, y, m, theta) for m in grid])
    p = np.exp(logp - logp.max())
    return p / np.trapezoid(p, grid)


def pdf_moments(grid, pdf):
    """Mean and standard deviation of a gridded density."""
    mean = np.trapezoid(grid * pdf, grid)
    var = np.trapezoid((grid - mean) ** 2 * pdf, grid)
    return float(mean), float(np.sqrt(var))


def synthesize_1d(pb, m_true, rng, noiseless=False):
    clean = forward_1d(m_true, pb.theta, pb.x, pb.t, pb.mode2_rate, pb.consistent)
    if noiseless:
        return clean
    return clean + pb.noise_std * rng.standard_normal(len(clean))


def map_sensitivity_1d(pb, y, m_star=None):
    """``d m* / d theta = -J_mtheta / J_mm`` at the MAP point."""
    m_star = map_1d(pb, y) if m_star is None else m_star
    _, Jmm, Jmt = cost_derivatives(pb, y, m_star)
    return -Jmt / Jmm


@dataclass
class ScalarHDSA:
    """Scalar sensitivities by the closed-form route and by finite differences."""

    bayes_risk: float
    risk_formula: float
    risk_fd: float
    map_formula: float
    map_fd: float
    m_true: np.ndarray
    m_star: np.ndarray


def scalar_hdsa(pb, n_s, seed, h=1e-3, noiseless=False):
    """Bayes risk, its ``theta``-derivative and the averaged MAP sensitivity.

    Closed-form route: ``D^R = (2/n) sum (m*_i - m_i) dm*_i/dtheta`` and
    ``mean |dm*_i/dtheta|``. FD route: fourth-order central differences
    (five-point stencil, step ``h``) of the re-solved MAP points with the
    same samples and data.
    """
    if n_s < 1:
        raise ValueError("n_s must be at least 1")
    rng = np.random.default_rng(np.random.SeedSequence(int(seed)))
    m_true = pb.prior_mean + np.sqrt(pb.prior_var) * rng.standard_normal(n_s)
    ys = [synthesize_1d(pb, m, rng, noiseless) for m in m_true]
    m_star = np.array([map_1d(pb, y) for y in ys])
    dm = np.array([map_sensitivity_1d(pb, y, ms) for y, ms in zip(ys, m_star)])
    err = m_star - m_true
    risk = float(np.mean(err**2))
    risk_formula = float(2.0 * np.mean(err * dm))

    weights = {-2: 1.0, -1: -8.0, 1: 8.0, 2: -1.0}
    shifted = {k: np.array([map_1d(pb, y, pb.theta + k * h) for y in ys]) for k in weights}
    dm_fd = sum(w * shifted[k] for k, w in weights.items()) / (12 * h)
    risk_fd = float(sum(w * np.mean((shifted[k] - m_true) ** 2) for k, w in weights.items()) / (12 * h))
    return ScalarHDSA(risk, risk_formula, risk_fd, float(np.mean(np.abs(dm))),
                      float(np.mean(np.abs(dm_fd))), m_true, m_star)


def figure_data(pb, seed, m_true=None, perturbed_theta=-0.29, n_curve=201, n_grid=2001):
    """Curves for the illustrative figure: state with noisy data, and three densities.

    Returns a dict with ``curve`` (x, state), ``data`` (sensor x, y) and
    ``densities`` (m, prior, posterior at nominal theta, posterior at
    ``perturbed_theta``), plus the summary moments.
    """
    rng = np.random.default_rng(np.random.SeedSequence(int(seed)))
    m_true = pb.prior_mean if m_true is None else m_true
    y = synthesize_1d(pb, m_true, rng)
    xs = np.linspace(0.0, np.pi, n_curve)
    state = forward_1d(m_true, pb.theta, xs, pb.t, pb.mode2_rate, pb.consistent)
    sd = np.sqrt(pb.prior_var)
    grid = np.linspace(pb.prior_mean - 6 * sd, pb.prior_mean + 6 * sd, n_grid)
    nominal = posterior_pdf(pb, y, grid)
    perturbed = posterior_pdf(pb, y, grid, perturbed_theta)
    return {
        "curve": np.column_stack([xs, state]),
        "data": np.column_stack([pb.x, y]),
        "densities": np.column_stack([grid, prior_pdf(pb, grid), nominal, perturbed]),
        "moments": {
            "nominal": pdf_moments(grid, nominal),
            "perturbed": pdf_moments(grid, perturbed),
            "nominal_peak": float(grid[np.argmax(nominal)]),
            "perturbed_peak": float(grid[np.argmax(perturbed)]),
        },
        "y": y,
    }
