r"""Hyper-differential sensitivities of the MAP point and of the Bayes risk.

For every sample ``i`` (a prior draw ``m_i`` and synthetic data ``y_i``) the
MAP point ``m*_i`` is computed at the nominal ``theta*``. Then

* MAP sensitivity: ``D^M_i = -H_i^{-1} B_i`` (implicit function theorem);
* Bayes risk: ``Psi = (1/n_s) sum_i |m*_i - m_i|_M^2`` and its gradient
  ``D^R = (2/n_s) sum_i B_i^T z_i`` with ``z_i = -H_i^{-1} M (m*_i - m_i)``.

Indices for a direction ``e`` are ``|D^M e|_M / |e|`` and ``|D^R e| / |e|``;
a subgroup's generalized index is the operator norm of the sensitivity
restricted to that subgroup. MAP indices are computed per sample and
averaged.

Samples run independently, optionally in worker processes. Per-sample seeds
come from ``SeedSequence(master_seed, spawn_key=(i,))``, so sample ``i`` is
the same whatever ``n_s`` is, and all reductions run in sample order.
"""
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .adjoint import OptimizationState
from .ledger import CostLedger, SolveCounter, expected_costs
from .lowrank import build_lowrank
from .newton import SolverConfig, pcg, solve_map

log = logging.getLogger(__name__)

QOIS = ("map", "risk")


# -- subgroups -------------------------------------------------------------


@dataclass(frozen=True)
class SubgroupScheme:
    """Partition of the ``theta`` coordinates into named subgroups.

    ``bases[k]`` holds the subgroup's basis directions as columns, in the
    subgroup's own coordinates (identity by default).
    """

    names: tuple
    members: tuple
    member_names: tuple
    bases: tuple = None

    def __post_init__(self):
        members = tuple(tuple(int(j) for j in g) for g in self.members)
        object.__setattr__(self, "members", members)
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "member_names", tuple(tuple(n) for n in self.member_names))
        if len(self.names) != len(members) or len(self.member_names) != len(members):
            raise ValueError("names, members and member_names must have one entry per subgroup")
        flat = sorted(j for g in members for j in g)
        if flat != list(range(len(flat))):
            raise ValueError("subgroups must partition 0..n_theta-1")
        if any(len(g) == 0 for g in members):
            raise ValueError("empty subgroup")
        if self.bases is None:
            bases = tuple(np.eye(len(g)) for g in members)
        else:
            bases = tuple(np.asarray(b, dtype=float) for b in self.bases)
            for b, g in zip(bases, members):
                if b.shape[0] != len(g) or np.any(np.linalg.norm(b, axis=0) == 0):
                    raise ValueError("basis vectors must be nonzero and live in their subgroup")
        object.__setattr__(self, "bases", bases)

    @property
    def K(self):
        return len(self.members)

    @property
    def n_theta(self):
        return sum(len(g) for g in self.members)

    def select(self, k, theta):
        """``T_k theta``: zero every component outside subgroup ``k``."""
        out = np.zeros_like(np.asarray(theta, dtype=float))
        idx = list(self.members[k])
        out[idx] = np.asarray(theta)[idx]
        return out


def default_scheme(params):
    """One singleton subgroup per auxiliary scalar plus one noise subgroup."""
    n_aux = params.n_aux
    names = list(params.aux_names) + ["sigma"]
    members = [(k,) for k in range(n_aux)] + [tuple(range(n_aux, params.n_theta))]
    theta_names = params.theta_names
    member_names = [(theta_names[k],) for k in range(n_aux)] + [tuple(theta_names[n_aux:])]
    return SubgroupScheme(tuple(names), tuple(members), tuple(member_names))


# -- index formulas ----------------------------------------------------------


def map_gram(columns, mass):
    """``W^T M W`` for sensitivity columns ``W`` (n_m x n)."""
    MW = mass @ columns
    G = columns.T @ MW
    return 0.5 * (G + G.T)


def _top_eig(G):
    if G.shape == (1, 1):
        return max(G[0, 0], 0.0)
    return max(np.linalg.eigvalsh(G)[-1], 0.0)


def map_indices(columns, mass, scheme):
    """Pointwise (per basis direction) and generalized (per subgroup) MAP indices.

    ``columns[:, j] = D^M e_j`` for the canonical ``e_j``. The generalized
    index is the top singular value of the ``M``-weighted subgroup block,
    from the small Gram matrix. For a singleton subgroup with the canonical
    basis it is the pointwise index bit for bit.
    """
    pointwise = np.zeros(scheme.n_theta)
    general = np.zeros(scheme.K)
    for k, (g, basis) in enumerate(zip(scheme.members, scheme.bases)):
        G = map_gram(columns[:, list(g)], mass)
        general[k] = np.sqrt(_top_eig(G))
        Gb = basis.T @ G @ basis
        norms = np.linalg.norm(basis, axis=0)
        pointwise[list(g)] = np.sqrt(np.maximum(np.diag(Gb), 0.0)) / norms
    return pointwise, general


def risk_indices(DR, scheme):
    """Pointwise ``|D^R b| / |b|`` and generalized ``|D^R restricted to k|``.

    The generalized index is the closed form of ``max |D^R theta|`` over unit
    ``theta`` supported on subgroup ``k``.
    """
    DR = np.asarray(DR, dtype=float)
    pointwise = np.zeros(scheme.n_theta)
    general = np.zeros(scheme.K)
    for k, (g, basis) in enumerate(zip(scheme.members, scheme.bases)):
        sl = DR[list(g)]
        general[k] = np.linalg.norm(sl)
        pointwise[list(g)] = np.abs(sl @ basis) / np.linalg.norm(basis, axis=0)
    return pointwise, general


# -- settings and per-sample pipeline -------------------------------------------


@dataclass(frozen=True)
class LowRankSettings:
    rank: int = 40
    threshold: float = 0.1
    gauss_newton: bool = False


@dataclass(frozen=True)
class PipelineSettings:
    """Everything a single sample needs besides the problem itself.

    ``inverse`` selects how ``H^{-1}`` is applied: ``"cg"`` (PCG on the full
    Hessian, prior-preconditioned, to ``inverse_rtol``) or ``"lowrank"``
    (SMW with the Lanczos approximation; falls back to CG for a sample whose
    misfit Hessian turns out indefinite).
    """

    solver: SolverConfig = field(default_factory=SolverConfig)
    inverse: str = "cg"
    inverse_rtol: float = 1e-12
    inverse_maxiter: int = 1000
    lowrank: Optional[LowRankSettings] = None
    truth: str = "prior_sample"
    noiseless: bool = False

    def __post_init__(self):
        if self.inverse not in ("cg", "lowrank"):
            raise ValueError(f"inverse must be 'cg' or 'lowrank', got {self.inverse!r}")
        if self.inverse == "lowrank" and self.lowrank is None:
            object.__setattr__(self, "lowrank", LowRankSettings())
        if self.truth not in ("prior_sample", "prior_mean"):
            raise ValueError(f"truth must be 'prior_sample' or 'prior_mean', got {self.truth!r}")


def sample_seeds(master_seed, index):
    """Independent seeds for the prior draw and the noise draw of sample ``index``."""
    ss = np.random.SeedSequence(int(master_seed), spawn_key=(int(index),))
    prior_ss, noise_ss = ss.spawn(2)
    return prior_ss, noise_ss


@dataclass
class SampleRecord:
    """Everything computed for one sample; picklable (no live solver state).

    ``risk_term`` is ``B^T z`` (so ``D^R`` is twice the sample mean of it).
    ``dm_dot_misfit[j] = <D^M e_j, M (m* - m)>`` is the same quantity by the
    contraction route, available when MAP sensitivities were computed.
    """

    index: int
    m_true: np.ndarray
    y: np.ndarray
    noise: np.ndarray
    m_star: np.ndarray
    converged: bool
    message: str
    stats: dict
    counts: dict
    expected: dict
    overhead: dict
    sq_error: float = float("nan")
    map_norm: float = float("nan")
    risk_term: Optional[np.ndarray] = None
    map_pointwise: Optional[np.ndarray] = None
    map_generalized: Optional[np.ndarray] = None
    dm_dot_misfit: Optional[np.ndarray] = None
    columns: Optional[np.ndarray] = None
    lowrank_rank: Optional[int] = None
    lowrank_indefinite: Optional[bool] = None
    error: str = ""


class HessianInverse:
    """``H^{-1}`` at one MAP point, by CG or low-rank SMW. Counts CG iterations."""

    def __init__(self, state, settings, lowrank=None):
        self.state = state
        self.settings = settings
        self.lowrank = lowrank if lowrank is not None and not lowrank.indefinite else None
        self.cg_iterations = 0

    def __call__(self, rhs):
        if self.lowrank is not None:
            return self.lowrank.inv_apply(rhs)
        prior = self.state.problem.prior
        res = pcg(self.state.hessian_apply, rhs, prior.covariance,
                  rtol=self.settings.inverse_rtol, maxiter=self.settings.inverse_maxiter)
        self.cg_iterations += res.iterations
        if not res.converged:
            raise np.linalg.LinAlgError(f"Hessian CG did not converge in {res.iterations} iterations")
        return res.x


STAGES = ("data", "map", "risk", "full")


def run_sample(problem, settings, master_seed, index, scheme=None, stage="full",
               keep_columns=False):
    """Run one sample of the pipeline: draw, synthesize, invert, differentiate.

    ``stage`` stops early: ``"data"`` after synthesis, ``"map"`` after the MAP
    solve, ``"risk"`` after the Bayes-risk term, ``"full"`` after the MAP
    sensitivities as well.
    """
    if stage not in STAGES:
        raise ValueError(f"stage must be one of {STAGES}, got {stage!r}")
    counter = SolveCounter()
    problem.counter = counter
    prior = problem.prior
    params = problem.params
    prior_ss, noise_ss = sample_seeds(master_seed, index)

    with counter.phase("data_generation"):
        if settings.truth == "prior_mean":
            m_true = prior.mean.copy()
        else:
            m_true = prior.sample(rng=np.random.default_rng(prior_ss))
        obs = problem.synthesize(m_true, rng=np.random.default_rng(noise_ss), noiseless=settings.noiseless)
    if stage == "data":
        rec = SampleRecord(int(index), m_true, obs.y, obs.noise, None, True, "data only",
                           {}, counter.snapshot(), {"data_generation": 1}, {})
        return rec

    with counter.phase("inverse_solves"):
        m_star, stats, state = solve_map(problem, obs, prior.mean, settings.solver)
        state.u, state.p  # noqa: B018 -- cached for everything below

    rec = SampleRecord(
        index=int(index), m_true=m_true, y=obs.y, noise=obs.noise, m_star=m_star,
        converged=stats.converged, message=stats.message,
        stats={k: getattr(stats, k) for k in ("newton_steps", "cg_iterations", "pde_solves",
                                               "rejected_trials", "rejected_gradient_trials", "grad_norm", "grad_norm0",
                                               "cost", "stagnated")},
        counts={}, expected={}, overhead={},
    )
    mass = problem.M
    diff = m_star - m_true
    rec.sq_error = float(diff @ (mass @ diff))
    rec.map_norm = float(np.sqrt(m_star @ (mass @ m_star)))
    if not stats.converged:
        rec.error = f"MAP solve: {stats.message}"
        return _finish(rec, counter, stats)
    if stage == "map":
        return _finish(rec, counter, stats)

    lr = None
    if settings.inverse == "lowrank":
        lrs = settings.lowrank
        with counter.phase("lowrank"):
            lr = build_lowrank(state, min(lrs.rank, problem.n_m), threshold=lrs.threshold,
                               gauss_newton=lrs.gauss_newton, seed=int(index))
        rec.lowrank_rank = lr.lanczos_steps
        rec.lowrank_indefinite = lr.indefinite
    inv = HessianInverse(state, settings, lr)

    try:
        with counter.phase("hessian_inverse"):
            z = -inv(mass @ diff)
        with counter.phase("risk_sensitivity"):
            rec.risk_term = state.bt_apply(state.incremental(z))

        if stage == "full":
            scheme = scheme or default_scheme(params)
            n_theta = params.n_theta
            cols = np.empty((problem.n_m, n_theta))
            for j in range(n_theta):
                e = np.zeros(n_theta)
                e[j] = 1.0
                with counter.phase("map_sensitivity"):
                    b = state.b_apply(e)
                with counter.phase("hessian_inverse"):
                    cols[:, j] = -inv(b)
            rec.map_pointwise, rec.map_generalized = map_indices(cols, mass, scheme)
            rec.dm_dot_misfit = cols.T @ (mass @ diff)
            if keep_columns:
                rec.columns = cols
    except np.linalg.LinAlgError as exc:
        rec.converged = False
        rec.error = f"Hessian solve: {exc}"
        log.warning("sample %d dropped: %s", index, exc)

    return _finish(rec, counter, stats, lr, inv.cg_iterations if lr is None or lr.indefinite else 0,
                   params.n_theta if stage == "full" else None)


def _finish(rec, counter, stats, lr=None, inverse_cg=None, n_theta=None):
    rec.counts = counter.snapshot()
    if rec.converged:
        rec.expected, rec.overhead = expected_costs(
            stats, r=lr.lanczos_steps if lr is not None else None,
            n_theta=n_theta, inverse_cg=inverse_cg)
    else:
        rec.expected, rec.overhead = {}, {}
    return rec


# -- reductions ----------------------------------------------------------------


def bayes_risk(samples):
    """``(1/n) sum |m*_i - m_i|_M^2`` over converged samples."""
    ok = [s for s in samples if s.converged]
    _warn_dropped(samples, ok)
    if not ok:
        raise ValueError("no converged samples")
    return float(np.sum([s.sq_error for s in ok]) / len(ok))


def assemble_DR(samples):
    """``D^R = (2/n) sum_i B_i^T z_i`` over converged samples, in sample order."""
    ok = [s for s in samples if s.converged]
    _warn_dropped(samples, ok)
    if not ok:
        raise ValueError("no converged samples")
    return 2.0 * np.sum([s.risk_term for s in ok], axis=0) / len(ok)


def assemble_DR_contraction(samples):
    """``D^R`` by the contraction route ``(2/n) sum_i (D^M_i)^T M (m*_i - m_i)``."""
    ok = [s for s in samples if s.converged]
    if any(s.dm_dot_misfit is None for s in ok):
        raise ValueError("MAP sensitivities were not computed for every sample")
    return 2.0 * np.sum([s.dm_dot_misfit for s in ok], axis=0) / len(ok)


def apply_DM(state, direction, inverse=None):
    """``D^M d = -H^{-1} (B d)`` at the MAP point held by ``state``."""
    direction = np.asarray(direction, dtype=float)
    if not np.any(direction):
        return np.zeros(len(state.m))
    if inverse is None:
        inverse = HessianInverse(state, PipelineSettings())
    return -inverse(state.b_apply(direction))


def _warn_dropped(samples, ok):
    if len(ok) < len(samples):
        log.warning("%d of %d samples excluded (not converged)", len(samples) - len(ok), len(samples))


@dataclass
class SensitivityReport:
    """Raw and normalized indices for both quantities of interest.

    ``risk_*`` indices come from ``D^R``; ``map_*`` indices are sample
    averages of per-sample indices. Normalized values divide by the Bayes
    risk and by the average MAP-point ``M``-norm, respectively.
    """

    scheme: SubgroupScheme
    theta_names: list
    n_s: int
    n_failed: int
    seed: int
    bayes_risk: float
    avg_map_norm: float
    DR: np.ndarray
    risk_pointwise: np.ndarray
    risk_generalized: np.ndarray
    map_pointwise: Optional[np.ndarray] = None
    map_generalized: Optional[np.ndarray] = None
    map_pointwise_samples: Optional[np.ndarray] = None
    map_generalized_samples: Optional[np.ndarray] = None
    normalized: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)

    def rows(self):
        """Report rows: one per (QoI, subgroup, member)."""
        out = []
        for qoi in QOIS:
            pw = getattr(self, f"{qoi}_pointwise")
            gen = getattr(self, f"{qoi}_generalized")
            if pw is None:
                continue
            npw = self.normalized.get(f"{qoi}_pointwise")
            ngen = self.normalized.get(f"{qoi}_generalized")
            for k, (name, g) in enumerate(zip(self.scheme.names, self.scheme.members)):
                for j, member in zip(g, self.scheme.member_names[k]):
                    out.append({
                        "qoi": qoi, "subgroup": name, "member": member,
                        "pointwise_raw": pw[j], "pointwise_norm": npw[j] if npw is not None else np.nan,
                        "generalized_raw": gen[k], "generalized_norm": ngen[k] if ngen is not None else np.nan,
                        "n_s": self.n_s, "seed": self.seed,
                    })
        return out


def normalize_report(report, map_normalizer=None, risk_normalizer=None):
    """Fill ``report.normalized``; raw values are kept.

    Normalizers default to the report's average MAP norm and Bayes risk.
    """
    map_normalizer = report.avg_map_norm if map_normalizer is None else map_normalizer
    risk_normalizer = report.bayes_risk if risk_normalizer is None else risk_normalizer
    if not risk_normalizer > 0:
        raise ZeroDivisionError("Bayes risk normalizer must be positive")
    norm = {
        "risk_pointwise": report.risk_pointwise / risk_normalizer,
        "risk_generalized": report.risk_generalized / risk_normalizer,
    }
    if report.map_pointwise is not None:
        if not map_normalizer > 0:
            raise ZeroDivisionError("MAP-norm normalizer must be positive")
        norm["map_pointwise"] = report.map_pointwise / map_normalizer
        norm["map_generalized"] = report.map_generalized / map_normalizer
    report.normalized = norm
    return report


def build_report(samples, scheme, theta_names, seed, normalize=True):
    """Reduce per-sample records (in the given order) to a :class:`SensitivityReport`."""
    ok = [s for s in samples if s.converged]
    warnings = [f"sample {s.index}: {s.error or s.message}" for s in samples if not s.converged]
    if not ok:
        raise RuntimeError("every sample failed: " + "; ".join(warnings))
    psi = bayes_risk(samples)
    DR = assemble_DR(samples)
    rpw, rgen = risk_indices(DR, scheme)
    report = SensitivityReport(
        scheme=scheme, theta_names=list(theta_names), n_s=len(ok), n_failed=len(samples) - len(ok),
        seed=int(seed), bayes_risk=psi,
        avg_map_norm=float(np.sum([s.map_norm for s in ok]) / len(ok)),
        DR=DR, risk_pointwise=rpw, risk_generalized=rgen, warnings=warnings,
    )
    if all(s.map_pointwise is not None for s in ok):
        report.map_pointwise_samples = np.array([s.map_pointwise for s in ok])
        report.map_generalized_samples = np.array([s.map_generalized for s in ok])
        report.map_pointwise = report.map_pointwise_samples.sum(axis=0) / len(ok)
        report.map_generalized = report.map_generalized_samples.sum(axis=0) / len(ok)
    if normalize and psi > 0:
        normalize_report(report)
    elif normalize:
        report.warnings.append("Bayes risk is zero; normalized indices not computed")
    return report


# -- orchestration ---------------------------------------------------------------

_WORKER = {}


def _worker_init(factory, settings, seed, stage, keep_columns):
    _WORKER.update(problem=factory(), settings=settings, seed=seed,
                   stage=stage, keep_columns=keep_columns)


def _worker_run(index):
    w = _WORKER
    return run_sample(w["problem"], w["settings"], w["seed"], index,
                      stage=w["stage"], keep_columns=w["keep_columns"])


def run_samples(factory, settings, seed, indices, workers=1, stage="full", keep_columns=False,
                problem=None):
    """Run :func:`run_sample` for ``indices``; results come back in index order.

    ``factory`` builds the problem (called once per worker process, so it
    must be picklable when ``workers > 1``). In-process runs reuse
    ``problem`` if given.
    """
    indices = list(indices)
    if workers <= 1 or len(indices) <= 1:
        problem = problem if problem is not None else factory()
        return [run_sample(problem, settings, seed, i, stage=stage,
                           keep_columns=keep_columns) for i in indices]
    with ProcessPoolExecutor(max_workers=workers, initializer=_worker_init,
                             initargs=(factory, settings, seed, stage, keep_columns)) as ex:
        return list(ex.map(_worker_run, indices, chunksize=max(1, len(indices) // (4 * workers))))


@dataclass
class PipelineResult:
    report: SensitivityReport
    samples: list
    ledger: CostLedger


def _ledger(samples):
    led = CostLedger()
    for s in samples:
        led.record(s.index, s.counts, s.expected, s.overhead)
    return led


def run_pipeline(factory, settings, n_samples, seed, workers=1, scheme=None,
                 stage="full", keep_columns=False):
    """Sampling, synthesis, MAP solves, ``D^R``, per-sample ``D^M`` indices, averaging.

    Returns a :class:`PipelineResult`; per-sample failures become report
    warnings, and only an all-failed run raises.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    problem = factory()
    if stage not in ("risk", "full"):
        raise ValueError("the pipeline needs stage 'risk' or 'full'")
    samples = run_samples(factory, settings, seed, range(n_samples), workers,
                          stage, keep_columns, problem=problem)
    scheme = scheme or default_scheme(problem.params)
    report = build_report(samples, scheme, problem.params.theta_names, seed)
    return PipelineResult(report, samples, _ledger(samples))


# -- sample-size spread ------------------------------------------------------------


@dataclass
class SpreadStudy:
    """Risk indices recomputed on random groups drawn from one sample pool.

    ``values[n]`` has shape ``(n_groups, K)`` (generalized, raw) and
    ``normalized[n]`` the same divided by each group's Bayes risk.
    """

    group_sizes: list
    n_groups: int
    pool_size: int
    values: dict
    normalized: dict

    def summary(self, normalized=False):
        src = self.normalized if normalized else self.values
        return {n: {"min": v.min(axis=0), "max": v.max(axis=0), "std": v.std(axis=0, ddof=1)}
                for n, v in src.items()}


def spread_study(samples, scheme, group_sizes=(20, 100, 500), n_groups=10, seed=0):
    """Generalized Bayes-risk indices on ``n_groups`` random groups per size.

    Groups of one size are drawn without replacement within a group; groups
    may overlap each other. Draws come from ``SeedSequence(seed,
    spawn_key=(size, g))``.
    """
    ok = [s for s in samples if s.converged]
    values, normalized = {}, {}
    for n in group_sizes:
        if n > len(ok):
            raise ValueError(f"group size {n} exceeds the {len(ok)} converged pool samples")
        vals = np.empty((n_groups, scheme.K))
        nvals = np.empty((n_groups, scheme.K))
        for g in range(n_groups):
            rng = np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(int(n), g)))
            pick = np.sort(rng.choice(len(ok), size=n, replace=False))
            group = [ok[i] for i in pick]
            _, gen = risk_indices(assemble_DR(group), scheme)
            vals[g] = gen
            nvals[g] = gen / bayes_risk(group)
        values[n], normalized[n] = vals, nvals
    return SpreadStudy(list(group_sizes), n_groups, len(ok), values, normalized)
