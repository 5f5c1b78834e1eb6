"""One test per acceptance criterion, each printing a single pass/fail line.

Run ``pytest tests/test_acceptance.py -s`` to see the lines as they happen;
they are also collected in the terminal summary.
"""
import numpy as np
import pytest

from hdsa_lab.adjoint import OptimizationState
from hdsa_lab.config import ProblemFactory, config_from_dict
from hdsa_lab.forward import ObservationSet
from hdsa_lab.hdsa import (PipelineSettings, apply_DM, assemble_DR_contraction, default_scheme,
                           run_pipeline, run_samples, spread_study)
from hdsa_lab.lowrank import build_lowrank
from hdsa_lab.newton import SolverConfig, solve_map
from hdsa_lab.oracle1d import ScalarProblem, figure_data, map_sensitivity_1d, scalar_hdsa

from conftest import make_problem
from oracles import dense_hessian, extended_cost

TIGHT = SolverConfig(grad_tol=1e-10)


def m_norm(M, v):
    return float(np.sqrt(v @ (M @ v)))


def unit(n, j):
    e = np.zeros(n)
    e[j] = 1.0
    return e


@pytest.fixture(scope="module")
def run8():
    """Three samples on the 8x8 mesh with every sensitivity computed."""
    factory = ProblemFactory(config_from_dict({"mesh": {"cells_per_side": 8}}))
    return run_pipeline(factory, PipelineSettings(solver=TIGHT), 3, seed=7)


def test_01_gradient_fd(report):
    pb = make_problem(16)
    M = pb.M
    obs = pb.synthesize(pb.prior.sample(1), seed=2)
    rng = np.random.default_rng(0)
    hs = 10.0 ** -np.arange(1.0, 4.01, 0.5)
    worst_min, slopes = 0.0, []
    for _ in range(20):
        m = pb.prior.sample(rng=rng)
        params = pb.params.with_theta(rng.uniform(-1, 1, pb.params.n_theta))
        d = pb.prior.sample(rng=rng, add_mean=False)
        d /= m_norm(M, d)
        gd = OptimizationState(pb, m, obs, params).gradient() @ d
        errs = np.array([
            abs(float((extended_cost(pb, m + h * d, params, obs) - extended_cost(pb, m - h * d, params, obs))
                      / (2 * h)) - gd) / abs(gd)
            for h in hs])
        worst_min = max(worst_min, errs.min())
        slopes.append(np.polyfit(np.log10(hs), np.log10(errs), 1)[0])
    slopes = np.array(slopes)
    ok = worst_min <= 1e-5 and np.all(np.abs(slopes - 2) <= 0.1)
    report(1, ok, f"20 triples, 16x16: worst min rel err {worst_min:.1e} (<=1e-5), "
                  f"slopes over h in [1e-4,1e-1] {slopes.min():.3f}..{slopes.max():.3f} (2+-0.1)")
    assert ok


def test_02_symmetry_and_transpose(report, rng):
    pb = make_problem(8)
    obs = pb.synthesize(pb.prior.sample(1), seed=2)
    worst_h, worst_b = 0.0, 0.0
    for _ in range(10):
        m = pb.prior.sample(rng=rng)
        params = pb.params.with_theta(rng.uniform(-1, 1, pb.params.n_theta))
        st = OptimizationState(pb, m, obs, params)
        v, w = rng.standard_normal((2, pb.n_m))
        a, b = w @ st.hessian_apply(v), v @ st.hessian_apply(w)
        worst_h = max(worst_h, abs(a - b) / max(abs(a), abs(b)))
        th = rng.standard_normal(pb.params.n_theta)
        a, b = v @ st.b_apply(th), th @ st.bt_apply_direction(v)
        worst_b = max(worst_b, abs(a - b) / max(abs(a), abs(b)))
    ok = worst_h <= 1e-10 and worst_b <= 1e-10
    report(2, ok, f"10 pairs: Hessian symmetry {worst_h:.1e}, B/B^T pairing {worst_b:.1e} (<=1e-10)")
    assert ok


def test_03_map_sensitivity_fd(report):
    pb = make_problem(8)
    M = pb.M
    obs = pb.synthesize(pb.prior.sample(3), seed=4)
    m, stats, state = solve_map(pb, obs, pb.prior.mean, TIGHT)
    assert stats.converged

    def m_star(theta):
        out, s, _ = solve_map(pb, obs, m, TIGHT, params=pb.params.with_theta(theta))
        assert s.converged, s.message
        return out

    names = pb.params.theta_names
    errors = {}
    for name in ("beta", "gamma2", "f2", "z1", "f1", "sigma_3"):
        e = unit(pb.params.n_theta, names.index(name))
        dm = apply_DM(state, e)
        # central differences on a step sweep; truncation and solver error balance near 3e-3
        errors[name] = min(m_norm(M, (m_star(h * e) - m_star(-h * e)) / (2 * h) - dm) / m_norm(M, dm)
                           for h in (1e-2, 3e-3, 1e-3))
    worst = max(errors.values())
    ok = worst <= 1e-3
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errors.items())
    report(3, ok, f"8x8, MAP tol 1e-10, rel M-norm err <=1e-3: {detail}")
    assert ok


def test_04_risk_sensitivity_fd(report, run8):
    pb = make_problem(8)
    M = pb.M
    samples = run8.samples
    DR = run8.report.DR
    data = [(s.m_true, ObservationSet(pb.sensors, s.y, s.noise), s.m_star) for s in samples]

    def psi(theta):
        p = pb.params.with_theta(theta)
        total = 0.0
        for m_true, obs, m0 in data:
            m, s, _ = solve_map(pb, obs, m0, TIGHT, params=p)
            assert s.converged, s.message
            total += (m - m_true) @ (M @ (m - m_true))
        return total / len(data)

    names = pb.params.theta_names
    errors = {}
    for name in ("beta", "f2", "z1", "gamma2", "sigma_3"):
        j = names.index(name)
        e = unit(pb.params.n_theta, j)
        # fourth-order central stencil: the beta direction has a large third derivative,
        # and the two-point stencil would need steps where MAP-solve noise dominates
        errors[name] = min(abs((8 * (psi(h * e) - psi(-h * e)) - psi(2 * h * e) + psi(-2 * h * e)) / (12 * h)
                               - DR[j]) / abs(DR[j])
                           for h in (1e-2, 3e-3))
    worst = max(errors.values())
    ok = worst <= 1e-3
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errors.items())
    report(4, ok, f"n_s=3, 8x8, rel err <=1e-3: {detail}")
    assert ok


def test_05_dual_route(report, run8):
    DR = run8.report.DR
    DC = assemble_DR_contraction(run8.samples)
    vec = np.linalg.norm(DC - DR) / np.linalg.norm(DR)
    comp = np.max(np.abs(DC - DR) / np.abs(DR))
    ok = vec <= 1e-8
    report(5, ok, f"n_s=3: |D^R(B^T z) - D^R(contraction)| / |D^R| = {vec:.1e} (<=1e-8); "
                  f"largest per-component relative gap {comp:.1e}")
    assert ok


def test_06_lowrank_inverse(report):
    pb = make_problem(6)
    n = pb.n_m
    obs = pb.synthesize(pb.prior.sample(1), seed=5)
    m, stats, _ = solve_map(pb, obs, pb.prior.mean, TIGHT)
    H = dense_hessian(OptimizationState(pb, m, obs))
    H = 0.5 * (H + H.T)
    V = np.random.default_rng(0).standard_normal((n, 10))
    X = np.linalg.solve(H, V)
    ranks = [1, 2, 4, 8, 12, 16, 24, 32, 40, n]
    errs, counts_ok = [], True
    for r in ranks:
        c0 = pb.counter.total
        lr = build_lowrank(OptimizationState(pb, m, obs), r, threshold=None, clamp_negative=False)
        counts_ok &= pb.counter.total - c0 == 2 * r + 2
        Y = np.column_stack([lr.inv_apply(v) for v in V.T])
        errs.append(np.max(np.linalg.norm(Y - X, axis=0) / np.linalg.norm(X, axis=0)))
    errs = np.array(errs)
    monotone = bool(np.all(np.diff(errs) < 0))
    ok = errs[-1] <= 1e-8 and monotone and counts_ok
    report(6, ok, f"6x6, r=n_m={n}: rel err {errs[-1]:.1e} (<=1e-8), monotone in r: {monotone} "
                  f"({errs[0]:.1e} -> {errs[-1]:.1e}), fresh-state solves = 2r+2: {counts_ok}")
    assert ok


def test_07_index_structure(report, run8):
    rep = run8.report
    scheme = rep.scheme
    singleton = [k for k, g in enumerate(scheme.members) if len(g) == 1]
    gap_map = max(abs(rep.map_generalized[k] - rep.map_pointwise[scheme.members[k][0]])
                  / rep.map_generalized[k] for k in singleton)
    gap_risk = max(abs(rep.risk_generalized[k] - rep.risk_pointwise[scheme.members[k][0]])
                   / rep.risk_generalized[k] for k in singleton)
    k_sig = scheme.names.index("sigma")
    idx = list(scheme.members[k_sig])
    norm_gap = abs(rep.risk_generalized[k_sig] - np.linalg.norm(rep.DR[idx])) / rep.risk_generalized[k_sig]
    rng = np.random.default_rng(2024)
    best = 0.0
    for _ in range(10):
        U = rng.standard_normal((10_000, len(idx)))
        U /= np.linalg.norm(U, axis=1, keepdims=True)
        best = max(best, np.abs(U @ rep.DR[idx]).max())
    margin = rep.risk_generalized[k_sig] / best - 1.0
    ok = gap_map <= 1e-12 and gap_risk <= 1e-12 and norm_gap <= 1e-12 and margin >= -0.005
    report(7, ok, f"singleton gen=pointwise gap map {gap_map:.0e} risk {gap_risk:.0e} (<=1e-12); "
                  f"sigma-group = |D^R slice| gap {norm_gap:.0e}; exceeds 1e5-direction search by {100 * margin:+.1f}%")
    assert ok


def test_08_scalar_oracle(report):
    pb = ScalarProblem()
    worst = 0.0
    for seed in range(5):
        r = scalar_hdsa(pb, 10, seed)
        worst = max(worst, abs(r.risk_formula - r.risk_fd) / abs(r.risk_formula),
                    abs(r.map_formula - r.map_fd) / abs(r.map_formula))
    fig = figure_data(pb, seed=1)
    grid, nominal, perturbed = fig["densities"][:, 0], fig["densities"][:, 2], fig["densities"][:, 3]
    norm_err = max(abs(np.trapezoid(nominal, grid) - 1), abs(np.trapezoid(perturbed, grid) - 1))
    mom = fig["moments"]
    shift = mom["perturbed_peak"] - mom["nominal_peak"]
    spread_change = mom["perturbed"][1] - mom["nominal"][1]
    # the peak moves the way the MAP derivative predicts for dtheta = +0.01
    predicted = map_sensitivity_1d(pb, fig["y"]) * (-0.29 - pb.theta)
    cell = grid[1] - grid[0]
    sign_ok = np.sign(shift) == np.sign(predicted) and abs(shift) >= cell
    ok = worst <= 1e-6 and norm_err <= 1e-8 and sign_ok and spread_change != 0.0
    report(8, ok, f"formula vs FD {worst:.1e} (<=1e-6); normalization err {norm_err:.0e} (<=1e-8); "
                  f"theta -0.3 -> -0.29: peak shift {shift:+.4f} (predicted {predicted:+.4f}), "
                  f"std change {spread_change:+.2e}")
    assert ok


@pytest.mark.slow
def test_09_ranking_soft(report):
    factory = ProblemFactory(config_from_dict({}))
    res = run_pipeline(factory, PipelineSettings(solver=SolverConfig(grad_tol=1e-8)), 100, seed=2024)
    rep = res.report
    names = list(rep.scheme.names)
    aux = [k for k, n in enumerate(names) if n != "sigma"]
    top_aux = {q: names[max(aux, key=lambda k: getattr(rep, f"{q}_generalized")[k])] for q in ("map", "risk")}
    risk_top5 = [names[k] for k in np.argsort(rep.risk_generalized)[::-1][:5]]
    want = {"gamma2", "f2", "z1", "beta", "sigma"}
    ok = top_aux["map"] == "gamma2" and top_aux["risk"] == "gamma2" and set(risk_top5) == want
    status = "SOFT-PASS" if ok else "SOFT-FAIL (not gated)"
    report(9, ok, f"16x16, n_s={rep.n_s}: top auxiliary map={top_aux['map']}, risk={top_aux['risk']}; "
                  f"risk top five {risk_top5}", label=status)
    assert rep.n_s == 100


@pytest.mark.slow
def test_10_spread_study(report):
    factory = ProblemFactory(config_from_dict({"mesh": {"cells_per_side": 6}}))
    settings = PipelineSettings(solver=SolverConfig(grad_tol=1e-8))
    pool = run_samples(factory, settings, 99, range(600), stage="risk")
    scheme = default_scheme(factory().params)
    study = spread_study(pool, scheme, (20, 100, 500), n_groups=10, seed=3)
    std = np.array([study.summary()[n]["std"] for n in (20, 100, 500)])
    inversions = int(np.sum(np.diff(std, axis=0) > 0))
    ok = inversions <= 1
    ratio = np.median(std[0] / std[2])
    report(10, ok, f"600-pool, 6x6, 13 subgroups x 2 steps: {inversions} inversion(s) (<=1); "
                   f"median std ratio n=20 vs n=500: {ratio:.1f}")
    assert ok


def test_11_cost_ledger(report, run8):
    led = run8.ledger
    bad = led.check()
    rows = []
    for s in led.samples:
        c, e, o = s["counts"], s["expected"], s["overhead"]
        rows.append(c["data_generation"] == 1 and c["risk_sensitivity"] == 2
                    and c["map_sensitivity"] == 2 * 37
                    and c["inverse_solves"] == e["inverse_solves"] + o["inverse_solves"])
    ok = not bad and all(rows)
    s0 = led.samples[0]
    report(11, ok, f"{len(led.samples)} samples: mismatches {bad}; sample 0 inverse solves "
                   f"{s0['counts']['inverse_solves']} = 2L+2sum(I) {s0['expected']['inverse_solves']} "
                   f"+ overhead {s0['overhead']['inverse_solves']}")
    assert ok
