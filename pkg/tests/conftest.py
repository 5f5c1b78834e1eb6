import numpy as np
import pytest

from hdsa_lab.forward import HeatProblem
from hdsa_lab.mesh import build_mesh
from hdsa_lab.newton import SolverConfig, solve_map

ACCEPTANCE_LINES = []


@pytest.fixture
def report():
    """Record one acceptance line; it is echoed in the terminal summary."""
    def _report(number, passed, detail, label=None):
        status = label or ("PASS" if passed else "FAIL")
        line = f"acceptance {number:>2}: {status}  {detail}"
        print(line)
        ACCEPTANCE_LINES.append(line)
    return _report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split(":")[0].split()[-1])):
            terminalreporter.write_line(line)


def make_problem(n, **kw):
    return HeatProblem(build_mesh(n), **kw)


@pytest.fixture(scope="module")
def problem4():
    return make_problem(4)


@pytest.fixture(scope="module")
def problem8():
    return make_problem(8)


@pytest.fixture(scope="module")
def map4(problem4):
    """MAP point on the 4x4 mesh for data from a prior draw."""
    pb = problem4
    obs = pb.synthesize(pb.prior.sample(1), seed=2)
    m, stats, state = solve_map(pb, obs, pb.prior.mean, SolverConfig(grad_tol=1e-10))
    return pb, obs, m, stats, state


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
