import json
import os
import subprocess
import sys

import numpy as np
import pytest

from hdsa_lab import kernels
from hdsa_lab._jit import HAVE_NUMBA
from hdsa_lab.adjoint import OptimizationState
from hdsa_lab.forward import HeatProblem
from hdsa_lab.mesh import assemble_weighted_stiffness, build_mesh

needs_numba = pytest.mark.skipif(not HAVE_NUMBA, reason="numba not installed")


@pytest.fixture(scope="module")
def mesh():
    return build_mesh(9)


@pytest.fixture
def data(mesh, rng):
    n = mesh.n_m
    return {
        "coef": rng.random(mesh.n_e), "u": rng.standard_normal(n), "p": rng.standard_normal(n),
        "vals": rng.standard_normal(mesh.n_e), "pts": rng.random((50, 2)),
    }


@needs_numba
class TestParity:
    def test_stiffness_action(self, mesh, data):
        args = (mesh.triangles, mesh.local_stiffness, data["coef"], data["u"], mesh.n_m)
        a, b = kernels.stiffness_action_numpy(*args), kernels.stiffness_action_numba(*args)
        assert np.allclose(a, b, rtol=1e-13, atol=1e-13)

    def test_stiffness_pairing(self, mesh, data):
        args = (mesh.triangles, mesh.local_stiffness, data["p"], data["u"])
        a, b = kernels.stiffness_pairing_numpy(*args), kernels.stiffness_pairing_numba(*args)
        assert np.allclose(a, b, rtol=1e-13, atol=1e-13)

    def test_scatter(self, mesh, data):
        a = kernels.scatter_to_nodes_numpy(mesh.triangles, data["vals"], mesh.n_m)
        b = kernels.scatter_to_nodes_numba(mesh.triangles, data["vals"], mesh.n_m)
        assert np.allclose(a, b, rtol=1e-14, atol=1e-14)

    def test_locate(self, mesh, data):
        pts = np.vstack([data["pts"], [[1.5, 0.2], [0.5, 0.5], [0.0, 0.0]]])
        ia, wa = kernels.locate_points_numpy(pts, mesh.nodes, mesh.triangles)
        ib, wb = kernels.locate_points_numba(pts, mesh.nodes, mesh.triangles)
        assert np.array_equal(ia, ib)
        assert np.allclose(wa, wb, atol=1e-15)
        assert ia[-3] == -1


class TestSemantics:
    def test_action_is_weighted_stiffness(self, mesh, data):
        m = np.random.default_rng(0).standard_normal(mesh.n_m)
        kappa = np.exp(m[mesh.triangles].mean(axis=1))
        ref = assemble_weighted_stiffness(mesh, m) @ data["u"]
        out = kernels.stiffness_action(mesh.triangles, mesh.local_stiffness, kappa, data["u"], mesh.n_m)
        assert np.allclose(out, ref, rtol=1e-12, atol=1e-12)

    def test_pairing_sums_to_quadratic_form(self, mesh, data):
        K = assemble_weighted_stiffness(mesh, np.zeros(mesh.n_m))
        pair = kernels.stiffness_pairing(mesh.triangles, mesh.local_stiffness, data["p"], data["u"])
        assert pair.sum() == pytest.approx(data["p"] @ K @ data["u"], rel=1e-12)

    def test_scatter_total(self, mesh, data):
        out = kernels.scatter_to_nodes(mesh.triangles, data["vals"], mesh.n_m)
        assert out.sum() == pytest.approx(3 * data["vals"].sum(), rel=1e-12)


def test_numpy_fallback_end_to_end():
    # a fresh interpreter with the flag set must give the same Hessian apply
    code = (
        "import json\nimport numpy as np\n"
        "from hdsa_lab import _jit\n"
        "from hdsa_lab.adjoint import OptimizationState\n"
        "from hdsa_lab.forward import HeatProblem\n"
        "from hdsa_lab.mesh import build_mesh\n"
        "pb = HeatProblem(build_mesh(6))\n"
        "obs = pb.synthesize(pb.prior.sample(1), seed=2)\n"
        "st = OptimizationState(pb, pb.prior.sample(3), obs)\n"
        "v = np.random.default_rng(0).standard_normal(pb.n_m)\n"
        "print(_jit.USE_NUMBA)\n"
        "print(json.dumps(st.hessian_apply(v).tolist()))\n"
    )
    env = dict(os.environ, HDSA_DISABLE_NUMBA="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    flag, values = out.stdout.strip().split("\n")
    assert flag == "False"
    pb = HeatProblem(build_mesh(6))
    obs = pb.synthesize(pb.prior.sample(1), seed=2)
    st = OptimizationState(pb, pb.prior.sample(3), obs)
    v = np.random.default_rng(0).standard_normal(pb.n_m)
    ref = st.hessian_apply(v)
    assert np.allclose(np.array(json.loads(values)), ref, rtol=1e-12, atol=1e-12 * np.abs(ref).max())
