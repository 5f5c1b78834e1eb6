"""Time the numba kernels against their numpy fallbacks.

Usage::

    python benchmarks/bench_kernels.py [--sizes 16 32 64] [--repeat 20]

For each mesh size it times every element kernel in both variants (after a
warm-up call, so JIT compilation is excluded), checks the two agree, and
then times a full Hessian apply with the kernels swapped in. The numpy path
is what runs under ``HDSA_DISABLE_NUMBA=1``.
"""
import argparse
import timeit
from contextlib import contextmanager

import numpy as np

from hdsa_lab import kernels
from hdsa_lab._jit import HAVE_NUMBA
from hdsa_lab.adjoint import OptimizationState
from hdsa_lab.forward import HeatProblem
from hdsa_lab.mesh import build_mesh

KERNELS = ("stiffness_action", "stiffness_pairing", "scatter_to_nodes", "locate_points")


@contextmanager
def use_variant(variant):
    saved = {k: getattr(kernels, k) for k in KERNELS}
    for k in KERNELS:
        setattr(kernels, k, getattr(kernels, f"{k}_{variant}"))
    try:
        yield
    finally:
        for k, f in saved.items():
            setattr(kernels, k, f)


def kernel_cases(mesh, rng):
    tris, ke, n = mesh.triangles, mesh.local_stiffness, mesh.n_m
    coef = rng.random(mesh.n_e)
    u, p = rng.standard_normal(n), rng.standard_normal(n)
    vals = rng.standard_normal(mesh.n_e)
    pts = rng.random((200, 2))
    return {
        "stiffness_action": (tris, ke, coef, u, n),
        "stiffness_pairing": (tris, ke, p, u),
        "scatter_to_nodes": (tris, vals, n),
        "locate_points": (pts, mesh.nodes, tris),
    }


def best_time(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def bench_size(n, repeat, rng):
    mesh = build_mesh(n)
    rows = []
    for name, args in kernel_cases(mesh, rng).items():
        f_np = getattr(kernels, f"{name}_numpy")
        f_nb = getattr(kernels, f"{name}_numba")
        out_np, out_nb = f_np(*args), f_nb(*args)  # warm-up, and parity
        as_tuple = lambda o: o if isinstance(o, tuple) else (o,)
        for a, b in zip(as_tuple(out_np), as_tuple(out_nb)):
            np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)
        t_np = best_time(lambda: f_np(*args), repeat)
        t_nb = best_time(lambda: f_nb(*args), repeat)
        rows.append((name, t_np, t_nb))

    pb = HeatProblem(mesh)
    m = pb.prior.sample(0)
    obs = pb.synthesize(m, seed=1)
    v = rng.standard_normal(mesh.n_m)
    times = {}
    for variant in ("numpy", "numba"):
        with use_variant(variant):
            state = OptimizationState(pb, pb.prior.mean, obs)
            state.hessian_apply(v)
            times[variant] = best_time(lambda: state.hessian_apply(v), repeat)
    rows.append(("hessian_apply", times["numpy"], times["numba"]))
    return rows


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--sizes", type=int, nargs="+", default=[16, 32, 64])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    if not HAVE_NUMBA:
        print("numba is not installed; both columns time the numpy kernels")
    rng = np.random.default_rng(0)
    print(f"{'cells':>5}  {'kernel':<18} {'numpy [ms]':>11} {'numba [ms]':>11} {'speedup':>8}")
    for n in args.sizes:
        for name, t_np, t_nb in bench_size(n, args.repeat, rng):
            print(f"{n:>5}  {name:<18} {1e3 * t_np:11.4f} {1e3 * t_nb:11.4f} {t_np / t_nb:8.2f}")


if __name__ == "__main__":
    main()
