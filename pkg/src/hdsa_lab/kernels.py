"""Element-loop kernels for P1 triangles.

Every Hessian and mixed-derivative apply goes through these loops, so each has
a numba version and a vectorized numpy version with identical semantics. The
module-level names dispatch on :data:`hdsa_lab._jit.USE_NUMBA`; the ``*_numpy``
and ``*_numba`` variants stay importable for parity tests and benchmarks.

Conventions: ``tris`` is an ``(n_e, 3)`` int64 array, ``ke`` an ``(n_e, 3, 3)``
array of unit-coefficient local stiffness matrices.
"""
import numpy as np

from ._jit import USE_NUMBA, njit


# -- numpy ------------------------------------------------------------------

def stiffness_action_numpy(tris, ke, coef, u, n):
    """Return ``sum_e coef_e * P_e (ke_e u_e)`` as a nodal vector of length n."""
    local = np.einsum("eij,ej->ei", ke, u[tris]) * coef[:, None]
    return np.bincount(tris.ravel(), weights=local.ravel(), minlength=n)


def stiffness_pairing_numpy(tris, ke, p, u):
    """Per-element bilinear form ``p_e^T ke_e u_e``."""
    return np.einsum("ei,eij,ej->e", p[tris], ke, u[tris])


def scatter_to_nodes_numpy(tris, vals, n):
    """Add ``vals[e]`` to each of the three vertices of element e."""
    return np.bincount(tris.ravel(), weights=np.repeat(vals, 3), minlength=n)


def locate_points_numpy(points, nodes, tris, tol=1e-12):
    """Containing triangle (lowest index on ties) and barycentric weights.

    Returns ``(tri_index, weights)``; ``tri_index`` is -1 for points outside
    the mesh.
    """
    points = np.atleast_2d(points)
    a = nodes[tris[:, 0]]
    b = nodes[tris[:, 1]]
    c = nodes[tris[:, 2]]
    det = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (c[:, 0] - a[:, 0]) * (b[:, 1] - a[:, 1])
    owner = np.full(len(points), -1, dtype=np.int64)
    weights = np.zeros((len(points), 3))
    for k, (x, y) in enumerate(points):
        l1 = ((x - a[:, 0]) * (c[:, 1] - a[:, 1]) - (c[:, 0] - a[:, 0]) * (y - a[:, 1])) / det
        l2 = ((b[:, 0] - a[:, 0]) * (y - a[:, 1]) - (x - a[:, 0]) * (b[:, 1] - a[:, 1])) / det
        l0 = 1.0 - l1 - l2
        inside = np.flatnonzero((l0 >= -tol) & (l1 >= -tol) & (l2 >= -tol))
        if inside.size:
            e = inside[0]
            owner[k] = e
            weights[k] = (l0[e], l1[e], l2[e])
    return owner, weights


# -- numba ------------------------------------------------------------------

@njit
def stiffness_action_numba(tris, ke, coef, u, n):
    out = np.zeros(n)
    for e in range(tris.shape[0]):
        c = coef[e]
        if c == 0.0:
            continue
        for i in range(3):
            acc = 0.0
            for j in range(3):
                acc += ke[e, i, j] * u[tris[e, j]]
            out[tris[e, i]] += c * acc
    return out


@njit
def stiffness_pairing_numba(tris, ke, p, u):
    out = np.empty(tris.shape[0])
    for e in range(tris.shape[0]):
        acc = 0.0
        for i in range(3):
            pi = p[tris[e, i]]
            for j in range(3):
                acc += pi * ke[e, i, j] * u[tris[e, j]]
        out[e] = acc
    return out


@njit
def scatter_to_nodes_numba(tris, vals, n):
    out = np.zeros(n)
    for e in range(tris.shape[0]):
        for i in range(3):
            out[tris[e, i]] += vals[e]
    return out


@njit
def _locate_numba(points, nodes, tris, tol):
    npts = points.shape[0]
    owner = np.full(npts, -1, dtype=np.int64)
    weights = np.zeros((npts, 3))
    for k in range(npts):
        x = points[k, 0]
        y = points[k, 1]
        for e in range(tris.shape[0]):
            ax, ay = nodes[tris[e, 0], 0], nodes[tris[e, 0], 1]
            bx, by = nodes[tris[e, 1], 0], nodes[tris[e, 1], 1]
            cx, cy = nodes[tris[e, 2], 0], nodes[tris[e, 2], 1]
            det = (bx - ax) * (cy - ay) - (cx - ax) * (by - ay)
            l1 = ((x - ax) * (cy - ay) - (cx - ax) * (y - ay)) / det
            l2 = ((bx - ax) * (y - ay) - (x - ax) * (by - ay)) / det
            l0 = 1.0 - l1 - l2
            if l0 >= -tol and l1 >= -tol and l2 >= -tol:
                owner[k] = e
                weights[k, 0] = l0
                weights[k, 1] = l1
                weights[k, 2] = l2
                break
    return owner, weights


def locate_points_numba(points, nodes, tris, tol=1e-12):
    points = np.ascontiguousarray(np.atleast_2d(points), dtype=np.float64)
    return _locate_numba(points, nodes, tris, tol)


if USE_NUMBA:
    stiffness_action = stiffness_action_numba
    stiffness_pairing = stiffness_pairing_numba
    scatter_to_nodes = scatter_to_nodes_numba
    locate_points = locate_points_numba
else:
    stiffness_action = stiffness_action_numpy
    stiffness_pairing = stiffness_pairing_numpy
    scatter_to_nodes = scatter_to_nodes_numpy
    locate_points = locate_points_numpy
