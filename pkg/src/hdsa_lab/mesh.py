"""Structured P1 triangulation of the unit square and its finite element operators.

Node ``(i, j)`` sits at ``(i/n, j/n)`` with flat index ``j*(n+1) + i``. Each
grid cell is split along its ``(0,0)-(1,1)`` diagonal into two
counter-clockwise triangles.

The log-conductivity enters the stiffness matrix through one midpoint
quadrature point per triangle: ``kappa_e = exp(mean(m over the vertices of e))``.
The derivative code in :mod:`hdsa_lab.adjoint` differentiates this same
discrete form.
"""
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import kernels

BOTTOM, RIGHT, TOP, LEFT = 1, 2, 3, 4
SIDES = {BOTTOM: "bottom", RIGHT: "right", TOP: "top", LEFT: "left"}

_LOCAL_MASS = np.array([[2.0, 1.0, 1.0], [1.0, 2.0, 1.0], [1.0, 1.0, 2.0]]) / 12.0


@dataclass(frozen=True, eq=False)
class Mesh:
    """Uniform triangular mesh of ``[0, 1]^2``.

    Attributes
    ----------
    nodes : (n_m, 2) array
    triangles : (n_e, 3) int array, counter-clockwise
    boundary_edges : (n_b, 2) int array
    edge_sides : (n_b,) int array of side tags (1 bottom, 2 right, 3 top, 4 left)
    cells_per_side : int
    """

    nodes: np.ndarray
    triangles: np.ndarray
    boundary_edges: np.ndarray
    edge_sides: np.ndarray
    cells_per_side: int
    areas: np.ndarray = field(repr=False)
    local_stiffness: np.ndarray = field(repr=False)

    @property
    def n_m(self):
        return self.nodes.shape[0]

    @property
    def n_e(self):
        return self.triangles.shape[0]

    def side_nodes(self, side):
        _check_side(side)
        return np.unique(self.boundary_edges[self.edge_sides == side])


def _check_side(side):
    if side not in SIDES:
        raise ValueError(f"invalid side tag {side!r}; expected one of {sorted(SIDES)}")


def build_mesh(cells_per_side):
    """Triangulate the unit square with ``cells_per_side`` cells in each direction."""
    n = int(cells_per_side)
    if n != cells_per_side or n < 2:
        raise ValueError(f"cells_per_side must be an integer >= 2, got {cells_per_side!r}")
    xs = np.linspace(0.0, 1.0, n + 1)
    gx, gy = np.meshgrid(xs, xs)
    nodes = np.column_stack([gx.ravel(), gy.ravel()])

    i, j = np.meshgrid(np.arange(n), np.arange(n))
    v00 = (j * (n + 1) + i).ravel()
    v10 = v00 + 1
    v01 = v00 + (n + 1)
    v11 = v01 + 1
    tris = np.empty((2 * n * n, 3), dtype=np.int64)
    tris[0::2] = np.column_stack([v00, v10, v11])
    tris[1::2] = np.column_stack([v00, v11, v01])

    k = np.arange(n)
    edges = np.concatenate([
        np.column_stack([k, k + 1]),                                   # bottom
        np.column_stack([k * (n + 1) + n, (k + 1) * (n + 1) + n]),     # right
        np.column_stack([n * (n + 1) + k, n * (n + 1) + k + 1]),       # top
        np.column_stack([k * (n + 1), (k + 1) * (n + 1)]),             # left
    ]).astype(np.int64)
    sides = np.repeat([BOTTOM, RIGHT, TOP, LEFT], n)

    areas, ke = _local_geometry(nodes, tris)
    return Mesh(nodes, tris, edges, sides, n, areas, ke)


def _local_geometry(nodes, tris):
    p = nodes[tris]                                   # (n_e, 3, 2)
    d1 = p[:, 1] - p[:, 0]
    d2 = p[:, 2] - p[:, 0]
    det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    area = 0.5 * det
    # gradients of the barycentric basis: rows are grad(lambda_i)
    grads = np.empty((len(tris), 3, 2))
    grads[:, 1, 0] = d2[:, 1] / det
    grads[:, 1, 1] = -d2[:, 0] / det
    grads[:, 2, 0] = -d1[:, 1] / det
    grads[:, 2, 1] = d1[:, 0] / det
    grads[:, 0] = -grads[:, 1] - grads[:, 2]
    ke = area[:, None, None] * np.einsum("eid,ejd->eij", grads, grads)
    return area, np.ascontiguousarray(ke)


def _assemble(mesh, local):
    rows = np.repeat(mesh.triangles, 3, axis=1).ravel()
    cols = np.tile(mesh.triangles, (1, 3)).ravel()
    n = mesh.n_m
    return sp.csr_matrix((local.ravel(), (rows, cols)), shape=(n, n))


def assemble_mass(mesh):
    """Consistent P1 mass matrix (exact integration)."""
    local = mesh.areas[:, None, None] * _LOCAL_MASS[None]
    return _assemble(mesh, local)


def element_coefficient(mesh, m):
    """``exp(m)`` at each triangle's midpoint quadrature point."""
    return np.exp(np.asarray(m)[mesh.triangles].mean(axis=1))


def assemble_weighted_stiffness(mesh, m=None):
    """Stiffness matrix of ``int exp(m) grad(phi_i) . grad(phi_j)``.

    ``m=None`` gives the unit-coefficient Laplacian. No boundary terms are
    included, so constants lie in the kernel.
    """
    if m is None:
        return _assemble(mesh, mesh.local_stiffness)
    m = np.asarray(m, dtype=float)
    if m.shape != (mesh.n_m,) or not np.all(np.isfinite(m)):
        raise ValueError("m must be a finite nodal vector of length n_m")
    kappa = element_coefficient(mesh, m)
    return _assemble(mesh, kappa[:, None, None] * mesh.local_stiffness)


def assemble_boundary_mass(mesh, side):
    """1D P1 mass matrix of the edges on one side of the square."""
    _check_side(side)
    edges = mesh.boundary_edges[mesh.edge_sides == side]
    p = mesh.nodes[edges]
    length = np.linalg.norm(p[:, 1] - p[:, 0], axis=1)
    local = length[:, None, None] * (np.array([[2.0, 1.0], [1.0, 2.0]]) / 6.0)[None]
    rows = np.repeat(edges, 2, axis=1).ravel()
    cols = np.tile(edges, (1, 2)).ravel()
    n = mesh.n_m
    return sp.csr_matrix((local.ravel(), (rows, cols)), shape=(n, n))


def interpolation_matrix(mesh, points):
    """Sparse ``(n_points, n_m)`` matrix evaluating the P1 interpolant at points.

    Points on shared edges are assigned to the lowest-index triangle.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if np.any(points < 0.0) or np.any(points > 1.0):
        raise ValueError("observation point outside the unit square")
    owner, w = kernels.locate_points(points, mesh.nodes, mesh.triangles)
    if np.any(owner < 0):
        raise ValueError("observation point outside the mesh")
    rows = np.repeat(np.arange(len(points)), 3)
    cols = mesh.triangles[owner].ravel()
    return sp.csr_matrix((w.ravel(), (rows, cols)), shape=(len(points), mesh.n_m))


def interpolation_row(mesh, point):
    """Single sparse row of :func:`interpolation_matrix`."""
    return interpolation_matrix(mesh, np.asarray(point, dtype=float).reshape(1, 2))


def m_norm(mass, v):
    """Mass-weighted norm ``sqrt(v^T M v)``."""
    return float(np.sqrt(max(v @ (mass @ v), 0.0)))
