"""Response functions with discrete (consistent) shape sensitivities.

Every response returns a :class:`ResponseValue` whose ``dJdx`` is the
gradient of the discretized functional with respect to the nodal
coordinates, flat 3n in node-major xyz-minor layout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .fem import (
    DEFAULT_ELASTICITY,
    ElasticityParams,
    bulk_elastic_stiffness,
    elastic_element_matrices,
    surface_mass_matrix,
    tet_dofs,
)
from .linalg import SolverError, cg_solve
from .mesh import MeshError, SurfaceMesh, VolumeMesh, flat

STRUCTURAL_TOL = 1e-12
FD_REL_STEP = 1e-6


@dataclass
class ResponseValue:
    value: float
    dJdx: np.ndarray  # flat 3n

    def __post_init__(self):
        self.dJdx = np.asarray(self.dJdx, dtype=float).reshape(-1)
        if self.dJdx.size % 3:
            raise ValueError("sensitivity length must be a multiple of 3")


def _require_positive(vm: VolumeMesh) -> np.ndarray:
    jac = vm.jacobians
    if np.any(jac <= 0):
        k = int(np.flatnonzero(jac <= 0)[0])
        raise MeshError(f"inverted element {k} (Jacobian {jac[k]:.3e})")
    return jac


def volume_response(vm: VolumeMesh) -> ResponseValue:
    """Total volume and its exact nodal gradient."""
    jac = _require_positive(vm)
    p = vm.nodes[vm.tets]
    e1, e2, e3 = p[:, 1] - p[:, 0], p[:, 2] - p[:, 0], p[:, 3] - p[:, 0]
    g = np.empty_like(p)
    g[:, 1] = np.cross(e2, e3) / 6.0
    g[:, 2] = np.cross(e3, e1) / 6.0
    g[:, 3] = np.cross(e1, e2) / 6.0
    g[:, 0] = -g[:, 1:].sum(axis=1)
    grad = np.zeros((vm.n_nodes, 3))
    np.add.at(grad, vm.tets.ravel(), g.reshape(-1, 3))
    return ResponseValue(float(jac.sum() / 6.0), flat(grad))


@dataclass(frozen=True)
class LoadCase:
    """Homogeneous Dirichlet nodes and nodal point loads ``{node: (fx, fy, fz)}``."""

    dirichlet: tuple
    loads: dict

    def force_vector(self, n: int) -> np.ndarray:
        f = np.zeros((n, 3))
        for node, val in self.loads.items():
            f[int(node)] += np.asarray(val, dtype=float)
        return f.reshape(-1)

    def free_dofs(self, n: int) -> np.ndarray:
        free = np.ones((n, 3), bool)
        free[np.asarray(self.dirichlet, dtype=np.int64)] = False
        return free.reshape(-1)


def structural_stiffness(vm: VolumeMesh, ep: ElasticityParams = DEFAULT_ELASTICITY) -> sp.csr_matrix:
    """Plain linear-elastic stiffness (no filter radii, no stiffening)."""
    return bulk_elastic_stiffness(vm, ep, 1.0, stiffening=False)


def solve_displacements(vm: VolumeMesh, case: LoadCase, ep: ElasticityParams = DEFAULT_ELASTICITY,
                        tol: float = STRUCTURAL_TOL) -> np.ndarray:
    n = vm.n_nodes
    free = case.free_dofs(n)
    if free.all():
        raise SolverError("structural system is singular: no Dirichlet nodes")
    f = case.force_vector(n)
    u = np.zeros(3 * n)
    if not np.any(f[free]):
        return u
    K = structural_stiffness(vm, ep)[free][:, free]
    uf, info = cg_solve(K, f[free], tol=tol)
    if not info.converged:
        raise SolverError(f"structural solve did not converge (residual {info.residual.max():.3e})")
    u[free] = uf
    return u


def element_stiffness_derivatives(p: np.ndarray, ep: ElasticityParams, h: np.ndarray):
    """Central-difference ``dK_e/dx`` for each of the 12 corner coordinates.

    ``p`` has shape (ne, 4, 3), ``h`` the per-element step. Yields
    ``(corner, component, dK)`` with ``dK`` of shape (ne, 12, 12).
    """
    for a in range(4):
        for c in range(3):
            pp, pm = p.copy(), p.copy()
            pp[:, a, c] += h
            pm[:, a, c] -= h
            kp, _ = elastic_element_matrices(pp, ep)
            km, _ = elastic_element_matrices(pm, ep)
            yield a, c, (kp - km) / (2 * h)[:, None, None]


def _local_edge_length(p: np.ndarray) -> np.ndarray:
    pairs = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]
    return np.mean([np.linalg.norm(p[:, i] - p[:, j], axis=1) for i, j in pairs], axis=0)


def strain_energy_response(vm: VolumeMesh, ep: ElasticityParams, case: LoadCase,
                           tol: float = STRUCTURAL_TOL) -> ResponseValue:
    """Strain energy ``u'Ku / 2`` of a clamped, point-loaded solid.

    Shape sensitivities are semi-analytic: ``-u_e' (dK_e/dx) u_e / 2`` with the
    element derivative by central differences. Point loads keep their value
    as their node moves, so there is no load-position term.
    """
    _require_positive(vm)
    u = solve_displacements(vm, case, ep, tol)
    K = structural_stiffness(vm, ep)
    value = 0.5 * float(u @ (K @ u))
    grad = np.zeros((vm.n_nodes, 3))
    if value == 0.0:
        return ResponseValue(0.0, flat(grad))
    p = vm.nodes[vm.tets]
    ue = u[tet_dofs(vm.tets)]
    h = FD_REL_STEP * _local_edge_length(p)
    for a, c, dK in element_stiffness_derivatives(p, ep, h):
        np.add.at(grad[:, c], vm.tets[:, a], -0.5 * np.einsum("ei,eij,ej->e", ue, dK, ue))
    return ResponseValue(value, flat(grad))


def synthetic_uniform_sensitivity(sm: SurfaceMesh, direction=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Consistent nodal field ``M_G (direction per node)`` of a uniform continuous field."""
    d = np.asarray(direction, dtype=float)
    if d.shape != (3,) or not np.isclose(np.linalg.norm(d), 1.0):
        raise ValueError("direction must be a unit 3-vector")
    M = surface_mass_matrix(sm)
    return flat(M @ np.tile(d, (sm.n_nodes, 1)))
