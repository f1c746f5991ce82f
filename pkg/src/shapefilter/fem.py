"""Linear (P1) finite-element matrices on triangles and tetrahedra.

All integrals are evaluated in closed form. Scalar matrices act per
Cartesian component; the elasticity matrices act on node-major xyz-minor
3n dof vectors.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .linalg import TripletBuffer, assemble, kron3
from .mesh import DegenerateElementError, MeshError, SurfaceMesh, VolumeMesh, as_nodal

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ElasticityParams:
    lam: float
    mu: float

    def __post_init__(self):
        if self.mu <= 0 or self.lam < 0:
            raise ValueError("Lame parameters need mu > 0 and lambda >= 0")

    @classmethod
    def from_young(cls, E: float = 1.0, nu: float = 0.3) -> "ElasticityParams":
        return cls(lam=E * nu / ((1 + nu) * (1 - 2 * nu)), mu=E / (2 * (1 + nu)))

    def voigt(self) -> np.ndarray:
        """6x6 isotropic constitutive matrix for engineering shear strains."""
        C = np.zeros((6, 6))
        C[:3, :3] = self.lam
        C[np.arange(3), np.arange(3)] += 2 * self.mu
        C[np.arange(3, 6), np.arange(3, 6)] = self.mu
        return C


DEFAULT_ELASTICITY = ElasticityParams.from_young()


@dataclass(frozen=True)
class FilterRadii:
    """Helmholtz surface radius, bulk/surface weighting and the bulk scaling J0."""

    r_gamma: float
    beta: float = 1.0
    j0: float | None = None
    r_omega: float | None = None  # uniform bulk radius when stiffening is off

    def __post_init__(self):
        if self.r_gamma < 0:
            raise ValueError("r_gamma must be non-negative")
        if not 0 < self.beta <= 1:
            raise ValueError("beta must lie in (0, 1]")


# ---------------------------------------------------------------------------
# triangles


def _check_triangles(sm: SurfaceMesh) -> np.ndarray:
    a = sm.areas
    if a.size:
        bad = np.flatnonzero(a <= 1e-12 * a.mean())
        if bad.size:
            raise DegenerateElementError(int(bad[0]), float(a[bad[0]]))
    return a


_TRI_MASS = (np.ones((3, 3)) + np.eye(3)) / 12.0


def surface_mass_element(area) -> np.ndarray:
    return np.multiply.outer(np.asarray(area, float), _TRI_MASS)


def surface_mass_matrix(sm: SurfaceMesh) -> sp.csr_matrix:
    """Consistent scalar P1 mass matrix of a triangulated surface."""
    area = _check_triangles(sm)
    tb = TripletBuffer()
    tb.add_element(sm.triangles, surface_mass_element(area))
    return assemble(tb, sm.n_nodes)


def lb_element_matrices(nodes: np.ndarray, tris: np.ndarray) -> np.ndarray:
    """Unit-radius Laplace-Beltrami element matrices (e_i . e_j) / (4A)."""
    p = nodes[tris]
    # edge opposite each vertex, consistently oriented
    e = np.stack([p[:, 2] - p[:, 1], p[:, 0] - p[:, 2], p[:, 1] - p[:, 0]], axis=1)
    area = 0.5 * np.linalg.norm(np.cross(e[:, 2], -e[:, 1]), axis=1)
    return np.einsum("eik,ejk->eij", e, e) / (4.0 * area)[:, None, None]


def surface_lb_stiffness(sm: SurfaceMesh, r_gamma: float = 1.0) -> sp.csr_matrix:
    """Scalar surface Helmholtz stiffness ``r^2 * int grad_G N . grad_G N``."""
    if r_gamma < 0:
        raise ValueError("r_gamma must be non-negative")
    _check_triangles(sm)
    tb = TripletBuffer()
    tb.add_element(sm.triangles, r_gamma ** 2 * lb_element_matrices(sm.nodes, sm.triangles))
    return assemble(tb, sm.n_nodes)


# ---------------------------------------------------------------------------
# tetrahedra


_TET_MASS = (np.ones((4, 4)) + np.eye(4)) / 20.0


def _check_tets(vm: VolumeMesh, allow_negative: bool = True) -> np.ndarray:
    j = vm.jacobians
    if j.size:
        bad = np.flatnonzero(np.abs(j) <= 1e-12 * np.abs(j).mean())
        if bad.size:
            raise DegenerateElementError(int(bad[0]), float(j[bad[0]] / 6))
        if not allow_negative and np.any(j <= 0):
            k = int(np.flatnonzero(j <= 0)[0])
            raise MeshError(f"inverted element {k} (Jacobian {j[k]:.3e})")
    return j


def bulk_mass_matrix(vm: VolumeMesh) -> sp.csr_matrix:
    """Consistent scalar P1 mass matrix of a tet mesh."""
    vol = np.abs(_check_tets(vm)) / 6.0
    tb = TripletBuffer()
    tb.add_element(vm.tets, np.multiply.outer(vol, _TET_MASS))
    return assemble(tb, vm.n_nodes)


def shape_gradients(p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of the four P1 shape functions, shape (ne, 4, 3), and Jacobians."""
    J = np.transpose(p[:, 1:] - p[:, :1], (0, 2, 1))  # columns are edge vectors
    det = np.linalg.det(J)
    G = np.linalg.inv(J)  # row k = grad N_{k+1}
    grads = np.concatenate([-G.sum(axis=1, keepdims=True), G], axis=1)
    return grads, det


def strain_matrices(grads: np.ndarray) -> np.ndarray:
    """Voigt strain-displacement matrices, shape (ne, 6, 12)."""
    ne = grads.shape[0]
    B = np.zeros((ne, 6, 12))
    for a in range(4):
        bx, by, bz = grads[:, a, 0], grads[:, a, 1], grads[:, a, 2]
        c = 3 * a
        B[:, 0, c] = bx
        B[:, 1, c + 1] = by
        B[:, 2, c + 2] = bz
        B[:, 3, c + 1] = bz
        B[:, 3, c + 2] = by
        B[:, 4, c] = bz
        B[:, 4, c + 2] = bx
        B[:, 5, c] = by
        B[:, 5, c + 1] = bx
    return B


def elastic_element_matrices(p: np.ndarray, ep: ElasticityParams) -> tuple[np.ndarray, np.ndarray]:
    """Element stiffness ``|V| B^T C B`` for tets with corner coordinates ``p``.

    Returns (ne, 12, 12) matrices and the signed Jacobians.
    """
    grads, det = shape_gradients(p)
    B = strain_matrices(grads)
    vol = np.abs(det) / 6.0
    ke = np.einsum("eki,kl,elj->eij", B, ep.voigt(), B) * vol[:, None, None]
    return ke, det


def tet_dofs(tets: np.ndarray) -> np.ndarray:
    return (3 * tets[:, :, None] + np.arange(3)).reshape(len(tets), 12)


def element_weights(jac: np.ndarray, j0: float) -> np.ndarray:
    """Squared elemental bulk radius ``(J0 / J^e)^2`` of Jacobian-based stiffening."""
    return (j0 / jac) ** 2


def bulk_elastic_stiffness(vm: VolumeMesh, ep: ElasticityParams = DEFAULT_ELASTICITY,
                           radii: FilterRadii | float | None = None,
                           stiffening: bool = True) -> sp.csr_matrix:
    """Bulk pseudo-elastic stiffness on 3n dofs.

    With ``stiffening`` the element ``e`` is weighted by ``(J0/J^e)^2`` where
    ``J0 = radii.j0``; otherwise every element is weighted by ``r^2`` with
    ``r`` given directly as a number or as ``radii.r_omega`` (default 1).
    """
    jac = _check_tets(vm, allow_negative=not stiffening)
    ke, _ = elastic_element_matrices(vm.nodes[vm.tets], ep)
    if stiffening:
        if not isinstance(radii, FilterRadii) or radii.j0 is None:
            raise ValueError("stiffening requires FilterRadii with j0 computed")
        w = element_weights(jac, radii.j0)
    else:
        if radii is None:
            r = 1.0
        elif isinstance(radii, FilterRadii):
            r = 1.0 if radii.r_omega is None else radii.r_omega
        else:
            r = float(radii)
        w = np.full(len(jac), r ** 2)
    tb = TripletBuffer()
    tb.add_element(tet_dofs(vm.tets), ke * w[:, None, None])
    return assemble(tb, 3 * vm.n_nodes)


def jacobian_weighted_stiffness(vm: VolumeMesh, ep: ElasticityParams = DEFAULT_ELASTICITY,
                                power: float = 1.0) -> sp.csr_matrix:
    """``sum_e (1/J^e)^power int B^T C B`` on 3n dofs."""
    jac = _check_tets(vm, allow_negative=False)
    ke, _ = elastic_element_matrices(vm.nodes[vm.tets], ep)
    tb = TripletBuffer()
    tb.add_element(tet_dofs(vm.tets), ke * (1.0 / jac ** power)[:, None, None])
    return assemble(tb, 3 * vm.n_nodes)


def embed_surface_operator(K_surf, node_map, n_vol: int) -> sp.csr_matrix:
    """Place a scalar boundary operator onto the 3n dofs of the volume mesh."""
    nb = len(node_map)
    P = sp.csr_matrix((np.ones(nb), (node_map, np.arange(nb))), shape=(n_vol, nb))
    return kron3(P @ K_surf @ P.T)


class J0Error(ArithmeticError):
    """The energy ratio defining J0 is undefined for the current geometry."""


def _quadratic_forms(vm: VolumeMesh, x, ep: ElasticityParams):
    X = as_nodal(x, vm.n_nodes)
    sm, node_map = vm.boundary, vm.boundary_nodes
    Xg = X[node_map]
    Kg = surface_lb_stiffness(sm.with_nodes(Xg), 1.0)
    num = float(np.einsum("ij,ij->", Xg, Kg @ Xg))
    Ko = jacobian_weighted_stiffness(vm.with_nodes(X), ep)
    den = float(X.reshape(-1) @ (Ko @ X.reshape(-1)))
    return num, den


def compute_j0(vm: VolumeMesh, x=None, ep: ElasticityParams = DEFAULT_ELASTICITY,
               r_gamma: float = 1.0, beta: float = 1.0) -> float:
    """Bulk scaling ``J0 = beta r^2 (x_G' K_G x_G) / (x' K_1/J x)``.

    ``K_G`` is the unit-radius Laplace-Beltrami stiffness of the boundary and
    ``K_1/J`` the elasticity stiffness with every element divided by its
    Jacobian, both evaluated on the geometry ``x`` (default: mesh nodes).
    Raises :class:`J0Error` when either quadratic form vanishes.
    """
    if not 0 < beta <= 1:
        raise ValueError("beta must lie in (0, 1]")
    x = vm.nodes if x is None else x
    num, den = _quadratic_forms(vm, x, ep)
    if not den > 0 or not num > 0:
        raise J0Error(f"degenerate J0 energy ratio (numerator {num:.3e}, denominator {den:.3e}); "
                      "use the fallback J0")
    return beta * r_gamma ** 2 * num / den


def fallback_j0(vm: VolumeMesh, r_gamma: float, beta: float, previous: float | None = None) -> float:
    """J0 to use when :func:`compute_j0` fails: previous value, else beta r^2 area/volume."""
    if previous is not None:
        return previous
    return beta * r_gamma ** 2 * vm.boundary.area / vm.volume
