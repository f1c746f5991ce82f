"""Convolution (explicit) shape filtering on triangulated surfaces.

The filter maps a nodal control field ``s`` to geometry ``x = A s`` with

    A = D V^-1 W M

where ``M`` is the consistent surface mass matrix, ``W(i, j) = F(|x_i - x_j|)``
the kernel sampled at mesh nodes, ``V = diag(W M 1)`` the normalisation and
``D`` the diagonal damping towards the design-surface boundary curve. All
matrices are scalar and act on each Cartesian component alike.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .fem import surface_mass_matrix
from .linalg import kron3
from .mesh import SurfaceMesh, as_nodal, boundary_distances, closest_point_projection, flat

KERNELS = ("gaussian", "linear_hat", "green_regularized")

# support span p per unit radius
SPAN_PER_RADIUS = {"gaussian": 6.0, "linear_hat": 2.0, "green_regularized": 6.0}


@dataclass(frozen=True)
class KernelSpec:
    family: str
    radius: float
    span: float | None = None

    def __post_init__(self):
        if self.family not in KERNELS:
            raise ValueError(f"unknown kernel {self.family!r}; choose from {KERNELS}")
        if not self.radius > 0:
            raise ValueError("kernel radius must be positive")
        if self.span is None:
            object.__setattr__(self, "span", SPAN_PER_RADIUS[self.family] * self.radius)
        if not self.span > 0:
            raise ValueError("support span must be positive")

    @classmethod
    def from_span(cls, family: str, span: float) -> "KernelSpec":
        return cls(family, span / SPAN_PER_RADIUS[family], span)

    @property
    def cutoff(self) -> float:
        """Distance beyond which the kernel is truncated to zero."""
        return 0.5 * self.span


def kernel_eval(spec: KernelSpec, d):
    """Kernel value at distance(s) ``d`` (truncated beyond half the span)."""
    d = np.asarray(d, dtype=float)
    r = spec.radius
    if spec.family == "gaussian":
        f = np.exp(-0.5 * (d / r) ** 2) / (r * math.sqrt(2 * math.pi))
    elif spec.family == "linear_hat":
        f = np.maximum(0.0, (r - d) / r)
    else:
        f = np.exp(-d / r) / (1.0 + 4 * math.pi * d / r ** 2)
    return np.where(d > spec.cutoff, 0.0, f)


def kernel_peak(spec: KernelSpec) -> float:
    return float(kernel_eval(spec, 0.0))


@dataclass(frozen=True)
class ExplicitFilterConfig:
    kernel: KernelSpec
    damping: bool = False
    normalization: bool = True
    matrix_mode: str = "stored"

    def __post_init__(self):
        if self.matrix_mode not in ("stored", "matrix_free"):
            raise ValueError("matrix_mode must be 'stored' or 'matrix_free'")


class EmptySupportError(ValueError):
    pass


def damping_factor(cfg: ExplicitFilterConfig, sm: SurfaceMesh, node: int) -> float:
    """``1 - F(x_node, x_cpp)`` with the kernel scaled to unit peak, clamped to [0, 1]."""
    if not cfg.damping:
        return 1.0
    x = sm.nodes[node]
    d = np.linalg.norm(x - closest_point_projection(sm, x))
    f = kernel_eval(cfg.kernel, d) / kernel_peak(cfg.kernel)
    return float(np.clip(1.0 - f, 0.0, 1.0))


def damping_vector(cfg: ExplicitFilterConfig, sm: SurfaceMesh) -> np.ndarray:
    if not cfg.damping:
        return np.ones(sm.n_nodes)
    d = boundary_distances(sm)
    f = kernel_eval(cfg.kernel, d) / kernel_peak(cfg.kernel)
    return np.clip(1.0 - f, 0.0, 1.0)


def kernel_weights(sm: SurfaceMesh, spec: KernelSpec) -> sp.csr_matrix:
    """Symmetric sparse matrix ``W(i, j) = F(|x_i - x_j|)`` within the cutoff."""
    pairs = sm.kdtree.query_pairs(spec.cutoff, output_type="ndarray")
    i, j = pairs[:, 0], pairs[:, 1]
    d = np.linalg.norm(sm.nodes[i] - sm.nodes[j], axis=1)
    w = kernel_eval(spec, d)
    n = sm.n_nodes
    diag = np.arange(n)
    rows = np.concatenate([i, j, diag])
    cols = np.concatenate([j, i, diag])
    vals = np.concatenate([w, w, np.full(n, kernel_peak(spec))])
    W = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    W.eliminate_zeros()
    W.sort_indices()
    return W


class ExplicitFilter:
    """Explicit filter bound to one surface mesh and configuration."""

    def __init__(self, sm: SurfaceMesh, cfg: ExplicitFilterConfig):
        self.mesh = sm
        self.cfg = cfg
        self.M = surface_mass_matrix(sm)
        self.W = kernel_weights(sm, cfg.kernel)
        self.D = damping_vector(cfg, sm)
        if cfg.normalization:
            V = self.W @ np.asarray(self.M.sum(axis=1)).ravel()
            if np.any(V <= 0):
                k = int(np.flatnonzero(V <= 0)[0])
                raise EmptySupportError(f"node {k} has no kernel support")
            self.V = V
        else:
            self.V = np.ones(sm.n_nodes)
        self.row_scale = self.D / self.V
        self._A = None
        # matrix-free storage: every node keeps its neighbour ids and weights
        self._nbr_ptr = self.W.indptr
        self._nbr_idx = self.W.indices
        self._nbr_w = self.W.data

    @property
    def n(self) -> int:
        return self.mesh.n_nodes

    def matrix(self) -> sp.csr_matrix:
        """Scalar n x n filter matrix ``D V^-1 W M`` (cached)."""
        if self._A is None:
            A = sp.diags(self.row_scale) @ (self.W @ self.M)
            self._A = A.tocsr()
        return self._A

    def matrix3(self) -> sp.csr_matrix:
        return kron3(self.matrix())

    def _gather(self, Y: np.ndarray) -> np.ndarray:
        # per-node weighted sums of neighbour values; W is symmetric so this
        # also serves the transpose
        contrib = self._nbr_w[:, None] * Y[self._nbr_idx]
        out = np.add.reduceat(contrib, self._nbr_ptr[:-1], axis=0)
        empty = self._nbr_ptr[:-1] == self._nbr_ptr[1:]
        out[empty] = 0.0
        return out

    def forward(self, s, mode: str | None = None) -> np.ndarray:
        """Geometry (flat 3n) from control field ``s`` (flat 3n or (n, 3))."""
        S = as_nodal(s, self.n)
        mode = mode or self.cfg.matrix_mode
        if mode == "stored":
            X = self.matrix() @ S
        else:
            X = self.row_scale[:, None] * self._gather(self.M @ S)
        return flat(X)

    def transpose_apply(self, dJdx, mode: str | None = None) -> np.ndarray:
        """Control sensitivities ``A^T dJ/dx = M W V^-1 D dJ/dx``."""
        G = as_nodal(dJdx, self.n)
        mode = mode or self.cfg.matrix_mode
        if mode == "stored":
            Y = self.matrix().T @ G
        else:
            Y = self.M @ self._gather(self.row_scale[:, None] * G)
        return flat(Y)

    def scaled_sensitivities(self, dJdx) -> np.ndarray:
        """``M^-1 A^T dJ/dx = W V^-1 D dJ/dx``, evaluated without a mass solve."""
        G = as_nodal(dJdx, self.n)
        return flat(self.W @ (self.row_scale[:, None] * G))

    def map_sensitivities(self, dJdx) -> tuple[np.ndarray, np.ndarray]:
        return self.transpose_apply(dJdx), self.scaled_sensitivities(dJdx)

    def apply_update(self, ds) -> np.ndarray:
        return self.forward(ds)

    def row_sums(self) -> np.ndarray:
        return np.asarray(self.matrix().sum(axis=1)).ravel()


def build_filter_matrix(cfg: ExplicitFilterConfig, sm: SurfaceMesh) -> sp.csr_matrix:
    """3n x 3n block-scalar explicit filter matrix."""
    return ExplicitFilter(sm, cfg).matrix3()


def forward(cfg: ExplicitFilterConfig, sm: SurfaceMesh, s) -> np.ndarray:
    return ExplicitFilter(sm, cfg).forward(s)


def transpose_apply(cfg: ExplicitFilterConfig, sm: SurfaceMesh, dJdx) -> np.ndarray:
    return ExplicitFilter(sm, cfg).transpose_apply(dJdx)
