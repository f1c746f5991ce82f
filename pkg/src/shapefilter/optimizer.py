"""Projected steepest descent in control space with filtered updates.

One iteration evaluates the responses on the current geometry, maps the
discrete shape sensitivities to scaled control sensitivities through the
selected filter, takes a constant step ``ds = -alpha dj/ds`` (optionally
projected onto the constraint tangent) and updates the geometry
incrementally, ``x <- x + A ds``, with ``A`` built on the current geometry.
Scaling by the inverse mass matrix makes the step a quasi-Newton step with
the mass matrix as a diagonal-like Hessian approximation.

Three filter modes are available on tetrahedral meshes:

``bulk_surface``
    one bulk-surface solve moves boundary and interior nodes together;
``explicit_sequential``
    explicit filter on the design surface, then pseudo-elastic mesh motion;
``implicit_surface_sequential``
    surface Helmholtz filter on the design surface, then mesh motion.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .explicit import ExplicitFilter, ExplicitFilterConfig, KernelSpec
from .fem import (
    DEFAULT_ELASTICITY,
    ElasticityParams,
    jacobian_weighted_stiffness,
    surface_mass_matrix,
)
from .fixtures import design_surface
from .implicit import BulkSurfaceFilterOperator, SurfaceFilterOperator, helmholtz_radius_for_span
from .linalg import DEFAULT_TOL, SolverError, cg_solve
from .mesh import VolumeMesh, as_nodal, flat
from .responses import LoadCase, ResponseValue, strain_energy_response, volume_response

log = logging.getLogger(__name__)

FILTER_MODES = ("bulk_surface", "explicit_sequential", "implicit_surface_sequential")
STAGNATION_RTOL = 1e-8
STAGNATION_WINDOW = 5
FIRST_STEP_FRACTION = 0.01


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class ConstraintConfig:
    response: str
    target: float
    tolerance: float
    rho: float = 1.0

    def __post_init__(self):
        if not self.tolerance > 0:
            raise ValueError("constraint tolerance must be positive")


@dataclass(frozen=True)
class FilterSelection:
    mode: str = "bulk_surface"
    r_gamma: float = 1.0
    beta: float = 1.0
    stiffening: bool = True
    kernel: KernelSpec | None = None  # explicit mode
    damping: bool = True  # explicit mode

    def __post_init__(self):
        if self.mode not in FILTER_MODES:
            raise ValueError(f"unknown filter mode {self.mode!r}; choose from {FILTER_MODES}")
        if self.mode == "explicit_sequential" and self.kernel is None:
            raise ValueError("explicit_sequential needs a kernel")


@dataclass
class OptimizationConfig:
    objective: str | Callable = "volume"
    constraint: ConstraintConfig | None = None
    alpha: float | None = None  # None: first step moves 1% of the bbox diagonal
    max_iterations: int = 100
    filter: FilterSelection = field(default_factory=FilterSelection)
    min_jacobian_stop: float = 0.0
    elasticity: ElasticityParams = DEFAULT_ELASTICITY
    load_case: LoadCase | None = None
    tol: float = DEFAULT_TOL

    def __post_init__(self):
        if self.alpha is not None and not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be >= 0")


@dataclass
class IterationRecord:
    iteration: int
    objective: float
    constraint: float
    step_norm: float
    min_jacobian: float
    wall_time: float


@dataclass
class OptimizationState:
    iteration: int
    s: np.ndarray | None  # accumulated control update (control-space sized)
    x: np.ndarray  # flat 3n geometry
    history: list = field(default_factory=list)
    min_jacobian: float = np.inf
    termination: str = ""
    alpha: float | None = None
    last_valid_x: np.ndarray | None = None
    distortion_iteration: int | None = None

    @property
    def objective_history(self) -> np.ndarray:
        return np.array([r.objective for r in self.history])

    @property
    def constraint_history(self) -> np.ndarray:
        return np.array([r.constraint for r in self.history])


# ---------------------------------------------------------------------------
# building blocks


def project_constraint(dj_obj, dj_con, violation: float, mass=None, rho: float = 1.0) -> np.ndarray:
    """Projected steepest-descent direction.

    ``-(g - (g.c / c.c) c) - rho * violation * c / (c.c)`` with inner products
    in the metric of the scalar nodal ``mass`` matrix (Euclidean if None).
    """
    n = np.asarray(dj_obj).size // 3
    G, C = as_nodal(dj_obj, n), as_nodal(dj_con, n)
    MC = C if mass is None else mass @ C
    cc = float(np.einsum("ij,ij->", C, MC))
    if not cc > 0:
        raise ValueError("constraint gradient vanishes")
    gc = float(np.einsum("ij,ij->", G, MC))
    return flat(-(G - gc / cc * C) - rho * violation * C / cc)


def steepest_descent_step(state: OptimizationState, filt, dJdx, alpha: float,
                          direction=None) -> OptimizationState:
    """``ds = -alpha dj/ds`` (or ``alpha * direction``), ``x <- x + A ds``."""
    if direction is None:
        direction = -filt.scaled(dJdx)
    ds = alpha * np.asarray(direction)
    dx = filt.apply(ds)
    state.s = ds if state.s is None or state.s.size != ds.size else state.s + ds
    state.x = state.x + dx
    return state


def sequential_mesh_motion(vm: VolumeMesh, boundary_displacement, ep: ElasticityParams = DEFAULT_ELASTICITY,
                           boundary_nodes=None, tol: float = DEFAULT_TOL) -> np.ndarray:
    """Interior motion from prescribed boundary displacements.

    Solves the Jacobian-stiffened pseudo-elastic system (element ``e`` scaled
    by ``1/J^e^2``) with the boundary displacement as Dirichlet data.
    ``boundary_displacement`` is (nb, 3) on ``boundary_nodes`` (default: all
    boundary nodes of ``vm``). Returns the (n, 3) displacement of all nodes.
    """
    bn = vm.boundary_nodes if boundary_nodes is None else np.asarray(boundary_nodes)
    ub = np.asarray(boundary_displacement, dtype=float).reshape(len(bn), 3)
    U = np.zeros((vm.n_nodes, 3))
    U[bn] = ub
    fixed = np.zeros(vm.n_nodes, bool)
    fixed[bn] = True
    free = np.repeat(~fixed, 3)
    if not free.any() or not np.any(ub):
        return U
    K = jacobian_weighted_stiffness(vm, ep, power=2)
    u = U.reshape(-1)
    rhs = -(K[free][:, ~free] @ u[~free])
    uf, info = cg_solve(K[free][:, free], rhs, tol=tol)
    if not info.converged:
        raise SolverError(f"mesh motion solve did not converge (residual {info.residual.max():.3e})")
    u = u.copy()
    u[free] = uf
    return u.reshape(-1, 3)


class BulkSurfaceMapping:
    """Bulk-surface filter on the whole tet mesh; non-design nodes fixed."""

    def __init__(self, vm: VolumeMesh, sel: FilterSelection, ep: ElasticityParams,
                 previous_j0=None, tol=DEFAULT_TOL):
        self.opr = BulkSurfaceFilterOperator(
            vm, ep, sel.r_gamma, sel.beta, stiffening=sel.stiffening,
            fixed=~vm.design_flags, previous_j0=previous_j0, tol=tol)
        self.mass = self.opr.mass
        self.j0 = self.opr.j0

    def scaled(self, dJdx) -> np.ndarray:
        return self.opr.scaled_sensitivities(dJdx)

    def apply(self, ds) -> np.ndarray:
        return self.opr.forward(ds)


class SequentialMapping:
    """Surface filter on the design surface followed by pseudo-elastic mesh motion."""

    def __init__(self, vm: VolumeMesh, sel: FilterSelection, ep: ElasticityParams, tol=DEFAULT_TOL):
        self.vm = vm
        self.ep = ep
        self.tol = tol
        self.surface, self.smap = design_surface(vm)
        fixed = ~vm.design_flags[self.smap]
        if sel.mode == "explicit_sequential":
            cfg = ExplicitFilterConfig(sel.kernel, damping=sel.damping and not self.surface.is_closed)
            self.filt = ExplicitFilter(self.surface, cfg)
            self._fixed = fixed
        else:
            self.filt = SurfaceFilterOperator(self.surface, sel.r_gamma, fixed=fixed, tol=tol)
            self._fixed = fixed
        self.mass = surface_mass_matrix(self.surface)
        self.j0 = None

    def restrict(self, dJdx) -> np.ndarray:
        return as_nodal(dJdx, self.vm.n_nodes)[self.smap]

    def scaled(self, dJdx) -> np.ndarray:
        return self.filt.scaled_sensitivities(self.restrict(dJdx))

    def apply(self, ds) -> np.ndarray:
        dxg = as_nodal(self.filt.apply_update(ds), self.surface.n_nodes).copy()
        dxg[self._fixed] = 0.0
        bn = self.vm.boundary_nodes
        ub = np.zeros((self.vm.n_nodes, 3))
        ub[self.smap] = dxg
        return flat(sequential_mesh_motion(self.vm, ub[bn], self.ep, bn, self.tol))


def element_size(vm: VolumeMesh) -> float:
    """Edge length of the cube whose Kuhn tets have the mean element Jacobian."""
    return float(np.mean(np.abs(vm.jacobians)) ** (1.0 / 3.0))


def helmholtz_radius_for_mesh(vm: VolumeMesh, span: float) -> float:
    """Helmholtz radius with support ``span`` at the element size of ``vm``."""
    h = element_size(vm)
    return helmholtz_radius_for_span(span / h) * h


def build_mapping(vm: VolumeMesh, sel: FilterSelection, ep: ElasticityParams,
                  previous_j0=None, tol=DEFAULT_TOL):
    if sel.mode == "bulk_surface":
        return BulkSurfaceMapping(vm, sel, ep, previous_j0, tol)
    return SequentialMapping(vm, sel, ep, tol)


def _response(name, vm: VolumeMesh, cfg: OptimizationConfig) -> ResponseValue:
    if callable(name):
        return name(vm)
    if name == "volume":
        return volume_response(vm)
    if name == "strain_energy":
        if cfg.load_case is None:
            raise ValueError("strain_energy needs a load case")
        return strain_energy_response(vm, cfg.elasticity, cfg.load_case)
    raise ValueError(f"unknown response {name!r}")


def _design_boundary_mask(vm: VolumeMesh) -> np.ndarray:
    mask = np.zeros(vm.n_nodes, bool)
    mask[vm.boundary_nodes] = True
    return mask & vm.design_flags


def _stagnated(objectives: list) -> bool:
    if len(objectives) <= STAGNATION_WINDOW:
        return False
    window = np.asarray(objectives[-STAGNATION_WINDOW - 1:])
    scale = max(abs(window[0]), 1e-300)
    return bool(np.all(np.abs(np.diff(window)) <= STAGNATION_RTOL * scale))


def run_optimization(cfg: OptimizationConfig, mesh: VolumeMesh,
                     callback: Callable | None = None) -> OptimizationState:
    """Iterate until max_iterations, first distortion or stagnation.

    Shape sensitivities are restricted to design boundary nodes before
    filtering. The state keeps the last geometry with all Jacobians above
    ``min_jacobian_stop`` in ``last_valid_x``.
    """
    t0 = time.perf_counter()
    n = mesh.n_nodes
    x0 = flat(mesh.nodes)
    state = OptimizationState(0, None, x0.copy(), alpha=cfg.alpha, last_valid_x=x0.copy())
    keep = np.repeat(_design_boundary_mask(mesh), 3)
    objectives: list[float] = []
    prev_j0 = None
    it = 0
    while True:
        vm = mesh.with_nodes(as_nodal(state.x, n))
        jmin = float(vm.jacobians.min())
        state.min_jacobian = jmin
        if jmin <= cfg.min_jacobian_stop:
            state.termination = "distortion"
            state.distortion_iteration = it
            if state.history:
                h = state.history[-1]
                state.history[-1] = IterationRecord(h.iteration, h.objective, h.constraint,
                                                    h.step_norm, jmin, h.wall_time)
            break
        state.last_valid_x = state.x.copy()
        obj = _response(cfg.objective, vm, cfg)
        con = _response(cfg.constraint.response, vm, cfg) if cfg.constraint else None
        objectives.append(obj.value)
        record = IterationRecord(it, obj.value, con.value if con else np.nan, 0.0, jmin,
                                 time.perf_counter() - t0)
        state.history.append(record)
        state.iteration = it
        if callback is not None:
            callback(state, vm)
        if it >= cfg.max_iterations:
            state.termination = "max_iterations"
            break
        if _stagnated(objectives):
            state.termination = "stagnation"
            break

        mapping = build_mapping(vm, cfg.filter, cfg.elasticity, prev_j0, cfg.tol)
        prev_j0 = mapping.j0 if mapping.j0 is not None else prev_j0
        g = np.where(keep, obj.dJdx, 0.0)
        dj = mapping.scaled(g)
        if con is not None:
            c = mapping.scaled(np.where(keep, con.dJdx, 0.0))
            violation = con.value - cfg.constraint.target
            if abs(violation) <= cfg.constraint.tolerance:
                violation = 0.0
            direction = project_constraint(dj, c, violation, mapping.mass, cfg.constraint.rho)
        else:
            direction = -dj
        if state.alpha is None:
            probe = as_nodal(mapping.apply(direction), n)
            peak = float(np.linalg.norm(probe, axis=1).max())
            diag = float(np.linalg.norm(np.ptp(mesh.nodes, axis=0)))
            state.alpha = FIRST_STEP_FRACTION * diag / peak if peak > 0 else 1.0
        x_before = state.x
        steepest_descent_step(state, mapping, g, state.alpha, direction)
        step = float(np.linalg.norm(as_nodal(state.x - x_before, n), axis=1).max())
        state.history[-1] = IterationRecord(record.iteration, record.objective, record.constraint,
                                            step, jmin, time.perf_counter() - t0)
        it += 1
    return state


def relative_reduction(state: OptimizationState) -> float:
    """Relative objective reduction at the last valid geometry."""
    f = state.objective_history
    return float((f[0] - f[-1]) / abs(f[0])) if f.size else 0.0


def write_history_csv(state: OptimizationState, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "objective", "constraint", "step_norm", "min_jacobian", "wall_time"])
        for r in state.history:
            w.writerow([r.iteration, repr(r.objective), repr(r.constraint), repr(r.step_norm),
                        repr(r.min_jacobian), f"{r.wall_time:.6f}"])
    return path
