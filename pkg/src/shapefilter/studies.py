"""Desk-scale numerical studies: consistency, kernel profiles, conditioning, timing.

Each study returns plain rows (lists of dicts) so the CLI can write CSV and
tests can assert on the same numbers.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .explicit import KERNELS, ExplicitFilter, ExplicitFilterConfig, KernelSpec, kernel_eval, kernel_peak
from .fem import DEFAULT_ELASTICITY
from .implicit import (
    BulkSurfaceFilterOperator,
    SurfaceFilterOperator,
    helmholtz_radius_for_span,
    numerical_kernel_row,
)
from .linalg import condition_number
from .mesh import SurfaceMesh, VolumeMesh, as_nodal
from .responses import synthetic_uniform_sensitivity

# ---------------------------------------------------------------------------
# consistency


def uniformity_deviation(field, direction=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Per-node relative deviation ``|f_i - mean| / |mean|`` of the component along ``direction``."""
    F = as_nodal(field)
    v = F @ np.asarray(direction, dtype=float)
    ref = v.mean()
    if ref == 0:
        raise ValueError("field has zero mean along the direction")
    return np.abs(v - ref) / abs(ref)


def surface_consistency(sm: SurfaceMesh, filt, direction=(0.0, 0.0, 1.0)) -> dict:
    """Scaled control sensitivities of the uniform continuous field and their deviation."""
    g = synthetic_uniform_sensitivity(sm, direction)
    dj = filt.scaled_sensitivities(g)
    dev = uniformity_deviation(dj, direction)
    k = int(np.argmax(dev))
    return {"scaled": dj, "deviation": dev, "max_deviation": float(dev[k]), "worst_node": k}


def bulk_consistency(vm: VolumeMesh, opr: BulkSurfaceFilterOperator, direction=(0.0, 0.0, 1.0)) -> dict:
    """Bulk analogue with ``dJ/dx = M_O (direction per node)``."""
    d = np.asarray(direction, dtype=float)
    g = opr.mass @ np.tile(d, (vm.n_nodes, 1))
    dj = opr.scaled_sensitivities(g)
    dev = uniformity_deviation(dj, d)
    k = int(np.argmax(dev))
    return {"scaled": dj, "deviation": dev, "max_deviation": float(dev[k]), "worst_node": k}


# ---------------------------------------------------------------------------
# kernel profiles


def centre_node(sm: SurfaceMesh) -> int:
    c = sm.nodes.mean(axis=0)
    return int(np.argmin(np.linalg.norm(sm.nodes - c, axis=1)))


@dataclass
class KernelProfile:
    distance: np.ndarray
    values: dict  # name -> normalized profile at every node
    centre: int


def kernel_profiles(sm: SurfaceMesh, radius: float, kernels=KERNELS) -> KernelProfile:
    """Peak-normalized explicit kernels and the numerical Helmholtz kernel at the centre node.

    All kernels share the same ``radius`` (the Helmholtz radius for the
    implicit one); explicit kernels are evaluated at the node distances.
    """
    c = centre_node(sm)
    d = np.linalg.norm(sm.nodes - sm.nodes[c], axis=1)
    values = {}
    for fam in kernels:
        spec = KernelSpec(fam, radius)
        values[fam] = kernel_eval(spec, d) / kernel_peak(spec)
    values["helmholtz"] = numerical_kernel_row(SurfaceFilterOperator(sm, radius, probe=False), c)
    return KernelProfile(d, values, c)


def normalized_rms(a: np.ndarray, b: np.ndarray, level: float = 0.01) -> float:
    """RMS of ``a - b`` over nodes where either profile is at least ``level`` of its peak.

    Both profiles are peak-normalized, so this is relative to the unit peak.
    """
    mask = np.maximum(a, b) >= level
    return float(np.sqrt(np.mean((a[mask] - b[mask]) ** 2)))


# ---------------------------------------------------------------------------
# conditioning


def explicit_condition(sm: SurfaceMesh, family: str, span: float) -> float:
    f = ExplicitFilter(sm, ExplicitFilterConfig(KernelSpec.from_span(family, span)))
    return condition_number(f.matrix().toarray(), symmetric=False)


def implicit_condition(sm: SurfaceMesh, span: float, h: float = 1.0) -> float:
    r = helmholtz_radius_for_span(span / h) * h
    A = SurfaceFilterOperator(sm, r, probe=False).dense_filter_matrix()
    return condition_number(A, symmetric=False)


def condition_study(sm: SurfaceMesh, ratios, kernels=("gaussian", "linear_hat", "green_regularized"),
                    h: float | None = None) -> list[dict]:
    """Condition numbers of the scalar filter matrices per kernel and ``p/a``.

    ``h`` is the element size ``a`` (default: mean edge length rounded as on
    the structured plate, i.e. the grid spacing).
    """
    if sm.n_nodes > 3000:
        raise ValueError("dense condition study limited to 3000 nodes")
    h = _element_size(sm) if h is None else h
    rows = []
    for ratio in ratios:
        span = ratio * h
        for fam in kernels:
            rows.append({"kernel": fam, "ratio": ratio, "cond": explicit_condition(sm, fam, span)})
        rows.append({"kernel": "helmholtz", "ratio": ratio, "cond": implicit_condition(sm, span, h)})
    return rows


def _element_size(sm: SurfaceMesh) -> float:
    # squares split in two: the grid spacing is the median edge length
    lengths = np.linalg.norm(np.diff(sm.nodes[sm.edges], axis=1)[:, 0], axis=1)
    return float(np.median(lengths))


def condition_claims(rows: list[dict]) -> dict:
    """Ordinal checks: implicit below Gaussian/linear per ratio; explicit strictly increasing."""
    table: dict = {}
    for r in rows:
        table.setdefault(r["kernel"], {})[r["ratio"]] = r["cond"]
    ratios = sorted(table["helmholtz"])
    out = {}
    for fam in ("gaussian", "linear_hat"):
        if fam not in table:
            continue
        c = [table[fam][q] for q in ratios]
        out[f"implicit_below_{fam}"] = all(table["helmholtz"][q] < table[fam][q] for q in ratios)
        out[f"{fam}_increasing"] = all(a < b for a, b in zip(c, c[1:]))
    return out


# ---------------------------------------------------------------------------
# timing


def _median_time(fn, repetitions: int) -> float:
    times = []
    for _ in range(repetitions):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return float(np.median(times))


def timing_study(sm: SurfaceMesh, ratios, repetitions: int = 3, family: str = "gaussian",
                 vm: VolumeMesh | None = None, h: float | None = None, seed: int = 0) -> list[dict]:
    """Median wall time of one filter application per ``p/a``.

    Times exclude construction: explicit stored (sparse matrix product),
    explicit matrix-free (per-node neighbour cycling) and one implicit
    surface CG solve; with ``vm`` also one bulk-surface solve.
    """
    if repetitions < 3:
        raise ValueError("repetitions must be >= 3")
    h = _element_size(sm) if h is None else h
    rng = np.random.default_rng(seed)
    s = rng.standard_normal(3 * sm.n_nodes)
    rows = []
    for ratio in ratios:
        span = ratio * h
        f = ExplicitFilter(sm, ExplicitFilterConfig(KernelSpec.from_span(family, span)))
        f.matrix()
        r = helmholtz_radius_for_span(ratio) * h
        opr = SurfaceFilterOperator(sm, r, probe=False)
        entries = {
            "explicit_stored": lambda: f.forward(s, "stored"),
            "explicit_matrix_free": lambda: f.forward(s, "matrix_free"),
            "implicit_surface": lambda: opr.forward(s),
        }
        if vm is not None:
            bopr = BulkSurfaceFilterOperator(vm, DEFAULT_ELASTICITY, r_gamma=r)
            sv = rng.standard_normal(3 * vm.n_nodes)
            entries["bulk_surface"] = lambda: bopr.forward(sv)
        for name, fn in entries.items():
            fn()  # warm-up
            rows.append({"method": name, "ratio": ratio,
                         "median_seconds": _median_time(fn, repetitions)})
    return rows


def fit_slopes(rows: list[dict]) -> dict:
    """Least-squares slope of median time against ``p/a`` per method."""
    out = {}
    for name in sorted({r["method"] for r in rows}):
        pts = np.array([(r["ratio"], r["median_seconds"]) for r in rows if r["method"] == name])
        out[name] = float(np.polyfit(pts[:, 0], pts[:, 1], 1)[0]) if len(pts) > 1 else 0.0
    return out
