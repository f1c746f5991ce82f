"""Deterministic test and benchmark meshes."""

from __future__ import annotations

import numpy as np

from .mesh import SurfaceMesh, VolumeMesh, submesh

FIXTURES = ("plate", "perforated_plate", "notched_block", "ball", "sphere")


def _grid_triangles(nx: int, ny: int, union_jack: bool) -> np.ndarray:
    """Split an (nx x ny) grid of quads (node id = j*(nx+1)+i) into triangles."""
    i, j = np.meshgrid(np.arange(nx), np.arange(ny), indexing="xy")
    i, j = i.ravel(), j.ravel()
    a = j * (nx + 1) + i
    b, c, d = a + 1, a + nx + 2, a + nx + 1
    flip = ((i + j) % 2 == 1) if union_jack else np.zeros_like(i, bool)
    t1 = np.where(flip[:, None], np.c_[a, b, d], np.c_[a, b, c])
    t2 = np.where(flip[:, None], np.c_[b, c, d], np.c_[a, c, d])
    return np.concatenate([t1, t2])


def plate(resolution: int = 40, size: float | None = None, jitter: float = 0.0,
          seed: int = 0) -> SurfaceMesh:
    """Flat square plate in the xy-plane with ``resolution`` squares per side.

    The element size is ``size / resolution`` (1 by default). Diagonals
    alternate in a checkerboard so that the unperturbed mesh is mirror
    symmetric about both centre lines. ``jitter`` moves interior nodes by up to
    that fraction of the element size.
    """
    if resolution < 2:
        raise ValueError("resolution must be >= 2")
    n = resolution
    size = float(n) if size is None else float(size)
    h = size / n
    x, y = np.meshgrid(np.linspace(0, size, n + 1), np.linspace(0, size, n + 1), indexing="xy")
    nodes = np.c_[x.ravel(), y.ravel(), np.zeros(x.size)]
    if jitter:
        rng = np.random.default_rng(seed)
        interior = (x.ravel() > 0) & (x.ravel() < size) & (y.ravel() > 0) & (y.ravel() < size)
        d = rng.uniform(-jitter * h, jitter * h, size=(x.size, 2))
        nodes[interior, :2] += d[interior]
    tris = _grid_triangles(n, n, union_jack=True)
    return SurfaceMesh(nodes, tris).validate()


def perforated_plate(resolution: int = 12, size: float = 10.0, hole_radius: float = 1.5,
                     grading: float = 1.15) -> SurfaceMesh:
    """Square plate with a central circular hole, meshed non-uniformly.

    An O-grid between the hole and the outer square with geometric radial
    grading: elements are small at the hole and large at the outer edge.
    """
    if resolution < 2:
        raise ValueError("resolution must be >= 2")
    nt = 8 * resolution
    nr = resolution
    theta = 2 * np.pi * np.arange(nt) / nt
    c = np.array([size / 2, size / 2])
    direction = np.c_[np.cos(theta), np.sin(theta)]
    inner = c + hole_radius * direction
    outer = c + (size / 2) * direction / np.abs(direction).max(axis=1)[:, None]
    steps = grading ** np.arange(nr)
    t = np.concatenate([[0.0], np.cumsum(steps) / steps.sum()])
    pts = inner[None] + t[:, None, None] * (outer - inner)[None]  # (nr+1, nt, 2)
    nodes = np.c_[pts.reshape(-1, 2), np.zeros((nr + 1) * nt)]
    k, m = np.meshgrid(np.arange(nr), np.arange(nt), indexing="ij")
    k, m = k.ravel(), m.ravel()
    a = k * nt + m
    b = k * nt + (m + 1) % nt
    cc = (k + 1) * nt + (m + 1) % nt
    d = (k + 1) * nt + m
    flip = (k + m) % 2 == 1
    t1 = np.where(flip[:, None], np.c_[a, b, d], np.c_[a, b, cc])
    t2 = np.where(flip[:, None], np.c_[b, cc, d], np.c_[a, cc, d])
    return SurfaceMesh(nodes, np.concatenate([t1, t2])).validate()


# Kuhn split of a hex into 6 tets along the (0,0,0)-(1,1,1) diagonal; corner
# bit 1 = +x, 2 = +y, 4 = +z
_KUHN = np.array([[0, 1, 3, 7], [0, 1, 5, 7], [0, 2, 3, 7],
                  [0, 2, 6, 7], [0, 4, 5, 7], [0, 4, 6, 7]])


def _hex_tets(nx: int, ny: int, nz: int, keep=None) -> np.ndarray:
    """Tets of a structured (nx, ny, nz) cell grid; node id = (k*(ny+1)+j)*(nx+1)+i."""
    i, j, k = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
    i, j, k = i.ravel(), j.ravel(), k.ravel()
    if keep is not None:
        mask = keep(i, j, k)
        i, j, k = i[mask], j[mask], k[mask]
    corner = np.stack([((k + (b >> 2 & 1)) * (ny + 1) + j + (b >> 1 & 1)) * (nx + 1) + i + (b & 1)
                       for b in range(8)], axis=1)
    return corner[:, _KUHN].reshape(-1, 4)


def _orient(nodes: np.ndarray, tets: np.ndarray) -> np.ndarray:
    p = nodes[tets]
    neg = np.linalg.det(p[:, 1:] - p[:, :1]) < 0
    tets = tets.copy()
    tets[neg] = tets[neg][:, [0, 1, 3, 2]]
    return tets


def _compact(nodes: np.ndarray, tets: np.ndarray):
    used = np.unique(tets)
    remap = np.full(len(nodes), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    return nodes[used], remap[tets]


def notched_block(resolution: int = 8, dims=(2.0, 1.0, 1.0), notch=(0.4, 0.5)) -> VolumeMesh:
    """Block with a full-depth slot cut into the top face.

    ``resolution`` cells per unit length; ``notch`` = (slot width, slot depth)
    centred in x. Nodes on the bottom face (z = 0) are non-design; the
    remaining boundary is the design surface.
    """
    if resolution < 2:
        raise ValueError("resolution must be >= 2")
    lx, ly, lz = dims
    nx, ny, nz = (max(2, int(round(d * resolution))) for d in dims)
    hx, hz = lx / nx, lz / nz
    w, depth = notch
    x0, x1 = lx / 2 - w / 2, lx / 2 + w / 2

    def keep(i, j, k):
        xc, zc = (i + 0.5) * hx, (k + 0.5) * hz
        return ~((xc > x0) & (xc < x1) & (zc > lz - depth))

    x, y, z = np.meshgrid(np.linspace(0, lx, nx + 1), np.linspace(0, ly, ny + 1),
                          np.linspace(0, lz, nz + 1), indexing="ij")
    nodes = np.c_[x.transpose(2, 1, 0).ravel(), y.transpose(2, 1, 0).ravel(),
                  z.transpose(2, 1, 0).ravel()]
    tets = _hex_tets(nx, ny, nz, keep)
    nodes, tets = _compact(nodes, tets)
    tets = _orient(nodes, tets)
    design = nodes[:, 2] > 1e-12 * lz
    return VolumeMesh(nodes, tets, design).validate()


def ball(resolution: int = 6, radius: float = 1.0) -> VolumeMesh:
    """Tetrahedral ball from a Kuhn-split cube grid mapped onto the sphere.

    Uses the smooth cube-to-ball map
    ``x' = x sqrt(1 - y^2/2 - z^2/2 + y^2 z^2/3)`` (cyclically).
    """
    if resolution < 2:
        raise ValueError("resolution must be >= 2")
    n = 2 * resolution
    g = np.linspace(-1, 1, n + 1)
    x, y, z = np.meshgrid(g, g, g, indexing="ij")
    x, y, z = (a.transpose(2, 1, 0).ravel() for a in (x, y, z))
    x2, y2, z2 = x * x, y * y, z * z
    nodes = radius * np.c_[
        x * np.sqrt(1 - y2 / 2 - z2 / 2 + y2 * z2 / 3),
        y * np.sqrt(1 - z2 / 2 - x2 / 2 + z2 * x2 / 3),
        z * np.sqrt(1 - x2 / 2 - y2 / 2 + x2 * y2 / 3),
    ]
    tets = _orient(nodes, _hex_tets(n, n, n))
    return VolumeMesh(nodes, tets).validate()


def sphere(resolution: int = 6, radius: float = 1.0) -> SurfaceMesh:
    """Closed triangulated sphere (boundary of :func:`ball`)."""
    return ball(resolution, radius).boundary.validate()


def design_surface(vm: VolumeMesh):
    """Boundary triangles touching at least one design node.

    Returns the design surface and the map from its local nodes to volume
    node indices. Its boundary curve separates design from non-design faces.
    """
    sm, bmap = vm.boundary, vm.boundary_nodes
    tri_design = sm.design_flags[sm.triangles].any(axis=1)
    ds, local = submesh(sm, tri_design)
    return ds, bmap[local]


def generate(name: str, resolution: int | None = None, **kw):
    if name == "plate":
        return plate(resolution or 40, **kw)
    if name == "perforated_plate":
        return perforated_plate(resolution or 12, **kw)
    if name == "notched_block":
        return notched_block(resolution or 8, **kw)
    if name == "ball":
        return ball(resolution or 6, **kw)
    if name == "sphere":
        return sphere(resolution or 6, **kw)
    raise ValueError(f"unknown fixture {name!r}; choose from {FIXTURES}")
