"""Triangle and tetrahedral meshes, file I/O and geometric queries.

All nodal vector fields share one flat layout: node-major, xyz-minor, so
node ``i`` owns entries ``3*i, 3*i+1, 3*i+2``.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

VTK_TRIANGLE = 5
VTK_TETRA = 10

DEGENERATE_RTOL = 1e-12


class MeshError(ValueError):
    """Invalid mesh topology or geometry."""


class DegenerateElementError(MeshError):
    def __init__(self, index: int, measure: float):
        super().__init__(f"degenerate element {index} (measure {measure:.3e})")
        self.index = index


class MeshParseError(MeshError):
    pass


# ---------------------------------------------------------------------------
# field helpers


def as_nodal(values, n: int | None = None) -> np.ndarray:
    """View a flat 3n vector as an (n, 3) array (no copy when possible)."""
    arr = np.asarray(values, dtype=float)
    if arr.ndim == 2 and arr.shape[1] == 3:
        out = arr
    else:
        if arr.ndim != 1 or arr.size % 3:
            raise ValueError(f"nodal vector length {arr.size} is not divisible by 3")
        out = arr.reshape(-1, 3)
    if n is not None and out.shape[0] != n:
        raise ValueError(f"field has {out.shape[0]} nodes, mesh has {n}")
    return out


def flat(values) -> np.ndarray:
    """Flatten an (n, 3) array to the shared node-major 3n layout."""
    return np.ascontiguousarray(values, dtype=float).reshape(-1)


# ---------------------------------------------------------------------------
# meshes


def _triangle_area_vectors(nodes: np.ndarray, tris: np.ndarray) -> np.ndarray:
    p = nodes[tris]
    return 0.5 * np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])


def _edges_of(tris: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Unique undirected edges (sorted rows, lexicographic) and their incidence counts."""
    e = np.concatenate([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]])
    e = np.sort(e, axis=1)
    return np.unique(e, axis=0, return_counts=True)


@dataclass(frozen=True, eq=False)
class SurfaceMesh:
    """Triangulated surface.

    ``boundary_edges`` are the edges used by exactly one triangle, sorted
    lexicographically on (min node, max node); that order defines the edge
    index used for tie-breaking in :func:`closest_point_projection`.
    """

    nodes: np.ndarray
    triangles: np.ndarray
    design_flags: np.ndarray | None = None
    groups: dict = field(default_factory=dict)

    def __post_init__(self):
        nodes = np.array(self.nodes, dtype=float).reshape(-1, 3)
        tris = np.array(self.triangles, dtype=np.int64).reshape(-1, 3)
        if tris.size and (tris.min() < 0 or tris.max() >= len(nodes)):
            raise MeshError("triangle node index out of range")
        flags = self.design_flags
        flags = np.ones(len(nodes), bool) if flags is None else np.array(flags, bool)
        if flags.shape != (len(nodes),):
            raise MeshError("design_flags length does not match node count")
        nodes.flags.writeable = False
        tris.flags.writeable = False
        flags.flags.writeable = False
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "triangles", tris)
        object.__setattr__(self, "design_flags", flags)

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @cached_property
    def area_vectors(self) -> np.ndarray:
        return _triangle_area_vectors(self.nodes, self.triangles)

    @cached_property
    def areas(self) -> np.ndarray:
        return np.linalg.norm(self.area_vectors, axis=1)

    @property
    def area(self) -> float:
        return float(self.areas.sum())

    @cached_property
    def edges(self) -> np.ndarray:
        return _edges_of(self.triangles)[0]

    @cached_property
    def boundary_edges(self) -> np.ndarray:
        e, counts = _edges_of(self.triangles)
        if np.any(counts > 2):
            raise MeshError("non-manifold edge shared by more than two triangles")
        out = e[counts == 1]
        out.flags.writeable = False
        return out

    @cached_property
    def boundary_nodes(self) -> np.ndarray:
        return np.unique(self.boundary_edges)

    @property
    def is_closed(self) -> bool:
        return len(self.boundary_edges) == 0

    @cached_property
    def mean_edge_length(self) -> float:
        e = self.edges
        return float(np.linalg.norm(self.nodes[e[:, 1]] - self.nodes[e[:, 0]], axis=1).mean())

    @cached_property
    def kdtree(self) -> cKDTree:
        return cKDTree(self.nodes)

    def validate(self) -> "SurfaceMesh":
        a = self.areas
        if a.size:
            tol = DEGENERATE_RTOL * a.mean()
            bad = np.flatnonzero(a <= tol)
            if bad.size:
                raise DegenerateElementError(int(bad[0]), float(a[bad[0]]))
        self.boundary_edges  # raises on non-manifold edges
        return self

    def with_nodes(self, nodes) -> "SurfaceMesh":
        return SurfaceMesh(nodes, self.triangles, self.design_flags, self.groups)


@dataclass(frozen=True, eq=False)
class VolumeMesh:
    """Linear tetrahedral mesh.

    Construction does not reject inverted elements, because deformed
    configurations produced during optimization may contain them; call
    :meth:`validate` for the reference-configuration checks.
    """

    nodes: np.ndarray
    tets: np.ndarray
    design_flags: np.ndarray | None = None
    groups: dict = field(default_factory=dict)

    def __post_init__(self):
        nodes = np.array(self.nodes, dtype=float).reshape(-1, 3)
        tets = np.array(self.tets, dtype=np.int64).reshape(-1, 4)
        if tets.size and (tets.min() < 0 or tets.max() >= len(nodes)):
            raise MeshError("tet node index out of range")
        flags = self.design_flags
        flags = np.ones(len(nodes), bool) if flags is None else np.array(flags, bool)
        if flags.shape != (len(nodes),):
            raise MeshError("design_flags length does not match node count")
        nodes.flags.writeable = False
        tets.flags.writeable = False
        flags.flags.writeable = False
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "tets", tets)
        object.__setattr__(self, "design_flags", flags)

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @cached_property
    def jacobians(self) -> np.ndarray:
        """Signed reference-to-physical Jacobian determinant of every tet."""
        p = self.nodes[self.tets]
        return np.linalg.det(p[:, 1:] - p[:, :1])

    @property
    def volumes(self) -> np.ndarray:
        return self.jacobians / 6.0

    @property
    def volume(self) -> float:
        return float(self.volumes.sum())

    @cached_property
    def _boundary(self):
        return _extract_boundary(self)

    @property
    def boundary(self) -> SurfaceMesh:
        return self._boundary[0]

    @property
    def boundary_nodes(self) -> np.ndarray:
        """Volume node index of each boundary-local node."""
        return self._boundary[1]

    @cached_property
    def kdtree(self) -> cKDTree:
        return cKDTree(self.nodes)

    @cached_property
    def mean_edge_length(self) -> float:
        t = self.tets
        pairs = np.concatenate([t[:, [i, j]] for i in range(4) for j in range(i + 1, 4)])
        pairs = np.unique(np.sort(pairs, axis=1), axis=0)
        return float(np.linalg.norm(self.nodes[pairs[:, 1]] - self.nodes[pairs[:, 0]], axis=1).mean())

    def validate(self) -> "VolumeMesh":
        j = self.jacobians
        if j.size:
            tol = DEGENERATE_RTOL * np.abs(j).mean()
            bad = np.flatnonzero(j <= tol)
            if bad.size:
                raise DegenerateElementError(int(bad[0]), float(j[bad[0]] / 6.0))
        self._boundary  # raises on non-manifold faces
        return self

    def with_nodes(self, nodes) -> "VolumeMesh":
        return VolumeMesh(nodes, self.tets, self.design_flags, self.groups)


# outward faces of a positively oriented tet (a, b, c, d)
_TET_FACES = np.array([[1, 2, 3], [0, 3, 2], [0, 1, 3], [0, 2, 1]])


def _extract_boundary(vm: VolumeMesh) -> tuple[SurfaceMesh, np.ndarray]:
    faces = vm.tets[:, _TET_FACES].reshape(-1, 3)
    keys = np.sort(faces, axis=1)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    if np.any(counts > 2):
        raise MeshError("non-manifold face shared by more than two tets")
    bfaces = faces[counts[inverse] == 1]
    node_map = np.unique(bfaces)
    local = np.full(vm.n_nodes, -1, dtype=np.int64)
    local[node_map] = np.arange(len(node_map))
    sm = SurfaceMesh(vm.nodes[node_map], local[bfaces], vm.design_flags[node_map])
    return sm, node_map


def extract_boundary(vm: VolumeMesh) -> tuple[SurfaceMesh, np.ndarray]:
    """Outward-oriented boundary surface of a tet mesh.

    Returns the surface (with compacted node numbering) and the array mapping
    each boundary-local node index to its volume node index.
    """
    return vm._boundary


def submesh(sm: SurfaceMesh, tri_mask) -> tuple[SurfaceMesh, np.ndarray]:
    """Surface made of the selected triangles, plus its local->parent node map."""
    tris = sm.triangles[np.asarray(tri_mask, bool)]
    node_map = np.unique(tris)
    local = np.full(sm.n_nodes, -1, dtype=np.int64)
    local[node_map] = np.arange(len(node_map))
    return SurfaceMesh(sm.nodes[node_map], local[tris], sm.design_flags[node_map]), node_map


# ---------------------------------------------------------------------------
# geometric queries


def radius_neighbors(mesh, node_index: int, radius: float) -> set[int]:
    """Nodes within Euclidean distance ``radius`` (inclusive) of a node."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    hits = mesh.kdtree.query_ball_point(mesh.nodes[node_index], radius)
    return set(int(i) for i in hits) | {int(node_index)}


def element_jacobian(vm: VolumeMesh, e: int) -> float:
    """Signed Jacobian determinant (6x the signed volume) of tet ``e``."""
    p = vm.nodes[vm.tets[e]]
    return float(np.linalg.det(p[1:] - p[0]))


def _project_on_segments(p: np.ndarray, a: np.ndarray, b: np.ndarray):
    """Closest points of p on every segment [a_k, b_k] and squared distances."""
    ab = b - a
    denom = np.einsum("ij,ij->i", ab, ab)
    t = np.einsum("ij,ij->i", p - a, ab) / denom
    t = np.clip(t, 0.0, 1.0)
    q = a + t[:, None] * ab
    d2 = np.einsum("ij,ij->i", p - q, p - q)
    return q, d2


def closest_point_projection(sm: SurfaceMesh, p) -> np.ndarray:
    """Nearest point on the piecewise-linear boundary curve of a surface.

    Ties are resolved in favour of the lowest boundary-edge index.
    """
    be = sm.boundary_edges
    if len(be) == 0:
        raise MeshError("surface has no boundary edges (closed surface)")
    p = np.asarray(p, dtype=float)
    q, d2 = _project_on_segments(p, sm.nodes[be[:, 0]], sm.nodes[be[:, 1]])
    return q[int(np.argmin(d2))]


def boundary_distances(sm: SurfaceMesh) -> np.ndarray:
    """Distance from every node to the surface's boundary curve."""
    be = sm.boundary_edges
    if len(be) == 0:
        raise MeshError("surface has no boundary edges (closed surface)")
    a, b = sm.nodes[be[:, 0]], sm.nodes[be[:, 1]]
    out = np.empty(sm.n_nodes)
    # chunked to bound memory at nodes x edges
    chunk = max(1, 2_000_000 // max(len(be), 1))
    for start in range(0, sm.n_nodes, chunk):
        x = sm.nodes[start:start + chunk, None, :]
        ab = b - a
        t = np.clip(np.einsum("nkj,kj->nk", x - a, ab) / np.einsum("kj,kj->k", ab, ab), 0.0, 1.0)
        q = a + t[..., None] * ab
        out[start:start + chunk] = np.sqrt(((x - q) ** 2).sum(-1).min(axis=1))
    return out


# ---------------------------------------------------------------------------
# file I/O


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def write_vtk(mesh, fields: dict | None, path, title: str = "shapefilter") -> Path:
    """Write a legacy ASCII VTK unstructured grid with point data.

    ``fields`` maps names to nodal scalars (length n) or nodal vectors
    (length 3n or shape (n, 3)). Output is byte-identical for identical input.
    """
    path = Path(path)
    nodes = mesh.nodes
    n = len(nodes)
    if isinstance(mesh, VolumeMesh):
        cells, ctype = mesh.tets, VTK_TETRA
    else:
        cells, ctype = mesh.triangles, VTK_TRIANGLE
    k = cells.shape[1]
    lines = ["# vtk DataFile Version 3.0", title, "ASCII", "DATASET UNSTRUCTURED_GRID",
             f"POINTS {n} double"]
    lines += [" ".join(_fmt(c) for c in row) for row in nodes]
    lines.append(f"CELLS {len(cells)} {len(cells) * (k + 1)}")
    lines += [f"{k} " + " ".join(str(int(i)) for i in row) for row in cells]
    lines.append(f"CELL_TYPES {len(cells)}")
    lines += [str(ctype)] * len(cells)
    fields = fields or {}
    if fields:
        lines.append(f"POINT_DATA {n}")
    for name, values in fields.items():
        arr = np.asarray(values, dtype=float)
        if arr.ndim == 1 and arr.size == n:
            lines.append(f"SCALARS {name} double 1")
            lines.append("LOOKUP_TABLE default")
            lines += [_fmt(v) for v in arr]
        elif arr.size == 3 * n:
            lines.append(f"VECTORS {name} double")
            lines += [" ".join(_fmt(c) for c in row) for row in arr.reshape(n, 3)]
        else:
            raise ValueError(f"field {name!r} has length {arr.size}, expected {n} or {3 * n}")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n")
    return path


def read_vtk(path) -> dict:
    """Parse a legacy ASCII VTK unstructured grid.

    Returns a dict with ``points`` (n, 3), ``cells`` (list of index arrays),
    ``cell_types`` and ``point_data`` (name -> array).
    """
    tokens = Path(path).read_text().split()
    # header: 2 fixed lines are free text, so locate the keywords instead
    try:
        i = tokens.index("ASCII")
    except ValueError:
        raise MeshParseError(f"{path}: only ASCII legacy VTK is supported") from None
    out = {"points": None, "cells": [], "cell_types": None, "point_data": {}}
    npts = 0
    section = None

    def take(count, conv):
        nonlocal i
        if i + count > len(tokens):
            raise MeshParseError(f"{path}: unexpected end of file")
        vals = tokens[i:i + count]
        i += count
        try:
            return np.array([conv(v) for v in vals])
        except ValueError as exc:
            raise MeshParseError(f"{path}: {exc}") from None

    i += 1
    try:
        while i < len(tokens):
            kw = tokens[i].upper()
            if kw == "DATASET":
                if tokens[i + 1].upper() != "UNSTRUCTURED_GRID":
                    raise MeshParseError(f"{path}: dataset {tokens[i + 1]} not supported")
                i += 2
            elif kw == "POINTS":
                npts = int(tokens[i + 1])
                i += 3
                out["points"] = take(3 * npts, float).reshape(npts, 3)
            elif kw == "CELLS":
                ncell, size = int(tokens[i + 1]), int(tokens[i + 2])
                i += 3
                raw = take(size, int)
                cells, j = [], 0
                for _ in range(ncell):
                    k = raw[j]
                    cells.append(raw[j + 1:j + 1 + k])
                    j += k + 1
                out["cells"] = cells
            elif kw == "CELL_TYPES":
                ncell = int(tokens[i + 1])
                i += 2
                out["cell_types"] = take(ncell, int)
            elif kw in ("POINT_DATA", "CELL_DATA"):
                section = kw
                i += 2
            elif kw == "SCALARS":
                name = tokens[i + 1]
                ncomp = 1
                i += 3
                if i < len(tokens) and tokens[i].isdigit():
                    ncomp = int(tokens[i])
                    i += 1
                if tokens[i].upper() == "LOOKUP_TABLE":
                    i += 2
                vals = take(npts * ncomp, float)
                if section == "POINT_DATA":
                    out["point_data"][name] = vals if ncomp == 1 else vals.reshape(npts, ncomp)
            elif kw in ("VECTORS", "NORMALS"):
                name = tokens[i + 1]
                i += 3
                vals = take(3 * npts, float).reshape(npts, 3)
                if section == "POINT_DATA":
                    out["point_data"][name] = vals
            else:
                raise MeshParseError(f"{path}: unexpected keyword {tokens[i]!r}")
    except (IndexError, ValueError) as exc:
        if isinstance(exc, MeshParseError):
            raise
        raise MeshParseError(f"{path}: malformed file ({exc})") from None
    if out["points"] is None:
        raise MeshParseError(f"{path}: no POINTS section")
    return out


def read_obj(path) -> tuple[np.ndarray, np.ndarray, dict]:
    """Vertices, triangles and named groups (group -> node indices) of an OBJ file."""
    verts, tris = [], []
    groups: dict[str, set] = {}
    current = None
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        try:
            if parts[0] == "v":
                verts.append([float(c) for c in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(tok.split("/")[0]) for tok in parts[1:]]
                idx = [k - 1 if k > 0 else len(verts) + k for k in idx]
                if len(idx) < 3:
                    raise ValueError("face with fewer than 3 vertices")
                for k in range(1, len(idx) - 1):
                    tris.append([idx[0], idx[k], idx[k + 1]])
                if current is not None:
                    groups[current].update(idx)
            elif parts[0] in ("g", "o"):
                current = parts[1] if len(parts) > 1 else None
                if current is not None:
                    groups.setdefault(current, set())
        except ValueError as exc:
            raise MeshParseError(f"{path}:{lineno}: {exc}") from None
    if not verts:
        raise MeshParseError(f"{path}: no vertices")
    groups = {k: np.array(sorted(v), dtype=np.int64) for k, v in groups.items()}
    return np.array(verts, float), np.array(tris, np.int64).reshape(-1, 3), groups


def write_obj(sm: SurfaceMesh, path) -> Path:
    path = Path(path)
    lines = [f"v {_fmt(x)} {_fmt(y)} {_fmt(z)}" for x, y, z in sm.nodes]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in sm.triangles]
    path.write_text("\n".join(lines) + "\n")
    return path


def design_flags_from_sidecar(path, n: int, groups: dict | None = None) -> np.ndarray:
    """Per-node design flags from a sidecar JSON file.

    Format::

        {"default": true,
         "ranges": [{"start": 0, "stop": 10, "design": false}],
         "groups": {"clamp": false}}

    ``ranges`` use half-open node-index intervals; ``groups`` refer to named
    groups from the mesh file (OBJ ``g``/``o`` statements). Later entries win.
    """
    spec = json.loads(Path(path).read_text())
    unknown = set(spec) - {"version", "default", "ranges", "groups"}
    if unknown:
        raise MeshParseError(f"{path}: unknown keys {sorted(unknown)}")
    flags = np.full(n, bool(spec.get("default", True)))
    for r in spec.get("ranges", []):
        start, stop = int(r["start"]), int(r["stop"])
        if not 0 <= start <= stop <= n:
            raise MeshParseError(f"{path}: range [{start}, {stop}) outside 0..{n}")
        flags[start:stop] = bool(r["design"])
    for name, design in spec.get("groups", {}).items():
        if not groups or name not in groups:
            raise MeshParseError(f"{path}: unknown group {name!r}")
        flags[groups[name]] = bool(design)
    return flags


def write_design_sidecar(flags, path) -> Path:
    """Write design flags as a run-length encoded sidecar file."""
    flags = np.asarray(flags, bool)
    ranges, start = [], 0
    for k in range(1, len(flags) + 1):
        if k == len(flags) or flags[k] != flags[start]:
            if not flags[start]:
                ranges.append({"start": start, "stop": k, "design": False})
            start = k
    path = Path(path)
    path.write_text(json.dumps({"version": 1, "default": True, "ranges": ranges}, indent=1) + "\n")
    return path


def _sidecar_for(path: Path) -> Path | None:
    cand = path.with_suffix(".design.json")
    return cand if cand.exists() else None


def load_mesh(path, kind: str = "surface", design_sidecar=None):
    """Load and validate a surface or volume mesh.

    VTK files may carry cell types 5 (triangle) and 10 (tetra); OBJ files are
    surface-only. Design flags are read from ``design_sidecar`` if given, else
    from ``<stem>.design.json`` next to the mesh, else from a ``design`` point
    scalar in a VTK file; all nodes default to design.
    """
    if kind not in ("surface", "volume"):
        raise ValueError("kind must be 'surface' or 'volume'")
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    groups: dict = {}
    flags = None
    suffix = path.suffix.lower()
    if suffix == ".obj":
        if kind != "surface":
            raise MeshParseError("OBJ files hold triangle surfaces only")
        nodes, cells, groups = read_obj(path)
    elif suffix == ".vtk":
        data = read_vtk(path)
        nodes = data["points"]
        want = VTK_TETRA if kind == "volume" else VTK_TRIANGLE
        types = data["cell_types"]
        if types is None:
            types = np.array([VTK_TETRA if len(c) == 4 else VTK_TRIANGLE for c in data["cells"]])
        cells = [c for c, t in zip(data["cells"], types) if t == want]
        width = 4 if kind == "volume" else 3
        if any(len(c) != width for c in cells):
            raise MeshParseError(f"{path}: cell with wrong node count")
        cells = np.array(cells, np.int64).reshape(-1, width)
        if "design" in data["point_data"]:
            flags = np.asarray(data["point_data"]["design"]) > 0.5
    else:
        raise MeshParseError(f"{path}: unsupported extension {suffix!r}")

    sidecar = Path(design_sidecar) if design_sidecar else _sidecar_for(path)
    if sidecar is not None:
        flags = design_flags_from_sidecar(sidecar, len(nodes), groups)

    if kind == "volume":
        p = nodes[cells]
        j = np.linalg.det(p[:, 1:] - p[:, :1])
        cells = cells.copy()
        neg = j < 0
        cells[neg, 2], cells[neg, 3] = cells[neg, 3], cells[neg, 2].copy()
        return VolumeMesh(nodes, cells, flags, groups).validate()
    return SurfaceMesh(nodes, cells, flags, groups).validate()


def file_sha256(path) -> str:
    import hashlib

    h = hashlib.sha256()
    with open(os.fspath(path), "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()
