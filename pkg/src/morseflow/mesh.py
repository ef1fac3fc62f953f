"""Simplicial reference meshes and the deformation family acting on them.

Meshes are immutable after construction. Boundary facets carry outward unit
normals, the index of their unique adjacent cell, and a connected-component
id. Components are numbered by the lexicographically smallest vertex
coordinate they touch (interval: left end is component 0; annulus: outer
circle is component 0).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.spatial import Delaunay

from .errors import DegenerateFamilyError, MeshFailure

__all__ = [
    "Mesh",
    "DiffeoFamily",
    "build_interval_mesh",
    "build_disk_mesh",
    "build_annulus_mesh",
    "build_polygon_mesh",
    "star_scale",
    "radial_scale",
    "affine_family",
    "identity_family",
    "boundary_velocity_normal",
    "nanson_factors",
    "mesh_to_text",
    "mesh_from_text",
]

_NORMAL_TOL = 1e-12


@dataclass(frozen=True)
class Mesh:
    """Conforming simplicial mesh of a 1D or 2D reference domain.

    vertices: (nv, dim) coordinates.
    cells: (nc, dim+1) vertex indices, positively oriented in 2D.
    facet_vertices: (nbf, dim) vertex indices of boundary facets.
    facet_normals: (nbf, dim) outward unit normals.
    facet_cells: (nbf,) index of the unique cell adjacent to each facet.
    facet_components: (nbf,) connected-component id of each facet.
    geometry: construction metadata ({"kind": "disk", "radius": ...} etc.).
    """

    dimension: int
    vertices: np.ndarray
    cells: np.ndarray
    facet_vertices: np.ndarray
    facet_normals: np.ndarray
    facet_cells: np.ndarray
    facet_components: np.ndarray
    geometry: dict = field(default_factory=dict)

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_cells(self) -> int:
        return self.cells.shape[0]

    @property
    def n_facets(self) -> int:
        return self.facet_vertices.shape[0]

    @property
    def n_components(self) -> int:
        return int(self.facet_components.max()) + 1 if self.n_facets else 0

    def boundary_components(self) -> list[np.ndarray]:
        """Facet indices of each connected boundary component."""
        return [
            np.nonzero(self.facet_components == i)[0]
            for i in range(self.n_components)
        ]

    def boundary_vertex_indices(self) -> np.ndarray:
        return np.unique(self.facet_vertices.ravel())

    def cell_measures(self) -> np.ndarray:
        """Length (1D) or area (2D) of every cell."""
        v = self.vertices[self.cells]
        if self.dimension == 1:
            return np.abs(v[:, 1, 0] - v[:, 0, 0])
        e1 = v[:, 1] - v[:, 0]
        e2 = v[:, 2] - v[:, 0]
        return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])

    def facet_measures(self) -> np.ndarray:
        """Facet length in 2D; the 0-dimensional point measure 1.0 in 1D."""
        if self.dimension == 1:
            return np.ones(self.n_facets)
        v = self.vertices[self.facet_vertices]
        return np.linalg.norm(v[:, 1] - v[:, 0], axis=1)

    def facet_midpoints(self) -> np.ndarray:
        return self.vertices[self.facet_vertices].mean(axis=1)

    def total_measure(self) -> float:
        return float(self.cell_measures().sum())


def _connected_components(facets: np.ndarray) -> np.ndarray:
    """Group facets sharing a vertex; returns a raw component id per facet."""
    parent = list(range(len(facets)))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    by_vertex: dict[int, int] = {}
    for fi, fv in enumerate(facets):
        for v in fv:
            v = int(v)
            if v in by_vertex:
                ra, rb = find(by_vertex[v]), find(fi)
                if ra != rb:
                    parent[rb] = ra
            else:
                by_vertex[v] = fi
    roots = np.array([find(i) for i in range(len(facets))])
    _, comp = np.unique(roots, return_inverse=True)
    return comp


def _order_components(vertices: np.ndarray, facets: np.ndarray, raw: np.ndarray) -> np.ndarray:
    """Renumber components by their lexicographically smallest vertex."""
    n_comp = raw.max() + 1 if len(raw) else 0
    keys = []
    for c in range(n_comp):
        verts = np.unique(facets[raw == c].ravel())
        coords = vertices[verts]
        order = np.lexsort(coords.T[::-1])
        keys.append(tuple(coords[order[0]]))
    remap = np.empty(n_comp, dtype=int)
    for new, old in enumerate(sorted(range(n_comp), key=lambda c: keys[c])):
        remap[old] = new
    return remap[raw]


def _build_mesh(dimension: int, vertices: np.ndarray, cells: np.ndarray,
                geometry: dict) -> Mesh:
    """Derive boundary facets, normals, adjacency and components; validate."""
    vertices = np.atleast_2d(np.asarray(vertices, dtype=float))
    cells = np.asarray(cells, dtype=int)

    if dimension == 2:
        # enforce positive orientation
        v = vertices[cells]
        det = ((v[:, 1, 0] - v[:, 0, 0]) * (v[:, 2, 1] - v[:, 0, 1])
               - (v[:, 1, 1] - v[:, 0, 1]) * (v[:, 2, 0] - v[:, 0, 0]))
        flip = det < 0
        cells = cells.copy()
        cells[flip] = cells[flip][:, [0, 2, 1]]

    # facet -> adjacent cells
    facet_map: dict[tuple, list[int]] = {}
    nloc = dimension + 1
    for ci, cell in enumerate(cells):
        for drop in range(nloc):
            fv = tuple(sorted(int(cell[j]) for j in range(nloc) if j != drop))
            facet_map.setdefault(fv, []).append(ci)

    for fv, adj in facet_map.items():
        if len(adj) > 2:
            raise MeshFailure(f"facet {fv} shared by {len(adj)} cells; mesh not conforming")
    boundary = [fv for fv, adj in facet_map.items() if len(adj) == 1]
    if not boundary:
        raise MeshFailure("mesh has no boundary facets")
    facets = np.array(sorted(boundary), dtype=int)
    fcells = np.array([facet_map[tuple(fv)][0] for fv in facets], dtype=int)

    # outward normals: perpendicular to the facet, pointing away from the
    # opposite vertex of the adjacent cell
    normals = np.zeros((len(facets), dimension))
    for i, (fv, ci) in enumerate(zip(facets, fcells)):
        cell = cells[ci]
        opposite = [v for v in cell if v not in fv]
        if dimension == 1:
            d = vertices[fv[0]] - vertices[opposite[0]]
            normals[i] = d / np.linalg.norm(d)
        else:
            p, q = vertices[fv[0]], vertices[fv[1]]
            d = q - p
            n = np.array([d[1], -d[0]])
            if np.dot(n, vertices[opposite[0]] - p) > 0:
                n = -n
            normals[i] = n / np.linalg.norm(n)

    raw = _connected_components(facets)
    comp = _order_components(vertices, facets, raw)

    mesh = Mesh(dimension, vertices, cells, facets, normals, fcells, comp, geometry)
    _validate(mesh)
    return mesh


def _validate(mesh: Mesh) -> None:
    measures = mesh.cell_measures()
    if not np.all(measures > 0):
        raise MeshFailure("mesh has a cell with nonpositive measure")
    norms = np.linalg.norm(mesh.facet_normals, axis=1)
    if np.max(np.abs(norms - 1.0)) > _NORMAL_TOL:
        raise MeshFailure("boundary normal is not unit length")
    if mesh.dimension == 2:
        # every interior edge shared by exactly two cells was already enforced;
        # check vertices are distinct
        nv = mesh.n_vertices
        rounded = np.round(mesh.vertices, 12)
        if len(np.unique(rounded, axis=0)) != nv:
            raise MeshFailure("mesh contains duplicate vertices")


# ---------------------------------------------------------------------------
# builders


def build_interval_mesh(n: int) -> Mesh:
    """Uniform mesh of (0, 1) with n cells; components {0} and {1}."""
    if n < 2:
        raise ValueError(f"interval mesh needs n >= 2 cells, got {n}")
    vertices = np.linspace(0.0, 1.0, n + 1)[:, None]
    cells = np.column_stack([np.arange(n), np.arange(1, n + 1)])
    return _build_mesh(1, vertices, cells, {"kind": "interval", "n": n})


def _ring_points(radius: float, h: float, include_center: bool) -> np.ndarray:
    rings = max(2, int(math.ceil(radius / h)))
    dr = radius / rings
    pts = [(0.0, 0.0)] if include_center else []
    for k in range(1, rings + 1):
        r = k * dr
        m = max(6, int(round(2.0 * math.pi * k)))
        offset = (k % 2) * math.pi / m
        ang = offset + 2.0 * math.pi * np.arange(m) / m
        pts.extend(zip(r * np.cos(ang), r * np.sin(ang)))
    return np.array(pts)


def build_disk_mesh(radius: float, h: float) -> Mesh:
    """Triangulate the disk of the given radius centered at the origin.

    Boundary vertices lie on the exact circle; one boundary component.
    """
    if radius <= 0:
        raise ValueError(f"disk radius must be positive, got {radius}")
    if h <= 0:
        raise ValueError(f"target edge length must be positive, got {h}")
    if h > radius:
        raise MeshFailure(f"edge length {h} cannot resolve disk of radius {radius}")
    pts = _ring_points(radius, h, include_center=True)
    tri = Delaunay(pts)
    mesh = _build_mesh(2, pts, tri.simplices,
                       {"kind": "disk", "radius": radius, "h": h})
    if mesh.n_components != 1:
        raise MeshFailure("disk triangulation produced a fragmented boundary")
    return mesh


def build_annulus_mesh(r_in: float, r_out: float, h: float) -> Mesh:
    """Triangulate the annulus r_in <= |x| <= r_out; two boundary components."""
    if not (0 < r_in < r_out):
        raise ValueError(f"annulus radii must satisfy 0 < r_in < r_out, got ({r_in}, {r_out})")
    if h <= 0:
        raise ValueError(f"target edge length must be positive, got {h}")
    if h > r_out - r_in:
        raise MeshFailure(f"edge length {h} cannot resolve annulus width {r_out - r_in}")
    rings = max(2, int(math.ceil((r_out - r_in) / h)))
    radii = np.linspace(r_in, r_out, rings + 1)
    dr = radii[1] - radii[0]
    pts = []
    inner_ids = set()
    for k, r in enumerate(radii):
        m = max(8, int(round(2.0 * math.pi * r / dr)))
        offset = (k % 2) * math.pi / m
        ang = offset + 2.0 * math.pi * np.arange(m) / m
        if k == 0:
            inner_ids.update(range(len(pts), len(pts) + m))
        pts.extend(zip(r * np.cos(ang), r * np.sin(ang)))
    pts = np.array(pts)
    tri = Delaunay(pts)
    keep = []
    for simplex in tri.simplices:
        if all(int(v) in inner_ids for v in simplex):
            continue  # chord triangle spanning the hole
        keep.append(simplex)
    mesh = _build_mesh(2, pts, np.array(keep),
                       {"kind": "annulus", "r_in": r_in, "r_out": r_out, "h": h})
    if mesh.n_components != 2:
        raise MeshFailure("annulus triangulation did not produce two boundary components")
    return mesh


def build_polygon_mesh(loop: Sequence[Sequence[float]], h: float) -> Mesh:
    """Triangulate a simple counterclockwise polygon.

    Raises ValueError for self-intersecting or clockwise input and
    MeshFailure when h is too large to resolve the geometry.
    """
    from shapely.geometry import Point, Polygon

    loop = np.asarray(loop, dtype=float)
    if loop.ndim != 2 or loop.shape[0] < 3 or loop.shape[1] != 2:
        raise ValueError("polygon loop must be an (m, 2) array with m >= 3")
    if h <= 0:
        raise ValueError(f"target edge length must be positive, got {h}")
    poly = Polygon(loop)
    if not poly.is_valid:
        raise ValueError("polygon is self-intersecting or degenerate")
    if not Polygon(loop).exterior.is_ccw:
        raise ValueError("polygon loop must be counterclockwise")

    pts = []
    m = loop.shape[0]
    for i in range(m):
        a, b = loop[i], loop[(i + 1) % m]
        seg = np.linalg.norm(b - a)
        k = max(1, int(math.ceil(seg / h)))
        for j in range(k):
            pts.append(a + (b - a) * (j / k))
    boundary_count = len(pts)

    xmin, ymin = loop.min(axis=0)
    xmax, ymax = loop.max(axis=0)
    dy = h * math.sqrt(3.0) / 2.0
    row = 0
    y = ymin + dy
    margin = 0.55 * h
    while y < ymax - 0.25 * dy:
        x = xmin + (h / 2.0 if row % 2 else h)
        while x < xmax:
            p = Point(x, y)
            if poly.contains(p) and poly.exterior.distance(p) > margin:
                pts.append((x, y))
            x += h
        y += dy
        row += 1

    pts = np.array(pts)
    tri = Delaunay(pts)
    keep = []
    for simplex in tri.simplices:
        centroid = pts[simplex].mean(axis=0)
        if poly.contains(Point(*centroid)):
            keep.append(simplex)
    if not keep:
        raise MeshFailure(f"edge length {h} too large to resolve the polygon")
    try:
        mesh = _build_mesh(2, pts, np.array(keep),
                           {"kind": "polygon", "h": h, "loop": loop.tolist()})
    except MeshFailure as exc:
        raise MeshFailure(f"edge length {h} too large to resolve the polygon: {exc}") from exc
    # all input corners must survive on the boundary
    bverts = mesh.vertices[mesh.boundary_vertex_indices()]
    for corner in loop:
        if np.min(np.linalg.norm(bverts - corner, axis=1)) > 1e-9:
            raise MeshFailure(f"edge length {h} too large: polygon corner {corner} lost")
    return mesh


# ---------------------------------------------------------------------------
# deformation families


@dataclass(frozen=True)
class DiffeoFamily:
    """One-parameter family of diffeomorphisms t -> phi_t on the reference domain.

    map(t, pts): (n, dim) -> (n, dim) image points.
    jacobian(t, pts): (n, dim) -> (n, dim, dim) spatial Jacobian D phi_t.
    velocity(t, pts_image): X(y) = (d/dt phi_t)(phi_t^{-1}(y)) at image points.
    """

    kind: str
    dim: int
    t_range: tuple[float, float]
    map: Callable[[float, np.ndarray], np.ndarray]
    jacobian: Callable[[float, np.ndarray], np.ndarray]
    velocity: Callable[[float, np.ndarray], np.ndarray]
    smoothness_class: int = 2
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        a, b = self.t_range
        if not a < b:
            raise ValueError(f"t_range must satisfy a < b, got {self.t_range}")

    def check_orientation(self, t: float, pts: np.ndarray) -> None:
        J = self.jacobian(t, np.atleast_2d(pts))
        det = np.linalg.det(J) if self.dim > 1 else J[:, 0, 0]
        if np.any(det <= 0):
            raise DegenerateFamilyError(
                f"det Dphi_t <= 0 at t={t} for family kind '{self.kind}'")


def star_scale(center: Sequence[float] | float, t_range: tuple[float, float],
               dim: int) -> DiffeoFamily:
    """phi_t(x) = center + t (x - center); Dphi_t = t I; X(y) = (y - center)/t."""
    c = np.atleast_1d(np.asarray(center, dtype=float))
    if c.shape != (dim,):
        raise ValueError(f"center must have dimension {dim}")

    def _map(t, pts):
        return c + t * (np.atleast_2d(pts) - c)

    def _jac(t, pts):
        n = np.atleast_2d(pts).shape[0]
        return np.broadcast_to(t * np.eye(dim), (n, dim, dim)).copy()

    def _vel(t, pts):
        return (np.atleast_2d(pts) - c) / t

    a, _ = t_range
    if a <= 0:
        raise ValueError("star_scale needs t_range within (0, inf)")
    return DiffeoFamily("star_scale", dim, tuple(t_range), _map, _jac, _vel,
                        params={"center": c.tolist()})


def radial_scale(r_in: float, r_ref_out: float,
                 t_range: tuple[float, float]) -> DiffeoFamily:
    """Annulus family: inner radius fixed, outer radius mapped to t.

    The reference annulus has outer radius r_ref_out; phi_t rescales the
    radial coordinate linearly on [r_in, r_ref_out] so that the image is the
    annulus with radii (r_in, t).
    """
    if not (0 < r_in < r_ref_out):
        raise ValueError("radial_scale needs 0 < r_in < r_ref_out")
    if t_range[0] <= r_in:
        raise ValueError("radial_scale needs t_range within (r_in, inf)")
    width = r_ref_out - r_in

    def _sigma(t):
        return (t - r_in) / width

    def _map(t, pts):
        pts = np.atleast_2d(pts)
        rho = np.linalg.norm(pts, axis=1)
        f = r_in + (rho - r_in) * _sigma(t)
        return pts * (f / rho)[:, None]

    def _jac(t, pts):
        pts = np.atleast_2d(pts)
        rho = np.linalg.norm(pts, axis=1)
        s = _sigma(t)
        f = r_in + (rho - r_in) * s
        er = pts / rho[:, None]
        proj = np.einsum("ni,nj->nij", er, er)
        eye = np.eye(2)[None, :, :]
        return s * proj + (f / rho)[:, None, None] * (eye - proj)

    def _vel(t, pts):
        pts = np.atleast_2d(pts)
        rho_y = np.linalg.norm(pts, axis=1)
        return pts * ((rho_y - r_in) / (rho_y * (t - r_in)))[:, None]

    return DiffeoFamily("radial_scale", 2, tuple(t_range), _map, _jac, _vel,
                        params={"r_in": r_in, "r_ref_out": r_ref_out})


def affine_family(A: Callable[[float], np.ndarray],
                  b: Callable[[float], np.ndarray],
                  dA: Callable[[float], np.ndarray],
                  db: Callable[[float], np.ndarray],
                  t_range: tuple[float, float], dim: int) -> DiffeoFamily:
    """phi_t(x) = A(t) x + b(t) with user-supplied t-derivatives dA, db."""

    def _map(t, pts):
        return np.atleast_2d(pts) @ np.asarray(A(t)).T + np.asarray(b(t))

    def _jac(t, pts):
        n = np.atleast_2d(pts).shape[0]
        return np.broadcast_to(np.asarray(A(t), dtype=float), (n, dim, dim)).copy()

    def _vel(t, pts):
        # X(y) = dA A^{-1} (y - b) + db
        pts = np.atleast_2d(pts)
        Ainv = np.linalg.inv(np.asarray(A(t), dtype=float))
        return (pts - np.asarray(b(t))) @ (np.asarray(dA(t)) @ Ainv).T + np.asarray(db(t))

    return DiffeoFamily("affine", dim, tuple(t_range), _map, _jac, _vel)


def identity_family(t_range: tuple[float, float], dim: int) -> DiffeoFamily:
    """phi_t = id for all t (zero velocity)."""
    eye = np.eye(dim)
    zero = np.zeros(dim)
    return affine_family(lambda t: eye, lambda t: zero,
                         lambda t: np.zeros((dim, dim)), lambda t: zero,
                         t_range, dim)


def nanson_factors(family: DiffeoFamily, t: float, pts: np.ndarray,
                   ref_normals: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Pushed-forward unit normals and surface Jacobians at reference points.

    Nanson's rule: the (unnormalized) image normal is det(Dphi) Dphi^{-T} N;
    its length is the surface measure factor. In 1D the boundary is a point
    set and the factor is 1.
    """
    pts = np.atleast_2d(pts)
    J = family.jacobian(t, pts)
    if family.dim == 1:
        det = J[:, 0, 0]
        if np.any(det <= 0):
            raise DegenerateFamilyError(f"singular Jacobian at t={t}")
        return ref_normals.copy(), np.ones(len(pts))
    det = np.linalg.det(J)
    if np.any(det <= 0):
        raise DegenerateFamilyError(f"singular Jacobian at t={t}")
    Jinv = np.linalg.inv(J)
    w = det[:, None] * np.einsum("nji,nj->ni", Jinv, ref_normals)
    J_surf = np.linalg.norm(w, axis=1)
    return w / J_surf[:, None], J_surf


def boundary_velocity_normal(family: DiffeoFamily, t: float, mesh: Mesh) -> np.ndarray:
    """Per-facet X . N_t at the image of each boundary facet midpoint."""
    a, b = family.t_range
    if not (a <= t <= b):
        raise ValueError(f"t={t} outside family range {family.t_range}")
    mids = mesh.facet_midpoints()
    normals_t, _ = nanson_factors(family, t, mids, mesh.facet_normals)
    X = family.velocity(t, family.map(t, mids))
    return np.einsum("ni,ni->n", X, normals_t)


# ---------------------------------------------------------------------------
# plain-text serialization


def mesh_to_text(mesh: Mesh) -> str:
    """Serialize: header 'dim nv nc nbf', vertices, cells, facet records."""
    lines = [f"{mesh.dimension} {mesh.n_vertices} {mesh.n_cells} {mesh.n_facets}"]
    for v in mesh.vertices:
        lines.append(" ".join(repr(float(x)) for x in v))
    for c in mesh.cells:
        lines.append(" ".join(str(int(i)) for i in c))
    for fv, comp in zip(mesh.facet_vertices, mesh.facet_components):
        lines.append(" ".join(str(int(i)) for i in fv) + f" {int(comp)}")
    return "\n".join(lines) + "\n"


def mesh_from_text(text: str) -> Mesh:
    """Rebuild a mesh from the plain-text format (component ids trusted)."""
    rows = [ln.split() for ln in text.strip().splitlines()]
    dim, nv, nc, nbf = (int(x) for x in rows[0])
    vertices = np.array([[float(x) for x in r] for r in rows[1:1 + nv]])
    cells = np.array([[int(x) for x in r] for r in rows[1 + nv:1 + nv + nc]])
    mesh = _build_mesh(dim, vertices, cells, {"kind": "custom"})
    # adopt the file's component numbering after checking it matches
    file_comp = {}
    for r in rows[1 + nv + nc:1 + nv + nc + nbf]:
        fv = tuple(sorted(int(x) for x in r[:-1]))
        file_comp[fv] = int(r[-1])
    comps = np.array([file_comp[tuple(sorted(fv))] for fv in mesh.facet_vertices])
    return Mesh(mesh.dimension, mesh.vertices, mesh.cells, mesh.facet_vertices,
                mesh.facet_normals, mesh.facet_cells, comps, mesh.geometry)
