"""Admissible polygons, structured triangulations and point location.

Only convex polygons with every aperture at most pi/2 are meshed.  The angle
sum (n - 2) pi then forces n <= 4, so a domain is either a triangle (meshed by
uniform self-similar refinement) or a rectangle (meshed by a structured grid
with every cell cut along one diagonal).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sps

__all__ = [
    "Polygon",
    "PolygonError",
    "InadmissibleDomainError",
    "OutsideDomainError",
    "AdmissibilityReport",
    "TriMesh",
    "compute_apertures",
    "mesh_polygon",
    "locate_point",
    "locate_points",
    "interpolate",
    "interpolate_points",
    "preset",
    "write_vtk",
]

APERTURE_TOL = 1e-12
ANGLE_SUM_TOL = 1e-10
BARY_TOL = 1e-12
BOUNDARY_TOL = 1e-12


class PolygonError(ValueError):
    """Invalid polygon; ``vertex`` is the offending vertex index when known."""

    def __init__(self, message, vertex=None):
        super().__init__(message)
        self.vertex = vertex


class InadmissibleDomainError(ValueError):
    def __init__(self, report: "AdmissibilityReport"):
        worst = int(np.argmax(report.apertures))
        super().__init__(
            f"polygon is not admissible: aperture {report.max_aperture:.6g} rad at vertex "
            f"{worst} exceeds pi/2"
        )
        self.report = report


class OutsideDomainError(ValueError):
    """Raised by interpolate() for points outside the mesh; callers must clamp."""


def _cross(a, b):
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


def _segments_intersect(p1, p2, q1, q2):
    """Closed-segment intersection test by orientation signs."""
    def orient(a, b, c):
        return np.sign(_cross(b - a, c - a))

    def on_segment(a, b, c):
        return (min(a[0], b[0]) <= c[0] <= max(a[0], b[0])
                and min(a[1], b[1]) <= c[1] <= max(a[1], b[1]))

    o1, o2 = orient(p1, p2, q1), orient(p1, p2, q2)
    o3, o4 = orient(q1, q2, p1), orient(q1, q2, p2)
    if o1 != o2 and o3 != o4 and 0 not in (o1, o2, o3, o4):
        return True
    return ((o1 == 0 and on_segment(p1, p2, q1)) or (o2 == 0 and on_segment(p1, p2, q2))
            or (o3 == 0 and on_segment(q1, q2, p1)) or (o4 == 0 and on_segment(q1, q2, p2)))


@dataclass(frozen=True, eq=False)
class Polygon:
    """Simple polygon with counterclockwise vertices."""

    vertices: np.ndarray

    def __post_init__(self):
        v = np.array(self.vertices, dtype=float)
        if v.ndim != 2 or v.shape[1] != 2:
            raise PolygonError("vertices must be an (n, 2) array")
        n = len(v)
        if n < 3:
            raise PolygonError("a polygon needs at least 3 vertices")
        if not np.all(np.isfinite(v)):
            raise PolygonError("vertex coordinates must be finite")
        edges = np.roll(v, -1, axis=0) - v
        lengths = np.hypot(edges[:, 0], edges[:, 1])
        for i in range(n):
            if lengths[i] == 0.0:
                raise PolygonError(f"zero-length edge after vertex {i}", vertex=i)
        for i in range(n):
            for j in range(i + 1, n):
                if j == i + 1 or (i == 0 and j == n - 1):
                    continue
                if _segments_intersect(v[i], v[(i + 1) % n], v[j], v[(j + 1) % n]):
                    raise PolygonError(f"edges {i} and {j} intersect; polygon is not simple")
        if self._signed_area(v) <= 0.0:
            raise PolygonError("vertices must be ordered counterclockwise (positive area)")
        v.setflags(write=False)
        object.__setattr__(self, "vertices", v)

    @staticmethod
    def _signed_area(v):
        return 0.5 * float(np.sum(_cross(v, np.roll(v, -1, axis=0))))

    @property
    def area(self) -> float:
        return self._signed_area(self.vertices)

    def __len__(self):
        return len(self.vertices)

    def __eq__(self, other):
        return isinstance(other, Polygon) and np.array_equal(self.vertices, other.vertices)

    def __hash__(self):
        return hash(self.vertices.tobytes())

    def distance_to_boundary(self, pts) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        best = np.full(len(pts), np.inf)
        v = self.vertices
        for a, b in zip(v, np.roll(v, -1, axis=0)):
            d = b - a
            s = np.clip(((pts - a) @ d) / (d @ d), 0.0, 1.0)
            proj = a + s[:, None] * d
            best = np.minimum(best, np.hypot(*(pts - proj).T))
        return best

    def nearest_boundary_point(self, pts) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        best = np.full(len(pts), np.inf)
        out = pts.copy()
        v = self.vertices
        for a, b in zip(v, np.roll(v, -1, axis=0)):
            d = b - a
            s = np.clip(((pts - a) @ d) / (d @ d), 0.0, 1.0)
            proj = a + s[:, None] * d
            dist = np.hypot(*(pts - proj).T)
            closer = dist < best
            best[closer] = dist[closer]
            out[closer] = proj[closer]
        return out


@dataclass(frozen=True)
class AdmissibilityReport:
    apertures: np.ndarray
    admissible: bool
    max_aperture: float


def compute_apertures(poly: Polygon) -> AdmissibilityReport:
    """Interior angle at every vertex and the max-aperture <= pi/2 verdict."""
    v = poly.vertices
    e_in = v - np.roll(v, 1, axis=0)
    e_out = np.roll(v, -1, axis=0) - v
    turn = np.arctan2(_cross(e_in, e_out), np.sum(e_in * e_out, axis=1))
    apertures = np.pi - turn
    for i, a in enumerate(apertures):
        if a <= 0.0 or a >= 2.0 * np.pi or abs(turn[i]) >= np.pi:
            raise PolygonError(f"degenerate spike at vertex {i}", vertex=i)
    n = len(v)
    assert abs(apertures.sum() - (n - 2) * np.pi) <= ANGLE_SUM_TOL * n
    amax = float(apertures.max())
    return AdmissibilityReport(apertures, amax <= np.pi / 2 + APERTURE_TOL, amax)


def preset(name: str) -> Polygon:
    presets = {
        "unit_square": [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)],
        "right_triangle": [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0)],
    }
    try:
        return Polygon(np.array(presets[name]))
    except KeyError:
        raise ValueError(f"unknown domain preset {name!r}; choose from {sorted(presets)}") from None


def _readonly(a):
    a = np.array(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class TriMesh:
    """Conforming P1 triangulation; read-only after construction.

    Derived geometric and algebraic data (areas, basis gradients, stiffness,
    lumped mass, neighbours) are computed lazily and cached.
    """

    nodes: np.ndarray
    elements: np.ndarray
    polygon: Polygon

    def __post_init__(self):
        object.__setattr__(self, "nodes", _readonly(np.asarray(self.nodes, dtype=float)))
        object.__setattr__(self, "elements", _readonly(np.asarray(self.elements, dtype=np.int64)))
        if np.any(self.areas <= 0.0):
            raise ValueError("mesh has elements with non-positive area")

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_elements(self) -> int:
        return len(self.elements)

    @cached_property
    def areas(self) -> np.ndarray:
        p = self.nodes[self.elements]
        return _readonly(0.5 * _cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]))

    @cached_property
    def h(self) -> float:
        """Maximum element diameter (longest edge)."""
        p = self.nodes[self.elements]
        e = p - np.roll(p, -1, axis=1)
        return float(np.sqrt((e**2).sum(axis=2)).max())

    @cached_property
    def basis_gradients(self) -> np.ndarray:
        """(n_el, 3, 2) gradients of the three local hat functions."""
        p = self.nodes[self.elements]
        g = np.empty((self.n_elements, 3, 2))
        for i in range(3):
            j, k = (i + 1) % 3, (i + 2) % 3
            g[:, i, 0] = p[:, j, 1] - p[:, k, 1]
            g[:, i, 1] = p[:, k, 0] - p[:, j, 0]
        g /= (2.0 * self.areas)[:, None, None]
        return _readonly(g)

    @cached_property
    def centroids(self) -> np.ndarray:
        return _readonly(self.nodes[self.elements].mean(axis=1))

    @cached_property
    def lumped_mass(self) -> np.ndarray:
        m = np.zeros(self.n_nodes)
        np.add.at(m, self.elements.ravel(), np.repeat(self.areas / 3.0, 3))
        return _readonly(m)

    @cached_property
    def stiffness(self) -> sps.csr_matrix:
        g = self.basis_gradients
        ke = np.einsum("eid,ejd->eij", g, g) * self.areas[:, None, None]
        rows = np.repeat(self.elements, 3, axis=1).ravel()
        cols = np.tile(self.elements, (1, 3)).ravel()
        k = sps.coo_matrix((ke.ravel(), (rows, cols)), shape=(self.n_nodes,) * 2).tocsr()
        k.sum_duplicates()
        k.sort_indices()
        return k

    @cached_property
    def _edges(self):
        el = self.elements
        local = [(1, 2), (2, 0), (0, 1)]  # edge opposite local vertex 0, 1, 2
        pairs = np.concatenate([el[:, [a, b]] for a, b in local])
        key = np.sort(pairs, axis=1)
        owner = np.tile(np.arange(self.n_elements), 3)
        opp = np.repeat(np.arange(3), self.n_elements)
        return pairs, key, owner, opp

    @cached_property
    def neighbors(self) -> np.ndarray:
        """(n_el, 3): element across the edge opposite local vertex i, or -1."""
        _, key, owner, opp = self._edges
        order = np.lexsort((key[:, 1], key[:, 0]))
        k = key[order]
        same = np.all(k[1:] == k[:-1], axis=1)
        nb = -np.ones((self.n_elements, 3), dtype=np.int64)
        i = np.nonzero(same)[0]
        a, b = order[i], order[i + 1]
        nb[owner[a], opp[a]] = owner[b]
        nb[owner[b], opp[b]] = owner[a]
        return _readonly(nb)

    @cached_property
    def edge_counts(self) -> dict:
        _, key, _, _ = self._edges
        _, counts = np.unique(key, axis=0, return_counts=True)
        return {"boundary": int(np.sum(counts == 1)), "interior": int(np.sum(counts == 2)),
                "other": int(np.sum(counts > 2))}

    @cached_property
    def boundary_edges(self) -> np.ndarray:
        """(n_b, 2) node pairs, oriented counterclockwise along the boundary."""
        pairs, _, owner, opp = self._edges
        mask = (self.neighbors[owner, opp] < 0)
        return _readonly(pairs[mask])

    @cached_property
    def boundary_edge_elements(self) -> np.ndarray:
        _, _, owner, opp = self._edges
        return _readonly(owner[self.neighbors[owner, opp] < 0])

    @cached_property
    def boundary_normals(self) -> np.ndarray:
        d = self.nodes[self.boundary_edges[:, 1]] - self.nodes[self.boundary_edges[:, 0]]
        n = np.stack([d[:, 1], -d[:, 0]], axis=1)
        return _readonly(n / np.hypot(n[:, 0], n[:, 1])[:, None])

    @cached_property
    def boundary_nodes(self) -> np.ndarray:
        flag = np.zeros(self.n_nodes, dtype=bool)
        flag[self.boundary_edges.ravel()] = True
        return _readonly(flag)

    @cached_property
    def interior_nodes(self) -> np.ndarray:
        return _readonly(np.nonzero(~self.boundary_nodes)[0])

    @cached_property
    def node_owner(self) -> np.ndarray:
        """Lowest-index element incident to each node."""
        owner = np.full(self.n_nodes, self.n_elements, dtype=np.int64)
        np.minimum.at(owner, self.elements.ravel(), np.repeat(np.arange(self.n_elements), 3))
        return _readonly(owner)

    def summary(self) -> dict:
        return {
            "nodes": self.n_nodes,
            "elements": self.n_elements,
            "boundary_nodes": int(self.boundary_nodes.sum()),
            "h": self.h,
            "area": float(self.areas.sum()),
        }


def _structured_triangle(a, b, c, n):
    idx = {}
    nodes = []
    for j in range(n + 1):
        for i in range(n + 1 - j):
            idx[i, j] = len(nodes)
            nodes.append(a + (i / n) * (b - a) + (j / n) * (c - a))
    elements = []
    for j in range(n):
        for i in range(n - j):
            elements.append((idx[i, j], idx[i + 1, j], idx[i, j + 1]))
            if i + j + 1 < n:
                elements.append((idx[i + 1, j], idx[i + 1, j + 1], idx[i, j + 1]))
    return np.array(nodes), np.array(elements)


def _structured_rectangle(v, nx, ny):
    i, j = np.meshgrid(np.arange(nx + 1), np.arange(ny + 1), indexing="xy")
    s = (i / nx).ravel()[:, None]
    t = (j / ny).ravel()[:, None]
    nodes = v[0] + s * (v[1] - v[0]) + t * (v[3] - v[0])
    k = lambda ii, jj: jj * (nx + 1) + ii  # noqa: E731
    ci, cj = np.meshgrid(np.arange(nx), np.arange(ny), indexing="xy")
    ci, cj = ci.ravel(), cj.ravel()
    lower = np.stack([k(ci, cj), k(ci + 1, cj), k(ci + 1, cj + 1)], axis=1)
    upper = np.stack([k(ci, cj), k(ci + 1, cj + 1), k(ci, cj + 1)], axis=1)
    elements = np.stack([lower, upper], axis=1).reshape(-1, 3)
    return nodes, elements


def mesh_polygon(poly: Polygon, target_h: float | None = None, *, divisions: int | None = None,
                 refinements: int = 0) -> TriMesh:
    """Structured triangulation of an admissible polygon.

    With ``target_h`` the number of subdivisions per side is the smallest one
    giving a maximum element diameter <= target_h.  ``divisions`` fixes the
    subdivision count of the longest side directly (the grid spacing is then
    side_length / divisions).  Each of ``refinements`` doubles the count,
    which is the same as uniform midpoint refinement of the coarse mesh.
    """
    report = compute_apertures(poly)
    if not report.admissible:
        raise InadmissibleDomainError(report)
    if (target_h is None) == (divisions is None):
        raise ValueError("give exactly one of target_h or divisions")
    if target_h is not None and not (target_h > 0 and math.isfinite(target_h)):
        raise ValueError("target_h must be positive")
    if divisions is not None and divisions < 1:
        raise ValueError("divisions must be >= 1")
    v = poly.vertices
    scale = 2**int(refinements)
    if len(v) == 3:
        longest = max(np.hypot(*(v[(i + 1) % 3] - v[i])) for i in range(3))
        n = divisions if divisions is not None else math.ceil(longest / target_h - 1e-12)
        nodes, elements = _structured_triangle(v[0], v[1], v[2], max(1, n) * scale)
    elif len(v) == 4:
        a = np.hypot(*(v[1] - v[0]))
        b = np.hypot(*(v[3] - v[0]))
        if divisions is not None:
            big = max(a, b)
            nx = max(1, round(divisions * a / big))
            ny = max(1, round(divisions * b / big))
        else:
            s = target_h / math.sqrt(2.0)
            nx = max(1, math.ceil(a / s - 1e-12))
            ny = max(1, math.ceil(b / s - 1e-12))
            while math.hypot(a / nx, b / ny) > target_h * (1 + 1e-12):
                nx, ny = (nx + 1, ny) if a / nx >= b / ny else (nx, ny + 1)
        nodes, elements = _structured_rectangle(v, nx * scale, ny * scale)
    else:  # pragma: no cover - excluded by the angle sum
        raise InadmissibleDomainError(report)
    return TriMesh(nodes, elements, poly)


def _bary(mesh, elems, pts):
    # lambda_i(p) = 1/3 + grad(lambda_i) . (p - centroid)
    g = mesh.basis_gradients[elems]
    return 1.0 / 3.0 + np.einsum("nid,nd->ni", g, pts - mesh.centroids[elems])


def locate_points(mesh: TriMesh, pts, start=None, max_walk: int = 10_000, tol: float = BARY_TOL):
    """Vectorised point location.

    Returns ``(elements, weights)``; ``elements[k] == -1`` marks a point
    outside the mesh.  Each point walks from ``start[k]`` (default element 0)
    towards the most violated barycentric coordinate; points whose walk does
    not settle fall back to a brute-force scan.  On a convex domain, leaving
    through a boundary edge proves the point is outside.
    """
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    n = len(pts)
    cur = np.zeros(n, dtype=np.int64) if start is None else np.array(start, dtype=np.int64)
    elems = -np.ones(n, dtype=np.int64)
    weights = np.zeros((n, 3))
    active = np.arange(n)
    nb = mesh.neighbors
    for _ in range(max_walk):
        if active.size == 0:
            break
        lam = _bary(mesh, cur[active], pts[active])
        worst = np.argmin(lam, axis=1)
        low = lam[np.arange(len(active)), worst]
        inside = low >= -tol
        done = active[inside]
        elems[done] = cur[done]
        weights[done] = lam[inside]
        nxt = nb[cur[active], worst]
        out = ~inside & (nxt < 0)
        # left through a boundary edge: outside (convex domain)
        active_next = ~inside & ~out
        cur[active[active_next]] = nxt[active_next]
        active = active[active_next]
    for k in active:  # brute-force fallback
        lam = _bary(mesh, np.arange(mesh.n_elements), np.repeat(pts[k][None], mesh.n_elements, 0))
        ok = np.nonzero(lam.min(axis=1) >= -tol)[0]
        if ok.size:
            elems[k] = ok[0]
            weights[k] = lam[ok[0]]
    hit = elems >= 0
    weights[hit] /= weights[hit].sum(axis=1, keepdims=True)
    return elems, weights


def locate_point(mesh: TriMesh, p, hint: int | None = None):
    """Containing element and barycentric weights of ``p``, or None if outside."""
    e, w = locate_points(mesh, np.asarray(p, dtype=float)[None, :],
                         start=None if hint is None else [hint])
    if e[0] < 0:
        return None
    return int(e[0]), w[0]


def interpolate_points(mesh: TriMesh, field, pts, start=None):
    """P1 interpolation at many points; NaN where the point is outside."""
    field = np.asarray(field, dtype=float)
    e, w = locate_points(mesh, pts, start=start)
    out = np.full(len(e), np.nan)
    hit = e >= 0
    out[hit] = np.einsum("ni,ni->n", w[hit], field[mesh.elements[e[hit]]])
    return out


def interpolate(mesh: TriMesh, field, p) -> float:
    val = interpolate_points(mesh, field, np.asarray(p, dtype=float)[None, :])[0]
    if np.isnan(val):
        raise OutsideDomainError(f"point {tuple(np.ravel(p))} lies outside the domain")
    return float(val)


def write_vtk(path, mesh: TriMesh, point_data=None, cell_data=None, title="polybous"):
    """Legacy ASCII VTK unstructured grid (triangles are cell type 5)."""
    lines = ["# vtk DataFile Version 3.0", title, "ASCII", "DATASET UNSTRUCTURED_GRID",
             f"POINTS {mesh.n_nodes} double"]
    lines += [f"{x:.17g} {y:.17g} 0" for x, y in mesh.nodes]
    lines.append(f"CELLS {mesh.n_elements} {4 * mesh.n_elements}")
    lines += [f"3 {a} {b} {c}" for a, b, c in mesh.elements]
    lines.append(f"CELL_TYPES {mesh.n_elements}")
    lines += ["5"] * mesh.n_elements

    def block(kind, count, data):
        if not data:
            return []
        out = [f"{kind} {count}"]
        for name, arr in data.items():
            arr = np.asarray(arr, dtype=float)
            if arr.ndim == 1:
                out += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
                out += [f"{v:.17g}" for v in arr]
            else:
                out.append(f"VECTORS {name} double")
                out += [f"{a:.17g} {b:.17g} 0" for a, b in arr[:, :2]]
        return out

    lines += block("POINT_DATA", mesh.n_nodes, point_data)
    lines += block("CELL_DATA", mesh.n_elements, cell_data)
    text = "\n".join(lines) + "\n"
    if hasattr(path, "write"):
        path.write(text)
    else:
        with open(path, "w") as fh:
            fh.write(text)
    return text
