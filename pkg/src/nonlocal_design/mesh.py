"""Simplicial meshes of the design domain and its horizon layer.

Meshes are immutable value objects.  Elements tagged ``INTERIOR`` triangulate
the design domain and always come first; elements tagged ``HORIZON`` fill the
layer of width ``horizon`` around it.  Only vertices strictly inside the design
domain carry degrees of freedom; every other vertex is held at zero.
"""

from __future__ import annotations

import enum
import hashlib
import io
import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import ParameterError

INTERIOR = 0
HORIZON = 1

# the generator refuses to go beyond this many cells per side of the disk grid
_MAX_DISK_CELLS = 1024


class PairClass(enum.Enum):
    """Adjacency of two elements, by the number of shared vertices."""

    DISJOINT = 0
    VERTEX_TOUCH = 1
    EDGE_TOUCH = 2
    IDENTICAL = 3


@dataclass(frozen=True, eq=False)
class Mesh:
    """Conforming simplicial mesh (intervals in 1D, triangles in 2D).

    Parameters
    ----------
    vertices : ndarray, shape (n_vertices, dim)
    elements : ndarray, shape (n_elements, dim + 1)
        Vertex indices of each simplex.
    interior_vertex : ndarray of bool, shape (n_vertices,)
        True iff the vertex lies in the open design domain.
    element_region : ndarray of int8, shape (n_elements,)
        ``INTERIOR`` or ``HORIZON``.  Interior elements precede layer elements.
    horizon : float
        Width of the layer around the design domain (0 when absent).
    """

    vertices: np.ndarray
    elements: np.ndarray
    interior_vertex: np.ndarray
    element_region: np.ndarray
    horizon: float = 0.0

    def __post_init__(self):
        for name in ("vertices", "elements", "interior_vertex", "element_region"):
            getattr(self, name).setflags(write=False)

    @property
    def dim(self) -> int:
        return self.vertices.shape[1]

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_elements(self) -> int:
        return self.elements.shape[0]

    @cached_property
    def n_interior_elements(self) -> int:
        return int(np.count_nonzero(self.element_region == INTERIOR))

    @cached_property
    def dof_index(self) -> np.ndarray:
        """Map vertex -> degree-of-freedom number, -1 for constrained vertices."""
        idx = np.full(self.n_vertices, -1, dtype=np.int64)
        idx[self.interior_vertex] = np.arange(np.count_nonzero(self.interior_vertex))
        return idx

    @property
    def n_dofs(self) -> int:
        return int(np.count_nonzero(self.interior_vertex))

    @cached_property
    def element_dofs(self) -> np.ndarray:
        return self.dof_index[self.elements]

    @cached_property
    def jacobians(self) -> np.ndarray:
        """Edge vectors ``v_i - v_0`` as columns, shape (n_elements, dim, dim)."""
        p = self.vertices[self.elements]
        return np.transpose(p[:, 1:, :] - p[:, :1, :], (0, 2, 1))

    @cached_property
    def measures(self) -> np.ndarray:
        det = np.abs(np.linalg.det(self.jacobians))
        return det / math.factorial(self.dim)

    @cached_property
    def barycentric_gradients(self) -> np.ndarray:
        """Gradients of the barycentric coordinates, shape (n_elements, dim+1, dim)."""
        inv = np.linalg.inv(self.jacobians)  # rows: gradients of lambda_1..lambda_d
        grads = np.empty((self.n_elements, self.dim + 1, self.dim))
        grads[:, 1:, :] = inv
        grads[:, 0, :] = -inv.sum(axis=1)
        return grads

    @cached_property
    def diameters(self) -> np.ndarray:
        p = self.vertices[self.elements]
        d = np.zeros(self.n_elements)
        k = self.dim + 1
        for i in range(k):
            for j in range(i + 1, k):
                d = np.maximum(d, np.linalg.norm(p[:, i] - p[:, j], axis=1))
        return d

    @cached_property
    def inradii(self) -> np.ndarray:
        if self.dim == 1:
            return self.measures / 2.0
        p = self.vertices[self.elements]
        perimeter = sum(
            np.linalg.norm(p[:, i] - p[:, (i + 1) % 3], axis=1) for i in range(3)
        )
        return 2.0 * self.measures / perimeter

    @cached_property
    def centroids(self) -> np.ndarray:
        return self.vertices[self.elements].mean(axis=1)

    @property
    def h(self) -> float:
        """Maximum element diameter."""
        return float(self.diameters.max())

    @property
    def quasi_uniformity_ratio(self) -> float:
        return float(self.diameters.max() / self.inradii.min())

    def interior_mesh(self) -> Mesh:
        """The mesh with the horizon layer removed."""
        if self.n_interior_elements == self.n_elements:
            return self
        elements = self.elements[: self.n_interior_elements]
        used = np.unique(elements)
        remap = np.full(self.n_vertices, -1, dtype=np.int64)
        remap[used] = np.arange(used.size)
        return Mesh(
            self.vertices[used].copy(),
            remap[elements],
            self.interior_vertex[used].copy(),
            self.element_region[: self.n_interior_elements].copy(),
            0.0,
        )

    # serialization ---------------------------------------------------------

    def to_text(self) -> str:
        out = io.StringIO()
        out.write(f"{self.dim} {self.n_vertices} {self.n_elements}\n")
        for x, flag in zip(self.vertices, self.interior_vertex):
            coords = " ".join(_fmt(c) for c in x)
            out.write(f"{coords} {int(flag)}\n")
        for el, tag in zip(self.elements, self.element_region):
            out.write(" ".join(str(int(v)) for v in el) + f" {int(tag)}\n")
        return out.getvalue()

    @cached_property
    def content_hash(self) -> bytes:
        """SHA-256 digest of the text serialization (32 bytes)."""
        return hashlib.sha256(self.to_text().encode("ascii")).digest()

    def __hash__(self):
        return hash(self.content_hash)

    def __eq__(self, other):
        if not isinstance(other, Mesh):
            return NotImplemented
        return self.content_hash == other.content_hash


def _fmt(x: float) -> str:
    return repr(float(x))


def save_mesh(mesh: Mesh, path) -> None:
    with open(path, "w", newline="\n", encoding="ascii") as fh:
        fh.write(mesh.to_text())


def mesh_from_text(text: str) -> Mesh:
    lines = text.splitlines()
    try:
        dim, nv, ne = (int(t) for t in lines[0].split())
        vert = np.array([[float(t) for t in ln.split()] for ln in lines[1 : 1 + nv]])
        elem = np.array(
            [[int(t) for t in ln.split()] for ln in lines[1 + nv : 1 + nv + ne]],
            dtype=np.int64,
        )
    except (ValueError, IndexError) as exc:
        raise ParameterError(f"malformed mesh text: {exc}") from None
    if vert.shape != (nv, dim + 1) or elem.shape != (ne, dim + 2):
        raise ParameterError("mesh text does not match its header")
    mesh = Mesh(
        vert[:, :dim].copy(),
        elem[:, : dim + 1].copy(),
        vert[:, dim].astype(bool),
        elem[:, dim + 1].astype(np.int8),
        0.0,
    )
    return _with_horizon(mesh, _infer_horizon(mesh))


def load_mesh(path) -> Mesh:
    with open(path, encoding="ascii") as fh:
        return mesh_from_text(fh.read())


def _with_horizon(mesh: Mesh, horizon: float) -> Mesh:
    return Mesh(
        mesh.vertices, mesh.elements, mesh.interior_vertex, mesh.element_region, horizon
    )


def _infer_horizon(mesh: Mesh) -> float:
    if mesh.n_interior_elements == mesh.n_elements:
        return 0.0
    inner = np.unique(mesh.elements[: mesh.n_interior_elements])
    if mesh.dim == 1:
        lo, hi = mesh.vertices[inner, 0].min(), mesh.vertices[inner, 0].max()
        return float(max(lo - mesh.vertices[:, 0].min(), mesh.vertices[:, 0].max() - hi))
    centre = mesh.vertices[inner].mean(axis=0)
    r_in = np.linalg.norm(mesh.vertices[inner] - centre, axis=1).max()
    r_out = np.linalg.norm(mesh.vertices - centre, axis=1).max()
    return float(r_out - r_in)


# construction ----------------------------------------------------------------


def build_interval_mesh(a_end: float, b_end: float, num_elements: int) -> Mesh:
    """Uniform partition of ``[a_end, b_end]``; both endpoints are constrained."""
    if not (np.isfinite(a_end) and np.isfinite(b_end)) or a_end >= b_end:
        raise ParameterError(f"need a_end < b_end, got {a_end}, {b_end}")
    if int(num_elements) != num_elements or num_elements < 1:
        raise ParameterError(f"num_elements must be a positive integer, got {num_elements}")
    n = int(num_elements)
    x = np.linspace(a_end, b_end, n + 1)
    interior = np.ones(n + 1, dtype=bool)
    interior[[0, -1]] = False
    elements = np.column_stack([np.arange(n), np.arange(1, n + 1)])
    return Mesh(x[:, None], elements, interior, np.zeros(n, dtype=np.int8), 0.0)


def _disk_grid(radius: float, cells: int) -> Mesh:
    """Map a union-jack triangulation of the square onto the disk.

    The square ``[-1, 1]^2`` with ``cells`` cells per side is triangulated with
    diagonals along the lines ``u = +-v`` and mapped by ``p -> p |p|_inf / |p|_2``,
    which is smooth on every element and sends the square boundary onto the
    circle.  The mesh has ``(cells - 1)**2`` interior vertices.
    """
    n = cells
    t = np.linspace(-1.0, 1.0, n + 1)
    u, v = np.meshgrid(t, t, indexing="xy")
    u = u.ravel()
    v = v.ravel()
    vid = np.arange((n + 1) ** 2).reshape(n + 1, n + 1)  # [row j (v), col i (u)]
    tris = []
    half = n // 2
    for j in range(n):
        for i in range(n):
            a, b = vid[j, i], vid[j, i + 1]
            c, d = vid[j + 1, i + 1], vid[j + 1, i]
            # quadrants I and III: diagonal parallel to u = v
            if (i >= half) == (j >= half):
                tris.append((a, b, c))
                tris.append((a, c, d))
            else:
                tris.append((a, b, d))
                tris.append((b, c, d))
    elements = np.array(tris, dtype=np.int64)
    inf = np.maximum(np.abs(u), np.abs(v))
    two = np.hypot(u, v)
    scale = np.divide(inf, two, out=np.zeros_like(two), where=two > 0)
    xy = radius * np.column_stack([u * scale, v * scale])
    boundary = np.isclose(inf, 1.0)
    xy[boundary] = radius * xy[boundary] / np.linalg.norm(xy[boundary], axis=1)[:, None]
    # orient counterclockwise
    p = xy[elements]
    cross = (p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1]) - (
        p[:, 1, 1] - p[:, 0, 1]
    ) * (p[:, 2, 0] - p[:, 0, 0])
    flip = cross < 0
    elements[flip] = elements[flip][:, [0, 2, 1]]
    return Mesh(xy, elements, ~boundary, np.zeros(len(elements), dtype=np.int8), 0.0)


def build_disk_mesh(radius: float, target_h: float) -> Mesh:
    """Triangulate a polygonal approximation of the disk of the given radius.

    The number of grid cells per side is the smallest even number whose mesh
    satisfies ``h <= target_h``.  Boundary vertices lie on the circle.
    """
    if not radius > 0:
        raise ParameterError(f"radius must be positive, got {radius}")
    if not 0 < target_h < radius:
        raise ParameterError(f"need 0 < target_h < radius, got {target_h}")
    # h is roughly proportional to 1/cells; start near the answer
    cells = max(2, 2 * int(math.floor(radius / target_h)))
    cells -= cells % 2
    while cells <= _MAX_DISK_CELLS:
        mesh = _disk_grid(radius, cells)
        if mesh.h <= target_h:
            # step back while the coarser mesh still satisfies the bound
            while cells > 2:
                coarser = _disk_grid(radius, cells - 2)
                if coarser.h > target_h:
                    break
                cells, mesh = cells - 2, coarser
            return mesh
        cells += 2
    raise ParameterError(f"target_h={target_h} unreachable (more than {_MAX_DISK_CELLS} cells)")


def disk_mesh_for_dofs(radius: float, dofs: int) -> Mesh:
    """Disk mesh with exactly ``dofs`` interior vertices (``dofs = (2m - 1)**2``)."""
    root = math.isqrt(int(dofs))
    cells = root + 1
    if root * root != dofs or cells % 2 or cells < 2:
        raise ParameterError(f"dofs must be (2m-1)^2 for an integer m >= 1, got {dofs}")
    if not radius > 0:
        raise ParameterError(f"radius must be positive, got {radius}")
    return _disk_grid(radius, cells)


def disk_cells_for_h(radius: float, target_h: float) -> int:
    return int(round(math.sqrt(build_disk_mesh(radius, target_h).n_dofs))) + 1


def extend_with_horizon(mesh: Mesh, R: float) -> Mesh:
    """Append a layer of ``HORIZON`` elements covering ``Omega_R \\ Omega``.

    In 1D the interval is extended by ``R`` on both sides.  In 2D the design
    domain must be a disk mesh (boundary vertices on a common circle); the layer
    is built from rings of vertices radially offset from the boundary vertices.
    All new vertices are constrained.
    """
    if not R >= 0 or not np.isfinite(R):
        raise ParameterError(f"horizon must be non-negative, got {R}")
    if mesh.n_interior_elements != mesh.n_elements:
        raise ParameterError("mesh already carries a horizon layer")
    if R == 0:
        return mesh
    if mesh.dim == 1:
        return _extend_1d(mesh, R)
    return _extend_2d(mesh, R)


def _extend_1d(mesh: Mesh, R: float) -> Mesh:
    x = mesh.vertices[:, 0]
    lo_v, hi_v = int(np.argmin(x)), int(np.argmax(x))
    h = mesh.h
    m = max(1, math.ceil(R / h - 1e-9))
    nv = mesh.n_vertices
    left = x[lo_v] - R * np.arange(1, m + 1) / m
    right = x[hi_v] + R * np.arange(1, m + 1) / m
    vertices = np.concatenate([x, left, right])[:, None]
    li = np.concatenate([[lo_v], nv + np.arange(m)])
    ri = np.concatenate([[hi_v], nv + m + np.arange(m)])
    layer = [(li[k + 1], li[k]) for k in range(m)] + [(ri[k], ri[k + 1]) for k in range(m)]
    elements = np.vstack([mesh.elements, np.array(layer, dtype=np.int64)])
    interior = np.concatenate([mesh.interior_vertex, np.zeros(2 * m, dtype=bool)])
    region = np.concatenate([mesh.element_region, np.full(2 * m, HORIZON, dtype=np.int8)])
    return Mesh(vertices, elements, interior, region, float(R))


def boundary_loop(mesh: Mesh) -> np.ndarray:
    """Boundary vertices of a 2D mesh ordered by angle about their mean."""
    edges = np.sort(
        np.vstack([mesh.elements[:, [0, 1]], mesh.elements[:, [1, 2]], mesh.elements[:, [2, 0]]]),
        axis=1,
    )
    uniq, counts = np.unique(edges, axis=0, return_counts=True)
    bverts = np.unique(uniq[counts == 1])
    centre = mesh.vertices[bverts].mean(axis=0)
    d = mesh.vertices[bverts] - centre
    return bverts[np.argsort(np.arctan2(d[:, 1], d[:, 0]), kind="stable")]


def _extend_2d(mesh: Mesh, R: float) -> Mesh:
    loop = boundary_loop(mesh)
    pts = mesh.vertices[loop]
    centre = pts.mean(axis=0)
    radii = np.linalg.norm(pts - centre, axis=1)
    if np.ptp(radii) > 1e-9 * radii.max():
        raise ParameterError("2D horizon layers are only supported for disk meshes")
    spacing = np.linalg.norm(pts - np.roll(pts, -1, axis=0), axis=1).mean()
    m = max(1, int(round(R / spacing)))
    k = len(loop)
    nv = mesh.n_vertices
    rings = [loop]
    new_pts = []
    for j in range(1, m + 1):
        factor = (radii + j * R / m) / radii
        new_pts.append(centre + (pts - centre) * factor[:, None])
        rings.append(nv + (j - 1) * k + np.arange(k))
    tris = []
    for j in range(m):
        inner, outer = rings[j], rings[j + 1]
        for i in range(k):
            a, b = inner[i], inner[(i + 1) % k]
            c, d = outer[(i + 1) % k], outer[i]
            tris.append((a, b, c))
            tris.append((a, c, d))
    layer = np.array(tris, dtype=np.int64)
    vertices = np.vstack([mesh.vertices] + new_pts)
    elements = np.vstack([mesh.elements, layer])
    interior = np.concatenate([mesh.interior_vertex, np.zeros(m * k, dtype=bool)])
    region = np.concatenate([mesh.element_region, np.full(len(layer), HORIZON, dtype=np.int8)])
    return Mesh(vertices, elements, interior, region, float(R))


def classify_pair(mesh: Mesh, e1: int, e2: int) -> PairClass:
    n = mesh.n_elements
    for e in (e1, e2):
        if int(e) != e or not 0 <= e < n:
            raise ParameterError(f"element index {e} out of range [0, {n})")
    if e1 == e2:
        return PairClass.IDENTICAL
    shared = len(set(mesh.elements[e1].tolist()) & set(mesh.elements[e2].tolist()))
    if shared == 0:
        return PairClass.DISJOINT
    if shared == 1:
        return PairClass.VERTEX_TOUCH
    return PairClass.EDGE_TOUCH


def polygon_area(mesh: Mesh) -> float:
    """Shoelace area of the boundary polygon of a 2D mesh without layer."""
    p = mesh.vertices[boundary_loop(mesh)]
    x, y = p[:, 0], p[:, 1]
    return float(0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def point_location(mesh: Mesh, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Locate points in the mesh.

    Returns the containing element of every point and its barycentric
    coordinates there; points outside every element get element -1.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if mesh.dim == 1 and points.shape[1] != 1:
        points = points.reshape(-1, 1)
    p0 = mesh.vertices[mesh.elements[:, 0]]
    inv = np.linalg.inv(mesh.jacobians)
    found = np.full(len(points), -1, dtype=np.int64)
    bary = np.zeros((len(points), mesh.dim + 1))
    from scipy.spatial import cKDTree

    tree = cKDTree(mesh.centroids)
    k = min(mesh.n_elements, 12 if mesh.dim == 2 else 3)
    _, cand = tree.query(points, k=k)
    cand = np.atleast_2d(cand).reshape(len(points), -1)
    for col in range(cand.shape[1]):
        todo = found < 0
        if not todo.any():
            break
        e = cand[todo, col]
        loc = np.einsum("nij,nj->ni", inv[e], points[todo] - p0[e])
        lam = np.column_stack([1 - loc.sum(axis=1), loc])
        ok = (lam >= -1e-12).all(axis=1)
        idx = np.flatnonzero(todo)[ok]
        found[idx] = e[ok]
        bary[idx] = lam[ok]
    missing = np.flatnonzero(found < 0)
    for i in missing:  # brute force fallback
        loc = np.einsum("nij,nj->ni", inv, points[i] - p0)
        lam = np.column_stack([1 - loc.sum(axis=1), loc])
        ok = np.flatnonzero((lam >= -1e-12).all(axis=1))
        if ok.size:
            found[i] = ok[0]
            bary[i] = lam[ok[0]]
    return found, bary
