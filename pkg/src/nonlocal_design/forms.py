"""Bilinear forms, load vectors and per-element coefficient sensitivities.

Four forms are supported (see :class:`FormKind`): the fractional conductivity
form

    B_s[a](v, w) = gamma * iint_{D_R} A(x, y) (v(x) - v(y)) (w(x) - w(y)) |x - y|^(-n-2s),

with ``A(x, y) = (a(x) + a(y)) / 2``, its local limit ``int a grad v . grad w``,
the bond-based peridynamic form (same kernel acting on projected differences
``(w(x) - w(y)) . (x - y)/|x - y|``) and its local limit, linear elasticity with
prefactor ``1/(n + 2)``.

Fractional forms are evaluated element pair by element pair.  Touching and
nearby pairs are integrated with the singular product rules of
:mod:`quadrature` and their small pair matrices are stored once per mesh; the
remaining far field is handled either pair by pair as well or, for large scalar
problems, through point-to-point interaction matrices.  Every term is a sum of
positive weights times ``A_p d d^T`` so the assembled matrices are symmetric and
linear in the coefficient.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.spatial import cKDTree

from .errors import ConfigurationError, NumericalIntegrityError, ParameterError
from .mesh import INTERIOR, Mesh, PairClass
from .quadrature import gauss_simplex, singular_pair_rule

FRACTIONAL_CONDUCTIVITY = "fractional_conductivity"
LOCAL_CONDUCTIVITY = "local_conductivity"
FRACTIONAL_PERIDYNAMIC = "fractional_peridynamic"
LOCAL_ELASTICITY = "local_elasticity"

_SPHERE_MOMENT = {1: 2.0, 2: math.pi}  # int_{S^{n-1}} omega_1^2


def gamma_constant(s: float, n: int, p: int = 2) -> float:
    """Normalization ``p (1 - s) / int_{S^{n-1}} |omega_1|^p`` of the seminorm.

    Only ``p = 2`` and ``n`` in {1, 2} are supported.

    >>> gamma_constant(0.5, 1)
    0.5
    """
    if not 0.0 < s < 1.0:
        raise ParameterError(f"s must lie in (0, 1), got {s}")
    if n not in _SPHERE_MOMENT:
        raise ParameterError(f"dimension must be 1 or 2, got {n}")
    if p != 2:
        raise ParameterError(f"only p = 2 is supported, got {p}")
    return p * (1.0 - s) / _SPHERE_MOMENT[n]


@dataclass(frozen=True)
class FormKind:
    """Which bilinear form to assemble.

    Use the constructors :meth:`fractional_conductivity`, :meth:`local_conductivity`,
    :meth:`fractional_peridynamic` and :meth:`local_elasticity`.
    """

    name: str
    s: float = 1.0
    R: float = 0.0

    def __post_init__(self):
        if self.name not in (
            FRACTIONAL_CONDUCTIVITY,
            LOCAL_CONDUCTIVITY,
            FRACTIONAL_PERIDYNAMIC,
            LOCAL_ELASTICITY,
        ):
            raise ParameterError(f"unknown form kind {self.name!r}")
        if self.is_fractional:
            if not 0.0 < self.s < 1.0:
                raise ParameterError(f"s must lie in (0, 1), got {self.s}")
            if not self.R > 0.0 or not math.isfinite(self.R):
                raise ParameterError(f"horizon R must be positive, got {self.R}")

    @classmethod
    def fractional_conductivity(cls, s: float, R: float) -> FormKind:
        return cls(FRACTIONAL_CONDUCTIVITY, float(s), float(R))

    @classmethod
    def local_conductivity(cls) -> FormKind:
        return cls(LOCAL_CONDUCTIVITY)

    @classmethod
    def fractional_peridynamic(cls, s: float, R: float) -> FormKind:
        return cls(FRACTIONAL_PERIDYNAMIC, float(s), float(R))

    @classmethod
    def local_elasticity(cls) -> FormKind:
        return cls(LOCAL_ELASTICITY)

    @classmethod
    def from_parameters(cls, s: float, R: float, vector: bool = False) -> FormKind:
        """Fractional kind for ``s < 1``; the local limit for ``s == 1``."""
        if s == 1.0:
            return cls.local_elasticity() if vector else cls.local_conductivity()
        if vector:
            return cls.fractional_peridynamic(s, R)
        return cls.fractional_conductivity(s, R)

    @property
    def is_fractional(self) -> bool:
        return self.name in (FRACTIONAL_CONDUCTIVITY, FRACTIONAL_PERIDYNAMIC)

    @property
    def is_vector(self) -> bool:
        return self.name in (FRACTIONAL_PERIDYNAMIC, LOCAL_ELASTICITY)

    def components(self, mesh: Mesh) -> int:
        return mesh.dim if self.is_vector else 1


@dataclass
class DesignField:
    """Piecewise-constant coefficient on the interior elements.

    Parameters
    ----------
    values : array_like, shape (n_interior_elements,)
    bounds : (a_min, a_max)
    exterior_value : float, optional
        Coefficient on horizon-layer elements; defaults to the midpoint of the
        bounds and is never changed by the optimizer.
    """

    values: np.ndarray
    bounds: tuple[float, float] = (0.1, 2.0)
    exterior_value: float | None = None

    def __post_init__(self):
        lo, hi = (float(b) for b in self.bounds)
        if not 0.0 < lo <= hi or not math.isfinite(hi):
            raise ParameterError(f"invalid bounds {self.bounds}")
        self.bounds = (lo, hi)
        self.values = np.array(self.values, dtype=float).ravel()
        if self.exterior_value is None:
            self.exterior_value = 0.5 * (lo + hi)
        tol = 1e-12 * hi
        if self.values.size and (self.values.min() < lo - tol or self.values.max() > hi + tol):
            raise ParameterError("design values violate the bounds")
        if not lo - tol <= self.exterior_value <= hi + tol:
            raise ParameterError("exterior value violates the bounds")

    @classmethod
    def constant(cls, mesh: Mesh, value: float | None = None, bounds=(0.1, 2.0)) -> DesignField:
        """The same value on every element, horizon layer included."""
        lo, hi = bounds
        v = 0.5 * (lo + hi) if value is None else float(value)
        return cls(np.full(mesh.n_interior_elements, v), bounds, v)

    def with_values(self, values) -> DesignField:
        return DesignField(np.asarray(values, float), self.bounds, self.exterior_value)

    def all_values(self, mesh: Mesh) -> np.ndarray:
        """Coefficient on every element of ``mesh`` (interior then layer)."""
        if self.values.size != mesh.n_interior_elements:
            raise ConfigurationError(
                f"design has {self.values.size} values, mesh has "
                f"{mesh.n_interior_elements} interior elements"
            )
        out = np.full(mesh.n_elements, float(self.exterior_value))
        out[mesh.element_region == INTERIOR] = self.values
        return out

    def l2_norm(self, mesh: Mesh) -> float:
        inner = mesh.element_region == INTERIOR
        return float(np.sqrt(np.sum(self.values**2 * mesh.measures[inner])))


@dataclass
class StateField:
    """P1 function with zero extension outside the open design domain.

    ``dof_values`` has one entry per interior vertex (scalar) or ``dim`` entries
    per interior vertex, interleaved by vertex (vector).
    """

    mesh: Mesh
    dof_values: np.ndarray
    components: int = 1

    def __post_init__(self):
        self.dof_values = np.asarray(self.dof_values, dtype=float).ravel()
        if self.dof_values.size != self.mesh.n_dofs * self.components:
            raise ConfigurationError(
                f"state has {self.dof_values.size} values, expected "
                f"{self.mesh.n_dofs * self.components}"
            )

    def vertex_values(self, mesh: Mesh | None = None) -> np.ndarray:
        """Values at all vertices, shape (n_vertices, components); 0 off the DOFs."""
        mesh = self.mesh if mesh is None else mesh
        if mesh.n_dofs != self.mesh.n_dofs:
            raise ConfigurationError("state does not match the mesh")
        out = np.zeros((mesh.n_vertices, self.components))
        out[mesh.interior_vertex] = self.dof_values.reshape(-1, self.components)
        return out

    def l2_norm(self) -> float:
        return l2_norm(self.mesh, self.dof_values, self.components)


def l2_norm(mesh: Mesh, dof_values: np.ndarray, components: int = 1) -> float:
    """``||u||_{L2(Omega)}`` of a P1 field, exact for piecewise-affine functions."""
    vals = np.zeros((mesh.n_vertices, components))
    vals[mesh.interior_vertex] = np.asarray(dof_values, float).reshape(-1, components)
    inner = mesh.element_region == INTERIOR
    ev = vals[mesh.elements[inner]]  # (ne, d+1, c)
    k = mesh.dim + 1
    # int_T phi_i phi_j = |T| (1 + delta_ij) / ((k)(k+1))
    sq = np.einsum("eic,eic->e", ev, ev) + np.einsum("eic,ejc->e", ev, ev)
    total = np.sum(mesh.measures[inner] * sq) / (k * (k + 1))
    return float(np.sqrt(max(total, 0.0)))


# sparse symmetric storage ----------------------------------------------------


class SymSparseMatrix:
    """Symmetric matrix stored as the CSR lower triangle (diagonal included)."""

    def __init__(self, lower: sp.csr_matrix):
        lower = sp.csr_matrix(lower)
        if lower.shape[0] != lower.shape[1]:
            raise ParameterError("matrix must be square")
        lower.sum_duplicates()
        lower.sort_indices()
        self.lower = lower

    @classmethod
    def from_dense(cls, A: np.ndarray) -> SymSparseMatrix:
        A = np.asarray(A, dtype=float)
        return cls(sp.csr_matrix(np.tril(A)))

    @classmethod
    def from_full(cls, A) -> SymSparseMatrix:
        if sp.issparse(A):
            return cls(sp.tril(A, format="csr"))
        return cls.from_dense(A)

    @property
    def n(self) -> int:
        return self.lower.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.lower.shape

    @property
    def nnz(self) -> int:
        return self.lower.nnz

    def to_scipy(self) -> sp.csr_matrix:
        L = self.lower
        strict = sp.tril(L, k=-1)
        return (L + strict.T).tocsr()

    def to_dense(self) -> np.ndarray:
        L = self.lower.toarray()
        return L + np.tril(L, -1).T

    def diagonal(self) -> np.ndarray:
        return self.lower.diagonal()

    def matvec(self, x: np.ndarray) -> np.ndarray:
        L = self.lower
        return L @ x + sp.tril(L, k=-1).T @ x

    def __matmul__(self, x):
        return self.matvec(x)

    def quadratic(self, v: np.ndarray) -> float:
        return float(v @ self.matvec(v))


_MAGIC = b"NLDMAT01"


def save_matrix(path, K: SymSparseMatrix, mesh: Mesh, s: float, R: float) -> None:
    """Binary little-endian cache of the lower triangle, keyed by the mesh hash."""
    L = K.lower
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<QQdd", K.n, L.nnz, float(s), float(R)))
        fh.write(mesh.content_hash)
        fh.write(L.indptr.astype("<u8").tobytes())
        fh.write(L.indices.astype("<u8").tobytes())
        fh.write(L.data.astype("<f8").tobytes())


def load_matrix(path, mesh: Mesh) -> tuple[SymSparseMatrix, float, float]:
    """Read a cached matrix; returns ``(K, s, R)``.

    Raises
    ------
    ConfigurationError
        If the file is not a matrix cache or was written for another mesh.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != _MAGIC:
        raise ConfigurationError("not a matrix cache file")
    n, nnz, s, R = struct.unpack("<QQdd", raw[8:40])
    digest = raw[40:72]
    if digest != mesh.content_hash:
        raise ConfigurationError("matrix cache was written for a different mesh")
    off = 72
    indptr = np.frombuffer(raw, "<u8", n + 1, off).astype(np.int64)
    off += 8 * (n + 1)
    indices = np.frombuffer(raw, "<u8", nnz, off).astype(np.int64)
    off += 8 * nnz
    data = np.frombuffer(raw, "<f8", nnz, off).copy()
    return SymSparseMatrix(sp.csr_matrix((data, indices, indptr), shape=(n, n))), s, R


# sources ---------------------------------------------------------------------


@dataclass(frozen=True)
class Source:
    """Right-hand side ``f``: ``value`` everywhere or ``value`` on a ball.

    For vector problems the scalar profile multiplies ``direction``.
    """

    kind: str = "const"
    value: float = 1.0
    radius: float = 0.0
    center: tuple[float, ...] = ()
    direction: tuple[float, ...] = (1.0, 0.0)

    def __post_init__(self):
        if self.kind not in ("const", "ball"):
            raise ParameterError(f"unsupported source {self.kind!r}")
        if self.kind == "ball" and not self.radius > 0:
            raise ParameterError("ball source needs a positive radius")

    @classmethod
    def parse(cls, text: str) -> Source:
        """Parse ``const:c`` or ``ball:c:r:x0[:y0]``."""
        parts = text.strip().split(":")
        try:
            if parts[0] == "const" and len(parts) == 2:
                return cls("const", float(parts[1]))
            if parts[0] == "ball" and len(parts) in (4, 5):
                return cls("ball", float(parts[1]), float(parts[2]), tuple(float(p) for p in parts[3:]))
        except ValueError as exc:
            raise ParameterError(f"bad source descriptor {text!r}") from exc
        raise ParameterError(f"bad source descriptor {text!r}")

    def __str__(self) -> str:
        if self.kind == "const":
            return f"const:{self.value:g}"
        return ":".join(["ball", f"{self.value:g}", f"{self.radius:g}"] + [f"{c:g}" for c in self.center])

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        if self.kind == "const":
            return np.full(len(x), self.value)
        d = np.linalg.norm(x - np.asarray(self.center), axis=1)
        return np.where(d < self.radius, self.value, 0.0)


_CUT_ORDER = 10


def assemble_load(mesh: Mesh, f: Source, components: int = 1) -> np.ndarray:
    """Load vector ``F_i = int_Omega f phi_i``.

    Constant sources are integrated exactly.  Ball indicators are exact on
    elements entirely inside or outside the ball; elements cut by the sphere use
    a degree-10 rule without subdivision.
    """
    if isinstance(f, str):
        f = Source.parse(f)
    inner = np.flatnonzero(mesh.element_region == INTERIOR)
    k = mesh.dim + 1
    meas = mesh.measures[inner]
    local = np.zeros((len(inner), k))
    if f.kind == "const":
        local[:] = (f.value * meas / k)[:, None]
    else:
        if len(f.center) != mesh.dim:
            raise ParameterError("ball centre dimension does not match the mesh")
        pts = mesh.vertices[mesh.elements[inner]]
        c = np.asarray(f.center)
        dist = np.linalg.norm(pts - c, axis=2)
        inside = (dist <= f.radius).all(axis=1)
        # distance from the centre to the simplex is at least the min over vertices
        # minus the diameter, which is conservative enough to flag cut elements
        near = dist.min(axis=1) - mesh.diameters[inner] < f.radius
        cut = near & ~inside
        local[inside] = (f.value * meas[inside] / k)[:, None]
        if cut.any():
            rule = gauss_simplex(mesh.dim, _CUT_ORDER)
            xq = np.einsum("qk,ekd->eqd", rule.points, pts[cut])
            fv = f(xq.reshape(-1, mesh.dim)).reshape(xq.shape[:2])
            local[cut] = np.einsum("eq,q,qk->ek", fv, rule.weights, rule.points) * (
                meas[cut] * math.factorial(mesh.dim)
            )[:, None]
    dofs = mesh.element_dofs[inner]
    ok = dofs >= 0
    F = np.bincount(dofs[ok], weights=local[ok], minlength=mesh.n_dofs)
    if components == 1:
        return F
    direction = np.asarray(f.direction[:components], float)
    return np.outer(F, direction).ravel()


# quadrature configuration ----------------------------------------------------


@dataclass(frozen=True)
class QuadConfig:
    """Quadrature and storage options for fractional assembly.

    Orders follow :func:`quadrature.singular_pair_rule`.  ``far_mode`` selects
    how well-separated pairs are integrated: ``"pairs"`` stores one matrix per
    pair, ``"points"`` uses point interaction matrices (scalar kinds only) and
    ``"auto"`` picks by problem size.  ``cache`` controls whether the point
    interaction products are kept between passes (``"auto"`` keeps them when they
    fit into ``memory_mb``).
    """

    touching_order: int = 6
    near_order: int = 5
    far_order: int = 4
    near_factor: float = 3.0
    far_mode: str = "auto"
    cache: str = "auto"
    memory_mb: float = 1024.0
    chunk_rows: int = 512

    def __post_init__(self):
        for name in ("touching_order", "near_order", "far_order"):
            v = getattr(self, name)
            if int(v) != v or not 1 <= v <= 12:
                raise ParameterError(f"{name} must be an integer in [1, 12]")
        if self.far_mode not in ("auto", "pairs", "points"):
            raise ParameterError(f"unknown far_mode {self.far_mode!r}")
        if self.cache not in ("auto", "on", "off"):
            raise ParameterError(f"unknown cache mode {self.cache!r}")
        if not self.near_factor >= 0:
            raise ParameterError("near_factor must be non-negative")

    @classmethod
    def default(cls, dim: int) -> QuadConfig:
        """Defaults per dimension (2D product rules are far more expensive)."""
        if dim == 1:
            return cls()
        return cls(touching_order=3, near_order=2, far_order=2)


# local forms -----------------------------------------------------------------


def _local_element_matrices(mesh: Mesh, kind: FormKind, elems: np.ndarray) -> np.ndarray:
    """Unit-coefficient element matrices of the local kinds."""
    G = mesh.barycentric_gradients[elems]  # (ne, k, d)
    meas = mesh.measures[elems]
    if not kind.is_vector:
        return meas[:, None, None] * np.einsum("eid,ejd->eij", G, G)
    d = mesh.dim
    k = d + 1
    # strain of basis (vertex i, component c): eps = sym(e_c grad_i^T)
    E = np.zeros((len(elems), k, d, d, d))
    for c in range(d):
        E[:, :, c, c, :] += 0.5 * G
        E[:, :, c, :, c] += 0.5 * G
    E = E.reshape(len(elems), k * d, d, d)
    div = np.einsum("eaii->ea", E)
    M = 2.0 * np.einsum("eaij,ebij->eab", E, E) + np.einsum("ea,eb->eab", div, div)
    return meas[:, None, None] * M / (d + 2)


def _expand_dofs(dofs: np.ndarray, comps: int) -> np.ndarray:
    """Vertex DOF indices (..., k) -> component DOF indices (..., k*comps)."""
    if comps == 1:
        return dofs
    out = dofs[..., None] * comps + np.arange(comps)
    out = np.where(dofs[..., None] >= 0, out, -1)
    return out.reshape(*dofs.shape[:-1], -1)


def _scatter_sparse(n, dofs, mats):
    rows = np.repeat(dofs, dofs.shape[1], axis=1).ravel()
    cols = np.tile(dofs, (1, dofs.shape[1])).ravel()
    vals = mats.ravel()
    ok = (rows >= 0) & (cols >= 0)
    return sp.coo_matrix((vals[ok], (rows[ok], cols[ok])), shape=(n, n)).tocsr()


def _gather(u_full: np.ndarray, dofs: np.ndarray) -> np.ndarray:
    """Values at local DOFs with zero for constrained ones."""
    ext = np.concatenate([u_full, [0.0]])
    return ext[np.where(dofs >= 0, dofs, -1)]


# fractional operator ---------------------------------------------------------


def _pair_permutation(va, vb):
    """Local vertex orders putting shared vertices first, in the same order."""
    shared = [v for v in va if v in set(vb)]
    pa = [list(va).index(v) for v in shared] + [i for i, v in enumerate(va) if v not in shared]
    pb = [list(vb).index(v) for v in shared] + [i for i, v in enumerate(vb) if v not in shared]
    return pa, pb


class FractionalOperator:
    """Pair-structured representation of a fractional form on one mesh.

    Building the operator evaluates all near-field pair integrals once; the
    stiffness matrix for any coefficient and the per-element sensitivities
    ``g_T = B_s[chi_T](u, u)`` are then cheap reductions over the stored pairs.
    """

    def __init__(self, mesh: Mesh, kind: FormKind, quad: QuadConfig | None = None):
        if not kind.is_fractional:
            raise ParameterError("FractionalOperator needs a fractional kind")
        if mesh.horizon <= 0 or mesh.n_interior_elements == mesh.n_elements:
            raise ConfigurationError("fractional forms need a mesh with a horizon layer")
        if mesh.horizon < kind.R * (1 - 1e-12):
            raise ConfigurationError(f"horizon layer {mesh.horizon} is thinner than R = {kind.R}")
        if not math.isclose(mesh.horizon, kind.R, rel_tol=1e-9):
            raise ConfigurationError(f"horizon layer {mesh.horizon} does not match R = {kind.R}")
        self.mesh = mesh
        self.kind = kind
        self.quad = quad or QuadConfig.default(mesh.dim)
        self.comps = kind.components(mesh)
        self.n = mesh.n_dofs * self.comps
        self.gamma = gamma_constant(kind.s, mesh.dim, 2)
        self.n_elements = mesh.n_elements
        far_mode = self.quad.far_mode
        if far_mode == "auto":
            far_mode = "points" if (mesh.dim == 2 and not kind.is_vector and mesh.n_elements > 600) else "pairs"
        if far_mode == "points" and kind.is_vector:
            raise ConfigurationError("point far field is only available for scalar kinds")
        self.far_mode = far_mode
        self._build_pairs()
        self._far_cache = None

    # pair enumeration ---------------------------------------------------------

    def _candidate_pairs(self):
        mesh = self.mesh
        ne = mesh.n_elements
        interior = mesh.element_region == INTERIOR
        cen = mesh.centroids
        tree = cKDTree(cen)
        radius = self.quad.near_factor * mesh.h
        near = tree.query_pairs(radius, output_type="ndarray") if radius > 0 else np.zeros((0, 2), int)
        # touching pairs are always near
        touch = self._touching_pairs()
        pairs = np.vstack([near.reshape(-1, 2), touch, np.column_stack([np.arange(ne)] * 2)])
        pairs = np.sort(pairs, axis=1)
        pairs = np.unique(pairs, axis=0)
        pairs = pairs[interior[pairs[:, 0]] | interior[pairs[:, 1]]]
        return pairs

    def _touching_pairs(self):
        mesh = self.mesh
        el = mesh.elements
        k = el.shape[1]
        v2e = sp.csr_matrix(
            (np.ones(el.size), (el.ravel(), np.repeat(np.arange(len(el)), k))),
            shape=(mesh.n_vertices, len(el)),
        )
        adj = sp.triu((v2e.T @ v2e).tocoo(), k=1)
        return np.column_stack([adj.row, adj.col])

    def _shared_counts(self, pairs):
        el = self.mesh.elements
        a, b = el[pairs[:, 0]], el[pairs[:, 1]]
        return (a[:, :, None] == b[:, None, :]).sum(axis=(1, 2))

    def _build_pairs(self):
        mesh = self.mesh
        near = self._candidate_pairs()
        if self.far_mode == "pairs":
            ne = mesh.n_elements
            interior = np.flatnonzero(mesh.element_region == INTERIOR)
            ii, jj = np.meshgrid(interior, np.arange(ne), indexing="ij")
            allp = np.sort(np.column_stack([ii.ravel(), jj.ravel()]), axis=1)
            allp = np.unique(allp, axis=0)
            key_near = near[:, 0] * ne + near[:, 1]
            far = allp[~np.isin(allp[:, 0] * ne + allp[:, 1], key_near)]
        else:
            far = np.zeros((0, 2), dtype=np.int64)
        self.near_pairs = near
        shared = self._shared_counts(near)
        classes = np.where(near[:, 0] == near[:, 1], 3, np.minimum(shared, 2))
        blocks = []
        for cls_id in (3, 2, 1, 0):
            sel = near[classes == cls_id]
            if len(sel):
                order = self.quad.near_order if cls_id == 0 else self.quad.touching_order
                blocks.append(self._pair_block(sel, PairClass(cls_id), order))
        if len(far):
            blocks.append(self._pair_block(far, PairClass.DISJOINT, self.quad.far_order))
        self.pair_e1 = np.concatenate([b[0] for b in blocks])
        self.pair_e2 = np.concatenate([b[1] for b in blocks])
        self.pair_dofs = np.concatenate([b[2] for b in blocks])
        self.pair_mats = np.concatenate([b[3] for b in blocks])
        self.pair_identical = self.pair_e1 == self.pair_e2
        if self.far_mode == "points":
            # element pairs already integrated above are masked out of the far field
            ne = mesh.n_elements
            ones = np.ones(len(near), dtype=bool)
            m = sp.csr_matrix((ones, (near[:, 0], near[:, 1])), shape=(ne, ne))
            self._near_mask = (m + m.T).astype(bool).tocsr()

    def _pair_block(self, pairs, pair_class, order, chunk=4096):
        mesh = self.mesh
        dim = mesh.dim
        k = dim + 1
        rule = singular_pair_rule(pair_class, self.kind.s, order, dim)
        if pair_class in (PairClass.DISJOINT, PairClass.IDENTICAL):
            perm_a = np.tile(np.arange(k), (len(pairs), 1))
            perm_b = perm_a.copy()
        else:
            perms = [_pair_permutation(mesh.elements[a], mesh.elements[b]) for a, b in pairs]
            perm_a = np.array([p[0] for p in perms])
            perm_b = np.array([p[1] for p in perms])
        verts_a = np.take_along_axis(mesh.elements[pairs[:, 0]], perm_a, axis=1)
        verts_b = np.take_along_axis(mesh.elements[pairs[:, 1]], perm_b, axis=1)
        # Local functions are differences v(x) - v(y) over the union of the
        # pair's vertices, so every entry vanishes on the diagonal and no
        # divergent pieces have to cancel after scattering.
        m = {PairClass.IDENTICAL: k, PairClass.EDGE_TOUCH: 2, PairClass.VERTEX_TOUCH: 1}.get(pair_class, 0)
        vdofs = np.concatenate([mesh.dof_index[verts_a], mesh.dof_index[verts_b]], axis=1)
        basis = np.concatenate([rule.x, -rule.y], axis=1)  # (nq, 2k)
        if m:
            basis[:, :m] += basis[:, k : k + m]
            basis[:, k : k + m] = 0.0
            vdofs[:, k : k + m] = -1
        dofs = _expand_dofs(vdofs, self.comps)
        det = mesh.measures * math.factorial(dim)
        jac = det[pairs[:, 0]] * det[pairs[:, 1]]
        L = 2 * k * self.comps
        mats = np.empty((len(pairs), L, L))
        for lo in range(0, len(pairs), chunk):
            hi = min(lo + chunk, len(pairs))
            Pa = mesh.vertices[verts_a[lo:hi]]
            Pb = mesh.vertices[verts_b[lo:hi]]
            X = np.einsum("qk,pkd->pqd", rule.x, Pa)
            Y = np.einsum("qk,pkd->pqd", rule.y, Pb)
            Z = X - Y
            r = np.sqrt(np.einsum("pqd,pqd->pq", Z, Z))
            w = rule.weights * r ** (-dim - 2.0 * self.kind.s)
            if self.comps == 1:
                mats[lo:hi] = np.einsum("pq,qa,qb->pab", w, basis, basis)
            else:
                e = Z / r[..., None]
                # basis (vertex a, comp c): D = basis_a * e_c
                B = np.einsum("qa,pqc->pqac", basis, e).reshape(hi - lo, len(rule.weights), L)
                mats[lo:hi] = np.einsum("pq,pqa,pqb->pab", w, B, B)
            mats[lo:hi] *= jac[lo:hi, None, None]
        return pairs[:, 0].copy(), pairs[:, 1].copy(), dofs, mats

    # reductions ---------------------------------------------------------------

    def _pair_weights(self, coef):
        """Coefficient multiplying each stored pair matrix (before gamma)."""
        A = 0.5 * (coef[self.pair_e1] + coef[self.pair_e2])
        return np.where(self.pair_identical, A, 2.0 * A)

    def dense_matrix(self, design: DesignField | np.ndarray) -> np.ndarray:
        coef = design.all_values(self.mesh) if isinstance(design, DesignField) else np.asarray(design, float)
        n = self.n
        c = self.gamma * self._pair_weights(coef)
        dofs = self.pair_dofs
        L = dofs.shape[1]
        rows = np.repeat(dofs, L, axis=1)
        cols = np.tile(dofs, (1, L))
        ok = (rows >= 0) & (cols >= 0)
        vals = (c[:, None, None] * self.pair_mats).reshape(len(c), -1)
        K = np.bincount((rows * n + cols)[ok], weights=vals[ok], minlength=n * n).reshape(n, n)
        if self.far_mode == "points":
            K += self._far_points_matrix(coef)
        return 0.5 * (K + K.T)

    def matrix(self, design) -> SymSparseMatrix:
        return SymSparseMatrix.from_dense(self.dense_matrix(design))

    def pair_energies(self, u: np.ndarray) -> np.ndarray:
        uloc = _gather(np.asarray(u, float), self.pair_dofs)
        return np.einsum("pa,pab,pb->p", uloc, self.pair_mats, uloc)

    def element_values(self, u: np.ndarray) -> np.ndarray:
        """``g_T = B_s[chi_T](u, u)`` for every element (interior and layer)."""
        u = np.asarray(u, float)
        if u.size != self.n:
            raise ConfigurationError(f"state has {u.size} values, operator expects {self.n}")
        I = self.gamma * self.pair_energies(u)
        ne = self.n_elements
        g = np.bincount(self.pair_e1, weights=I, minlength=ne)
        g += np.bincount(self.pair_e2, weights=np.where(self.pair_identical, 0.0, I), minlength=ne)
        if self.far_mode == "points":
            g += self._far_points_element_values(u)
        return g

    def energy(self, u: np.ndarray, design=None) -> float:
        """``B_s[a](u, u)``; unit coefficient when ``design`` is None."""
        if design is None:
            return float(np.sum(self.element_values(u)))
        g = self.element_values(u)
        coef = design.all_values(self.mesh) if isinstance(design, DesignField) else np.asarray(design, float)
        return float(g @ coef)

    # point far field ------------------------------------------------------------

    @cached_property
    def _points(self):
        mesh = self.mesh
        rule = gauss_simplex(mesh.dim, min(2 * self.quad.far_order, 20))
        pts = mesh.vertices[mesh.elements]  # (ne, k, d)
        X = np.einsum("qk,ekd->eqd", rule.points, pts).reshape(-1, mesh.dim)
        nq = len(rule.weights)
        W = (rule.weights[None, :] * (mesh.measures * math.factorial(mesh.dim))[:, None]).ravel()
        elem = np.repeat(np.arange(mesh.n_elements), nq)
        interior_elems = np.flatnonzero(mesh.element_region == INTERIOR)
        rows = np.concatenate([np.arange(e * nq, (e + 1) * nq) for e in interior_elems])
        # values of the hat functions at interior points
        dofs = mesh.element_dofs[elem[rows]]
        lam = np.tile(rule.points, (len(interior_elems), 1))
        ok = dofs >= 0
        r_idx = np.repeat(np.arange(len(rows)), dofs.shape[1]).reshape(dofs.shape)
        Phi = sp.csr_matrix((lam[ok], (r_idx[ok], dofs[ok])), shape=(len(rows), mesh.n_dofs))
        Xel = sp.csr_matrix((np.ones(len(elem)), (np.arange(len(elem)), elem)), shape=(len(elem), mesh.n_elements))
        return {"X": X, "w": W, "elem": elem, "rows": rows, "Phi": Phi, "Xel": Xel}

    def _far_chunks(self):
        """Yield (row slice, masked interaction block W[rows, :]) over interior points."""
        P = self._points
        rows, X, w, elem = P["rows"], P["X"], P["w"], P["elem"]
        expo = -self.mesh.dim - 2.0 * self.kind.s
        step = self.quad.chunk_rows
        for lo in range(0, len(rows), step):
            r = rows[lo : lo + step]
            D = X[r, None, :] - X[None, :, :]
            dist2 = np.einsum("ijd,ijd->ij", D, D)
            mask = self._near_mask[elem[r]].toarray()[:, elem]
            dist2[mask] = 1.0
            Wb = (w[r][:, None] * w[None, :]) * dist2 ** (expo / 2.0)
            Wb[mask] = 0.0
            yield slice(lo, lo + len(r)), Wb

    def _far_products(self):
        """Row sums ``c``, ``Q = W_II Phi`` and ``Z = W X`` over interior points."""
        if self._far_cache is not None:
            return self._far_cache
        P = self._points
        rows, Phi, Xel = P["rows"], P["Phi"], P["Xel"]
        nI = len(rows)
        c = np.empty(nI)
        Q = np.empty((nI, self.mesh.n_dofs))
        Z = np.empty((nI, self.n_elements))
        # Phi is indexed by interior-point order; embed into all points
        Phi_all = sp.csr_matrix((Phi.data, Phi.indices, Phi.indptr), shape=Phi.shape)
        emb = sp.csr_matrix((np.ones(nI), (rows, np.arange(nI))), shape=(len(P["X"]), nI))
        Phi_full = (emb @ Phi_all).tocsc()
        XelT = Xel.tocsc()
        for sl, Wb in self._far_chunks():
            c[sl] = Wb.sum(axis=1)
            Q[sl] = (Phi_full.T @ Wb.T).T
            Z[sl] = (XelT.T @ Wb.T).T
        out = (c, Q, Z)
        if self._keep_cache(nI):
            self._far_cache = out
        return out

    def _keep_cache(self, nI):
        mode = self.quad.cache
        if mode == "on":
            return True
        if mode == "off":
            return False
        size_mb = nI * (self.mesh.n_dofs + self.n_elements) * 8 / 2**20
        return size_mb <= self.quad.memory_mb

    def _far_points_matrix(self, coef):
        c, Q, Z = self._far_products()
        P = self._points
        Phi = P["Phi"]
        a_pts = coef[P["elem"][P["rows"]]]
        d = 0.5 * (a_pts * c + Z @ coef)
        S = (Phi.T @ (a_pts[:, None] * Q))
        K = (Phi.T @ Phi.multiply(d[:, None]).tocsr()).toarray()
        return 2.0 * self.gamma * (K - 0.5 * (S + S.T))

    def _far_points_element_values(self, u):
        c, Q, Z = self._far_products()
        P = self._points
        Phi = P["Phi"]
        uq = Phi @ u
        per_point = uq**2 * c - 2.0 * uq * (Q @ u)
        elem_I = P["elem"][P["rows"]]
        g = np.bincount(elem_I, weights=per_point, minlength=self.n_elements)
        g += Z.T @ (uq**2)
        return self.gamma * g


# operator cache --------------------------------------------------------------

_OPERATORS: dict = {}
_MAX_OPERATORS = 4


def fractional_operator(mesh: Mesh, kind: FormKind, quad: QuadConfig | None = None) -> FractionalOperator:
    """Shared :class:`FractionalOperator` for (mesh, kind, quad), kept in a small LRU."""
    quad = quad or QuadConfig.default(mesh.dim)
    key = (mesh.content_hash, kind, quad)
    op = _OPERATORS.pop(key, None)
    if op is None:
        op = FractionalOperator(mesh, kind, quad)
    _OPERATORS[key] = op
    while len(_OPERATORS) > _MAX_OPERATORS:
        _OPERATORS.pop(next(iter(_OPERATORS)))
    return op


def clear_operator_cache() -> None:
    _OPERATORS.clear()


# public entry points ---------------------------------------------------------


def assemble_stiffness(
    mesh: Mesh, design: DesignField, kind: FormKind, quad: QuadConfig | None = None, check: bool = True
) -> SymSparseMatrix:
    """Stiffness matrix of ``kind`` with coefficient ``design`` on the DOFs of ``mesh``.

    Raises
    ------
    ConfigurationError
        Fractional kind on a mesh without a matching horizon layer.
    NumericalIntegrityError
        The assembled matrix is not positive definite (with ``check``).
    """
    if kind.is_fractional:
        K = fractional_operator(mesh, kind, quad).dense_matrix(design)
        if check and K.size:
            try:
                scipy.linalg.cho_factor(K, lower=True, check_finite=True)
            except (np.linalg.LinAlgError, ValueError) as exc:
                raise NumericalIntegrityError("assembled fractional matrix is not SPD") from exc
        return SymSparseMatrix.from_dense(K)
    coef = design.all_values(mesh)
    inner = np.flatnonzero(mesh.element_region == INTERIOR)
    comps = kind.components(mesh)
    mats = _local_element_matrices(mesh, kind, inner) * coef[inner][:, None, None]
    dofs = _expand_dofs(mesh.element_dofs[inner], comps)
    K = _scatter_sparse(mesh.n_dofs * comps, dofs, mats)
    if check and K.shape[0] and np.any(K.diagonal() <= 0):
        raise NumericalIntegrityError("local stiffness has a non-positive diagonal")
    return SymSparseMatrix.from_full(K)


def element_gradient_values(
    mesh: Mesh, u: StateField | np.ndarray, kind: FormKind, quad: QuadConfig | None = None,
    all_elements: bool = False,
) -> np.ndarray:
    """Per-element sensitivities ``g_T = B[chi_T](u, u)``.

    Returns values for the interior elements (the design unknowns) unless
    ``all_elements`` is set, in which case layer elements are included and the
    values sum to ``B[1](u, u)``.
    """
    comps = kind.components(mesh)
    vals = u.dof_values if isinstance(u, StateField) else np.asarray(u, float)
    if vals.size != mesh.n_dofs * comps:
        raise ConfigurationError(f"state has {vals.size} values, expected {mesh.n_dofs * comps}")
    if kind.is_fractional:
        g = fractional_operator(mesh, kind, quad).element_values(vals)
    else:
        g = np.zeros(mesh.n_elements)
        inner = np.flatnonzero(mesh.element_region == INTERIOR)
        mats = _local_element_matrices(mesh, kind, inner)
        uloc = _gather(vals, _expand_dofs(mesh.element_dofs[inner], comps))
        g[inner] = np.einsum("ea,eab,eb->e", uloc, mats, uloc)
    if all_elements:
        return g
    return g[mesh.element_region == INTERIOR]


def local_energy(mesh: Mesh, u: np.ndarray, kind: FormKind | None = None) -> float:
    """Unit-coefficient local energy (Dirichlet or elasticity) of a P1 field."""
    kind = kind or FormKind.local_conductivity()
    if kind.is_fractional:
        kind = FormKind.local_elasticity() if kind.is_vector else FormKind.local_conductivity()
    return float(np.sum(element_gradient_values(mesh, u, kind)))


def seminorm(mesh: Mesh, u: StateField | np.ndarray, kind: FormKind, quad: QuadConfig | None = None) -> float:
    """``sqrt(B[1](u, u))``: the (fractional) seminorm used in the result tables."""
    g = element_gradient_values(mesh, u, kind, quad, all_elements=True)
    return float(np.sqrt(max(np.sum(g), 0.0)))
