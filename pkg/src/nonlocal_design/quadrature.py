"""Quadrature on simplices and on pairs of simplices.

Pair rules integrate ``g(x, y) |x - y|^(-n - 2s)`` over the product of two
reference simplices, where ``g`` is a product of two differences of affine
functions.  Pairs that share vertices are reduced, by cone decompositions about
the shared vertex, to integrals whose only non-smooth factor is a power of the
cone parameter; that power is absorbed into a Gauss-Jacobi weight.  The rules
therefore never sample the diagonal ``x = y`` and their weights are positive.

Reference simplices: ``[0, 1]`` and the triangle with vertices ``(0, 0)``,
``(1, 0)``, ``(0, 1)``.  Points are returned in barycentric coordinates with
respect to the local vertex order.  For touching pairs the shared vertices are
local vertex 0 (vertex touch), local vertices 0 and 1 in the same order (edge
touch), or all vertices (identical).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import roots_jacobi, roots_legendre

from .errors import ParameterError
from .mesh import PairClass

MAX_SIMPLEX_ORDER = 20
MAX_PAIR_ORDER = 12

# Strang-Fix / Dunavant rules with positive weights (area-normalized)
_TRI_RULES = {
    4: (
        [(0.108103018168070, 0.445948490915965, 0.445948490915965), 0.223381589678011],
        [(0.816847572980459, 0.091576213509771, 0.091576213509771), 0.109951743655322],
    ),
    5: (
        [(1 / 3, 1 / 3, 1 / 3), 0.225],
        [(0.059715871789770, 0.470142064105115, 0.470142064105115), 0.132394152788506],
        [(0.797426985353087, 0.101286507323456, 0.101286507323456), 0.125939180544827],
    ),
}


@dataclass(frozen=True)
class QuadRule:
    """Rule on a reference simplex: barycentric points and positive weights."""

    points: np.ndarray  # (nq, dim + 1)
    weights: np.ndarray  # (nq,)
    order: int

    @property
    def dim(self) -> int:
        return self.points.shape[1] - 1

    @property
    def cartesian(self) -> np.ndarray:
        return self.points[:, 1:]


@dataclass(frozen=True)
class PairQuadRule:
    """Rule on the product of two reference simplices.

    ``weight`` already contains the Jacobian of the singularity-removing
    transform; integrate by ``sum(weights * f(x_k, y_k))``.
    """

    pair_class: PairClass
    transform_kind: str  # "none", "duffy_vertex", "duffy_edge", "duffy_identical"
    x: np.ndarray  # (nq, dim + 1) barycentric in the first simplex
    y: np.ndarray  # (nq, dim + 1) barycentric in the second simplex
    weights: np.ndarray
    order: int
    s: float

    @property
    def dim(self) -> int:
        return self.x.shape[1] - 1


def _gauss_legendre01(n: int) -> tuple[np.ndarray, np.ndarray]:
    x, w = roots_legendre(n)
    return (x + 1.0) / 2.0, w / 2.0


def _gauss_jacobi01(n: int, beta: float) -> tuple[np.ndarray, np.ndarray]:
    """Nodes/weights for ``int_0^1 t**beta f(t) dt``."""
    if beta == 0.0:
        return _gauss_legendre01(n)
    x, w = roots_jacobi(n, 0.0, beta)
    return (x + 1.0) / 2.0, w / 2.0 ** (beta + 1.0)


def _points_for_order(order: int) -> int:
    return order // 2 + 1


@lru_cache(maxsize=None)
def gauss_simplex(dimension: int, order: int) -> QuadRule:
    """Positive-weight rule on the reference simplex exact to total degree ``order``."""
    if dimension not in (1, 2):
        raise ParameterError(f"dimension must be 1 or 2, got {dimension}")
    if int(order) != order or not 1 <= order <= MAX_SIMPLEX_ORDER:
        raise ParameterError(f"order must be in [1, {MAX_SIMPLEX_ORDER}], got {order}")
    if dimension == 1:
        t, w = _gauss_legendre01(_points_for_order(order))
        pts = np.column_stack([1.0 - t, t])
    elif order == 1:
        pts, w = np.full((1, 3), 1.0 / 3.0), np.array([0.5])
    elif order == 2:
        pts = np.array([[2 / 3, 1 / 6, 1 / 6], [1 / 6, 2 / 3, 1 / 6], [1 / 6, 1 / 6, 2 / 3]])
        w = np.full(3, 1.0 / 6.0)
    elif order in (3, 4, 5):
        pts, w = _symmetric_triangle_rule(max(order, 4))
    else:
        pts, w = _collapsed_triangle_rule(_points_for_order(order))
    for arr in (pts, w):
        arr.setflags(write=False)
    return QuadRule(pts, w, int(order))


def _symmetric_triangle_rule(order):
    pts, wts = [], []
    for bary, weight in _TRI_RULES[order]:
        perms = sorted(set([bary[i:] + bary[:i] for i in range(3)]))
        for p in perms:
            pts.append(p)
            wts.append(weight / 2.0)
    return np.array(pts), np.array(wts)


def _collapsed_triangle_rule(n):
    # x = u, y = (1 - u) v with the (1 - u) Jacobian absorbed into Gauss-Jacobi
    xu, wu = roots_jacobi(n, 1.0, 0.0)
    u, wu = (xu + 1.0) / 2.0, wu / 4.0
    v, wv = _gauss_legendre01(n)
    U, V = np.meshgrid(u, v, indexing="ij")
    W = np.outer(wu, wv)
    x = U.ravel()
    y = ((1.0 - U) * V).ravel()
    pts = np.column_stack([1.0 - x - y, x, y])
    return pts, W.ravel()


# pair rules ------------------------------------------------------------------


def singular_pair_rule(
    pair_class: PairClass, s: float, order: int, dimension: int = 1, vanishing: int = 2
) -> PairQuadRule:
    """Rule for ``g(x, y)|x - y|^(-n - 2s)`` on two reference simplices.

    Parameters
    ----------
    pair_class : PairClass
        Adjacency of the two simplices.
    s : float
        Fractional order in (0, 1).
    order : int
        Accuracy parameter ``k``.  Gauss factors along transformed directions
        and interval factors have ``2k`` points; triangle factors are
        ``gauss_simplex(2, 2k)``.
    dimension : int
        1 or 2.
    vanishing : int
        Order to which ``g`` vanishes at coincident points (2 for products of
        differences of continuous piecewise-affine functions).  It is folded into
        the Gauss-Jacobi exponent of the cone parameter.
    """
    if not 0.0 < s < 1.0:
        raise ParameterError(f"s must lie in (0, 1), got {s}")
    if int(order) != order or not 1 <= order <= MAX_PAIR_ORDER:
        raise ParameterError(f"order must be in [1, {MAX_PAIR_ORDER}], got {order}")
    if dimension not in (1, 2):
        raise ParameterError(f"dimension must be 1 or 2, got {dimension}")
    if dimension == 1 and pair_class == PairClass.EDGE_TOUCH:
        raise ParameterError("intervals cannot share an edge")
    return _pair_rule(PairClass(pair_class), float(s), int(order), int(dimension), int(vanishing))


@lru_cache(maxsize=256)
def _pair_rule(pair_class, s, order, dimension, vanishing):
    n = 2 * order
    builder = {
        (1, PairClass.DISJOINT): _disjoint,
        (2, PairClass.DISJOINT): _disjoint,
        (1, PairClass.IDENTICAL): _identical_1d,
        (1, PairClass.VERTEX_TOUCH): _vertex_1d,
        (2, PairClass.IDENTICAL): _identical_2d,
        (2, PairClass.VERTEX_TOUCH): _vertex_2d,
        (2, PairClass.EDGE_TOUCH): _edge_2d,
    }[(dimension, pair_class)]
    kind, x, y, w = builder(n, s, dimension, vanishing, order)
    assert np.all(w > 0)
    for arr in (x, y, w):
        arr.setflags(write=False)
    return PairQuadRule(pair_class, kind, x, y, w, order, s)


def _bary1(t):
    return np.column_stack([1.0 - t, t])


def _bary2(p):
    return np.column_stack([1.0 - p[:, 0] - p[:, 1], p[:, 0], p[:, 1]])


def _simplex_factor(dimension, order):
    if dimension == 1:
        t, w = _gauss_legendre01(2 * order)
        return QuadRule(_bary1(t), w, 4 * order - 1)
    return gauss_simplex(2, min(2 * order, MAX_SIMPLEX_ORDER))


def _disjoint(n, s, dimension, vanishing, order):
    rule = _simplex_factor(dimension, order)
    q = len(rule.weights)
    ix, iy = np.meshgrid(np.arange(q), np.arange(q), indexing="ij")
    ix, iy = ix.ravel(), iy.ravel()
    w = rule.weights[ix] * rule.weights[iy]
    return "none", rule.points[ix], rule.points[iy], w


def _identical_1d(n, s, dimension, vanishing, order):
    # z = x - y = +-t; overlap length of [0,1] and [0,1] + z is 1 - t
    dim_n = 1
    beta = 0 + vanishing - dim_n - 2 * s
    t, wt = _gauss_jacobi01(n, beta)
    xs, ys, ws = [], [], []
    for sign in (1.0, -1.0):
        z = sign * t
        x = (1.0 + z) / 2.0
        xs.append(x)
        ys.append(x - z)
        ws.append(wt * (1.0 - t) / t**beta)
    x, y, w = (np.concatenate(a) for a in (xs, ys, ws))
    return "duffy_identical", _bary1(x), _bary1(y), w


def _vertex_1d(n, s, dimension, vanishing, order):
    # both elements have the shared vertex at reference coordinate 0
    beta = 1 + vanishing - 1 - 2 * s
    t, wt = _gauss_jacobi01(n, beta)
    sig, ws = _gauss_legendre01(n)
    T, S = np.meshgrid(t, sig, indexing="ij")
    W = np.outer(wt, ws) * T / T**beta
    T, S, W = T.ravel(), S.ravel(), W.ravel()
    x = np.concatenate([T, T * S])
    y = np.concatenate([T * S, T])
    w = np.concatenate([W, W])
    return "duffy_vertex", _bary1(x), _bary1(y), w


def _identical_2d(n, s, dimension, vanishing, order):
    # difference body of the reference triangle: hexagon with unit gauge on its
    # boundary; the overlap |T ∩ (T + z)| equals (1 - gauge(z))^2 / 2
    hexagon = np.array([(1, 0), (0, 1), (-1, 1), (-1, 0), (0, -1), (1, -1)], dtype=float)
    beta = 1 + vanishing - 2 - 2 * s
    t, wt = _gauss_jacobi01(n, beta)
    sig, wsig = _gauss_legendre01(n)
    T, S = np.meshgrid(t, sig, indexing="ij")
    W = np.outer(wt, wsig)
    T, S, W = T.ravel(), S.ravel(), W.ravel()
    xs, ys, ws = [], [], []
    for k in range(6):
        pa, pb = hexagon[k], hexagon[(k + 1) % 6]
        det = abs(pa[0] * pb[1] - pa[1] * pb[0])
        z = T[:, None] * (pa + S[:, None] * (pb - pa))
        mu = np.column_stack([-z[:, 0] - z[:, 1], z[:, 0], z[:, 1]])
        m = np.maximum(mu, 0.0)
        gauge = m.sum(axis=1)
        lam = m + ((1.0 - gauge) / 3.0)[:, None]  # centroid of the overlap simplex
        xs.append(lam)
        ys.append(lam - mu)
        ws.append(W * det * T * 0.5 * (1.0 - T) ** 2 / T**beta)
    x, y, w = (np.concatenate(a) for a in (xs, ys, ws))
    return "duffy_identical", x, y, w


def _prism_faces_vertex(n, order):
    """Far faces of T x T seen from the common vertex (0, 0; 0, 0).

    Returns (points on the 3D faces as 4-vectors, tangent matrices, weights).
    Faces: E x T and T x E with E the edge opposite vertex 0.
    """
    alpha, wa = _gauss_legendre01(n)
    tri = _simplex_factor(2, order)
    q = tri.cartesian
    A, Qi = np.meshgrid(np.arange(n), np.arange(len(q)), indexing="ij")
    A, Qi = A.ravel(), Qi.ravel()
    a = alpha[A]
    edge = np.column_stack([1.0 - a, a])  # V1 + a (V2 - V1)
    tpt = q[Qi]
    w = wa[A] * tri.weights[Qi]
    out = []
    for first_on_edge in (True, False):
        if first_on_edge:
            F = np.column_stack([edge, tpt])
            tang = np.array([[-1, 1, 0, 0], [0, 0, 1, 0], [0, 0, 0, 1]], dtype=float)
        else:
            F = np.column_stack([tpt, edge])
            tang = np.array([[0, 0, -1, 1], [1, 0, 0, 0], [0, 1, 0, 0]], dtype=float)
        out.append((F, tang, w))
    return out


def _vertex_2d(n, s, dimension, vanishing, order):
    beta = 3 + vanishing - 2 - 2 * s
    t, wt = _gauss_jacobi01(n, beta)
    xs, ys, ws = [], [], []
    for F, tang, wf in _prism_faces_vertex(n, order):
        det = np.abs(np.linalg.det(np.concatenate([F[:, None, :], np.broadcast_to(tang, (len(F), 3, 4))], axis=1)))
        for tk, wk in zip(t, wt):
            P = tk * F
            xs.append(P[:, :2])
            ys.append(P[:, 2:])
            ws.append(wk * wf * det * tk**3 / tk**beta)
    x, y, w = (np.concatenate(a) for a in (xs, ys, ws))
    return "duffy_vertex", _bary2(x), _bary2(y), w


def _edge_2d(n, s, dimension, vanishing, order):
    # shared edge: reference vertices 0 and 1 in both triangles.  Cone from the
    # origin onto the faces E x T and T x E (E = edge V1-V2); on each face the
    # only coincidence is the point S = (V1, V1), removed by a second cone.
    beta_t = 3 + vanishing - 2 - 2 * s
    beta_r = 2 + vanishing - 2 - 2 * s
    t, wt = _gauss_jacobi01(n, beta_t)
    r, wr = _gauss_jacobi01(n, beta_r)
    g1, wg1 = _gauss_legendre01(n)
    tri = _simplex_factor(2, order)
    V0, V1, V2 = np.array([0.0, 0.0]), np.array([1.0, 0.0]), np.array([0.0, 1.0])
    S = np.concatenate([V1, V1])

    # sub-faces of the face E x T not containing S:
    #   {V2} x T            (triangle)
    #   E x [V0, V2]        (square)
    sub_faces = []
    q = tri.cartesian
    G = np.column_stack([np.broadcast_to(V2, (len(q), 2)), q])
    N = np.array([[0, 0, 1, 0], [0, 0, 0, 1]], dtype=float)
    sub_faces.append((G, N, tri.weights))
    A, B = np.meshgrid(g1, g1, indexing="ij")
    WAB = np.outer(wg1, wg1).ravel()
    A, B = A.ravel(), B.ravel()
    edge_pt = V1 + A[:, None] * (V2 - V1)
    seg_pt = V0 + B[:, None] * (V2 - V0)
    G = np.column_stack([edge_pt, seg_pt])
    N = np.array([[-1, 1, 0, 0], [0, 0, 0, 1]], dtype=float)
    sub_faces.append((G, N, WAB))

    xs, ys, ws = [], [], []
    for swap in (False, True):
        for G, N, wg in sub_faces:
            if swap:
                G = np.column_stack([G[:, 2:], G[:, :2]])
                N = np.column_stack([N[:, 2:], N[:, :2]])
            m = len(G)
            # 4D point X = t (S + r (G - S)); |J| = t^3 r^2 |det[S, G - S, N]|
            M = np.concatenate(
                [
                    np.broadcast_to(S, (m, 1, 4)),
                    (G - S)[:, None, :],
                    np.broadcast_to(N, (m, 2, 4)),
                ],
                axis=1,
            )
            det = np.abs(np.linalg.det(M))
            TT, RR, GG = np.meshgrid(np.arange(n), np.arange(n), np.arange(m), indexing="ij")
            TT, RR, GG = TT.ravel(), RR.ravel(), GG.ravel()
            tv, rv = t[TT], r[RR]
            P = tv[:, None] * (S + rv[:, None] * (G[GG] - S))
            w = (
                wt[TT] * wr[RR] * wg[GG] * det[GG]
                * tv**3 * rv**2 / (tv**beta_t * rv**beta_r)
            )
            xs.append(P[:, :2])
            ys.append(P[:, 2:])
            ws.append(w)
    x, y, w = (np.concatenate(a) for a in (xs, ys, ws))
    return "duffy_edge", _bary2(x), _bary2(y), w
