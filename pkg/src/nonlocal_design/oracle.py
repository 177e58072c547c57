"""Slow reference computations used to validate the fast assembly paths.

Everything here uses adaptive quadrature (scipy) with the singular kernel
handled analytically in the innermost direction, so it shares no code with the
transformed product rules of :mod:`quadrature`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate

from .errors import OracleError, ParameterError
from .forms import (
    DesignField,
    FormKind,
    QuadConfig,
    Source,
    StateField,
    assemble_stiffness,
    gamma_constant,
    local_energy,
)
from .mesh import INTERIOR, Mesh, build_interval_mesh, disk_mesh_for_dofs, extend_with_horizon

KORN_FLOOR = 0.01


def _power_moment(k: int, s: float, a: float, b: float) -> float:
    """``int_a^b r^(k - 1 - 2s) dr`` for ``0 <= a < b``."""
    p = k - 2.0 * s
    if b <= a:
        return 0.0
    if abs(p) < 1e-14:
        return math.log(b / a)
    if a == 0.0:
        if p <= 0:
            raise OracleError("divergent radial moment")
        return b**p / p
    return (b**p - a**p) / p


# 1D --------------------------------------------------------------------------


def _pair_local_1d(v1, v2, pts, s, tol):
    """Pair matrix over the union of the vertices of T1 and T2.

    ``v1`` and ``v2`` are vertex indices, ``pts`` their coordinates.  Returns
    ``(union, M)`` with ``M[p, q] = int_T1 int_T2 (phi_p(x) - phi_p(y))
    (phi_q(x) - phi_q(y)) |x - y|^(-1-2s)`` for the hats of the union vertices
    restricted to the two elements.
    """
    union = sorted(set(v1) | set(v2))
    pos = {v: i for i, v in enumerate(union)}
    nu = len(union)
    (a1, b1), (a2, b2) = sorted(pts[v1]), sorted(pts[v2])
    same = set(v1) == set(v2)

    def hats(vs, x):
        xa, xb = pts[vs[0]], pts[vs[1]]
        lam = np.array([(xb - x) / (xb - xa), (x - xa) / (xb - xa)])
        slope = np.array([-1.0, 1.0]) / (xb - xa)
        return lam, slope

    def inner(x):
        # phi(y) on T2 is affine: phi2(x + d) = phi2(x) + slope2 * d
        lam1, _ = hats(v1, x)
        lam2, sl2 = hats(v2, x)
        c0 = np.zeros(nu)
        c1 = np.zeros(nu)
        for k in range(2):
            c0[pos[v1[k]]] += lam1[k]
            c0[pos[v2[k]]] -= lam2[k]
            c1[pos[v2[k]]] -= sl2[k]
        m = (np.outer(c0, c0), np.outer(c0, c1) + np.outer(c1, c0), np.outer(c1, c1))
        out = np.zeros((nu, nu))
        lo, hi = a2 - x, b2 - x
        for sign in (1.0, -1.0):
            r0, r1 = (max(lo, 0.0), max(hi, 0.0)) if sign > 0 else (max(-hi, 0.0), max(-lo, 0.0))
            if r1 <= r0:
                continue
            for k in range(3):
                if r0 == 0.0 and k < 2:
                    if same:
                        continue  # c0 vanishes identically on the diagonal
                    raise OracleError("overlapping distinct elements")
                out += m[k] * sign**k * _power_moment(k, s, r0, r1)
        return out.ravel()

    val, err = integrate.quad_vec(inner, a1, b1, epsabs=0.0, epsrel=tol, limit=2000)
    if not np.all(np.isfinite(val)) or err > 1e3 * tol * max(np.abs(val).max(), 1e-300):
        raise OracleError(f"adaptive budget exhausted (error estimate {err:.3g})")
    return union, val.reshape(nu, nu)


def dense_fractional_assembly_1d(
    mesh: Mesh, design: DesignField, s: float, R: float, tol: float = 1e-11
) -> np.ndarray:
    """Dense fractional conductivity matrix on a 1D mesh by adaptive quadrature.

    The mesh may cover the design domain only; it is extended by the horizon
    layer of width ``R`` here when necessary.  Every ordered element pair is
    integrated with an outer adaptive rule in ``x`` and the inner integral over
    ``y`` in closed form.
    """
    if mesh.dim != 1:
        raise ParameterError("dense oracle is one-dimensional")
    if not 0.0 < s < 1.0:
        raise ParameterError(f"s must lie in (0, 1), got {s}")
    if mesh.n_interior_elements > 64:
        raise ParameterError("dense oracle limited to 64 interior elements")
    if mesh.horizon == 0.0:
        mesh = extend_with_horizon(mesh, R)
    elif not math.isclose(mesh.horizon, R, rel_tol=1e-12):
        raise ParameterError("mesh horizon does not match R")
    coef = design.all_values(mesh)
    pts = mesh.vertices[:, 0]
    gamma = gamma_constant(s, 1, 2)
    n = mesh.n_dofs
    K = np.zeros((n, n))
    interior = mesh.element_region == INTERIOR
    ne = mesh.n_elements
    for e1 in range(ne):
        for e2 in range(e1, ne):
            if not (interior[e1] or interior[e2]):
                continue
            v1, v2 = mesh.elements[e1].tolist(), mesh.elements[e2].tolist()
            if np.all(mesh.dof_index[v1 + v2] < 0):
                continue
            union, m = _pair_local_1d(v1, v2, pts, s, tol)
            weight = gamma * 0.5 * (coef[e1] + coef[e2]) * (1.0 if e1 == e2 else 2.0)
            idx = mesh.dof_index[union]
            keep = idx >= 0
            K[np.ix_(idx[keep], idx[keep])] += weight * m[np.ix_(keep, keep)]
    return 0.5 * (K + K.T)


# 2D element pairs ------------------------------------------------------------


def _affine_coeffs(tri, values):
    """Gradients and offsets of the affine functions with given vertex values."""
    A = np.column_stack([tri, np.ones(3)])
    coef = np.linalg.solve(A, values.T)  # (3, m)
    return coef[:2].T, coef[2]


def _polygon_moments(poly) -> tuple[float, np.ndarray, np.ndarray]:
    """Area, first and second moments of a convex polygon (exact)."""
    pts = np.asarray(poly.exterior.coords)[:-1]
    area, first, second = 0.0, np.zeros(2), np.zeros((2, 2))
    for i in range(1, len(pts) - 1):
        a, b, c = pts[0], pts[i], pts[i + 1]
        t = 0.5 * abs((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]))
        # edge midpoints integrate quadratics exactly on a triangle
        mids = np.array([(a + b) / 2, (b + c) / 2, (c + a) / 2])
        area += t
        first += t * mids.mean(axis=0)
        second += t * np.einsum("ki,kj->ij", mids, mids) / 3.0
    return area, first, second


_RADIAL_SAMPLES = 12


def _edge_lines(tri):
    """Outward normals ``n`` and offsets ``c`` with the triangle = {n.x <= c}."""
    c = tri.mean(axis=0)
    normals, offsets = [], []
    for i in range(3):
        p, q = tri[i], tri[(i + 1) % 3]
        n = np.array([q[1] - p[1], p[0] - q[0]])
        if n @ (c - p) > 0:
            n = -n
        normals.append(n)
        offsets.append(n @ p)
    return np.array(normals), np.array(offsets)


def pair_reference_2d(tri1, tri2, f1, f2, s: float, tol: float = 1e-8) -> np.ndarray:
    """Reference value of a 2D element-pair integral.

    Returns ``M[p, q] = int_T1 int_T2 (v_p(x) - v_p(y)) (v_q(x) - v_q(y))
    |x - y|^(-2-2s) dy dx`` where ``v_p`` is affine on T1 with vertex values
    ``f1[p]`` and affine on T2 with vertex values ``f2[p]``.  The integrand must
    vanish to second order on the diagonal (continuous piecewise-affine
    functions on touching or identical elements).

    With ``z = y - x`` the integrand is a quadratic polynomial in ``x`` on the
    convex polygon ``T1 ∩ (T2 - z)``, which is integrated exactly; the outer
    integral over ``z`` runs in polar coordinates through nested adaptive rules.
    """
    from shapely import affinity
    from shapely.geometry import Polygon

    tri1 = np.asarray(tri1, float)
    tri2 = np.asarray(tri2, float)
    f1 = np.atleast_2d(np.asarray(f1, float))
    f2 = np.atleast_2d(np.asarray(f2, float))
    m = f1.shape[0]
    g1, o1 = _affine_coeffs(tri1, f1)
    g2, o2 = _affine_coeffs(tri2, f2)
    # v(x) - v(x + z) = (g1 - g2) . x + (o1 - o2) - g2 . z
    gx, oc = g1 - g2, o1 - o2
    P1, P2 = Polygon(tri1), Polygon(tri2)
    reach = max(np.linalg.norm(b - a) for a in tri1 for b in tri2)
    lines1, lines2 = _edge_lines(tri1), _edge_lines(tri2)
    nodes, gl_w = np.polynomial.legendre.leggauss(_RADIAL_SAMPLES)

    def moments_at(rho, w):
        z = rho * w
        poly = P1.intersection(affinity.translate(P2, -z[0], -z[1]))
        if poly.is_empty or poly.area == 0.0:
            return np.zeros(m * m)
        area, first, second = _polygon_moments(poly)
        c = oc - g2 @ z  # constant part of the difference
        # int (gx.x + c)(gx.x + c)^T over the polygon
        lin = np.outer(gx @ first, c)
        out = gx @ second @ gx.T + lin + lin.T + area * np.outer(c, c)
        return out.ravel()

    def angular(theta):
        # between consecutive events the overlap polygon moves affinely in rho,
        # so the moments are quartic polynomials: sample, fit, integrate exactly
        w = np.array([math.cos(theta), math.sin(theta)])
        events = [0.0, reach]
        for (n, c), pts, sign in ((lines1, tri2, -1.0), (lines2, tri1, 1.0)):
            rate = sign * (n @ w)
            for k in range(3):
                gap = c[k] - pts @ n[k]
                if abs(rate[k]) > 1e-14:
                    events.extend(gap / rate[k])
        ev = np.clip(events, 0.0, reach)
        ev = np.unique(np.where(ev < 1e-12 * reach, 0.0, ev))
        total = np.zeros(m * m)
        for lo, hi in zip(ev[:-1], ev[1:]):
            if hi - lo < 1e-14 * reach:
                continue
            r = lo + (hi - lo) * (nodes + 1.0) / 2.0
            vals = np.array([moments_at(ri, w) for ri in r])
            if not vals.any():
                continue
            if lo >= 0.25 * hi:
                # kernel smooth on the interval: Gauss-Legendre is enough
                total += (gl_w * (hi - lo) / 2.0 * r ** (-1.0 - 2.0 * s)) @ vals
                continue
            # near the origin: fit the quartic in rho / hi and integrate exactly
            coef = np.polynomial.polynomial.polyfit(r / hi, vals, 4)
            mom = np.array(
                [0.0 if (lo == 0.0 and k < 2) else _power_moment(k, s, lo, hi) / hi**k for k in range(5)]
            )
            total += mom @ coef
        return total

    # the event ordering changes only at directions of vertex differences
    diff = (tri2[:, None, :] - tri1[None, :, :]).reshape(-1, 2)
    diff = np.vstack([diff, np.diff(np.vstack([tri1, tri1[:1]]), axis=0), np.diff(np.vstack([tri2, tri2[:1]]), axis=0)])
    diff = diff[np.linalg.norm(diff, axis=1) > 1e-14]
    ang = np.mod(np.arctan2(diff[:, 1], diff[:, 0]), np.pi)
    ang = np.unique(np.round(np.concatenate([ang, ang + np.pi]), 14))
    breaks = np.concatenate([[0.0], ang[(ang > 1e-12) & (ang < 2 * np.pi - 1e-12)], [2 * np.pi]])
    val = np.zeros(m * m)
    for a, b in zip(breaks[:-1], breaks[1:]):
        part, _ = integrate.quad_vec(angular, a, b, epsabs=0.0, epsrel=tol, limit=400)
        val += part
    if not np.all(np.isfinite(val)):
        raise OracleError("adaptive quadrature produced non-finite values")
    return val.reshape(m, m)


# limit probes ----------------------------------------------------------------


def _unit_energy(mesh: Mesh, kind: FormKind, v: np.ndarray, quad=None) -> float:
    K = assemble_stiffness(mesh, DesignField.constant(mesh, 1.0), kind, quad, check=False)
    return K.quadratic(v)


def bbm_limit_probe(mesh: Mesh, v: StateField | np.ndarray, s_ladder, R: float, quad=None):
    """Unit-coefficient fractional energies of a fixed P1 field as ``s`` grows.

    ``mesh`` covers the design domain only; each rung extends it by ``R``.
    Returns ``(rungs, local)`` with ``rungs = [(s, energy), ...]`` and the local
    Dirichlet energy ``||grad v||^2``.

    Raises
    ------
    OracleError
        If the gap to the local energy at the last rung is not the smallest.
    """
    if mesh.n_interior_elements != mesh.n_elements:
        raise ParameterError("pass the mesh without horizon layer")
    vals = v.dof_values if isinstance(v, StateField) else np.asarray(v, dtype=float)
    ext = extend_with_horizon(mesh, R)
    local = local_energy(mesh, vals)
    rungs = []
    for s in s_ladder:
        e = _unit_energy(ext, FormKind.fractional_conductivity(s, R), vals, quad)
        rungs.append((float(s), e))
    gaps = [abs(e - local) for _, e in rungs]
    if gaps and gaps[-1] > min(gaps) + 1e-14 * max(local, 1.0):
        raise OracleError(f"last rung is not closest to the local energy: gaps {gaps}")
    return rungs, local


def korn_probe(mesh2d: Mesh, s_ladder, R: float, samples: int = 200, seed: int = 0, quad=None):
    """Lower bound of the peridynamic energy by the componentwise fractional one.

    For each ``s`` returns ``(s, ratio)`` where ``ratio`` is the minimum of
    ``B_PD[1](v, v) / (B_s[1](v_1, v_1) + B_s[1](v_2, v_2))`` over ``samples``
    random fields and the extreme generalized eigenvector, i.e. the exact
    infimum over the discrete space.  ``mesh2d`` covers the design domain only.
    """
    if mesh2d.dim != 2:
        raise ParameterError("Korn probe needs a 2D mesh")
    if mesh2d.n_interior_elements != mesh2d.n_elements:
        raise ParameterError("pass the mesh without horizon layer")
    import scipy.linalg

    ext = extend_with_horizon(mesh2d, R)
    if ext.n_elements > 200:
        raise ParameterError("Korn probe limited to 200 elements")
    rng = np.random.default_rng(seed)
    n = ext.n_dofs
    out = []
    for s in s_ladder:
        one = DesignField.constant(ext, 1.0)
        Kpd = assemble_stiffness(ext, one, FormKind.fractional_peridynamic(s, R), quad).to_dense()
        Ks = assemble_stiffness(ext, one, FormKind.fractional_conductivity(s, R), quad).to_dense()
        Kc = np.zeros((2 * n, 2 * n))
        Kc[0::2, 0::2] = Ks
        Kc[1::2, 1::2] = Ks
        V = rng.standard_normal((samples, 2 * n))
        ratios = np.einsum("ki,ij,kj->k", V, Kpd, V) / np.einsum("ki,ij,kj->k", V, Kc, V)
        lam = scipy.linalg.eigh(Kpd, Kc, eigvals_only=True, subset_by_index=[0, 0])[0]
        ratio = float(min(ratios.min(), lam))
        if not ratio > 0:
            raise OracleError(f"non-positive Korn ratio {ratio} at s = {s}")
        out.append((float(s), ratio))
    return out


# finite differences ----------------------------------------------------------


def finite_difference_derivative(
    mesh: Mesh,
    design: DesignField,
    direction,
    kind: FormKind,
    f: Source | str = "const:1",
    step: float = 1e-5,
    Lambda=0.5,
    q: float = 2.0,
    quad: QuadConfig | None = None,
) -> float:
    """Central difference ``(r(a + h b) - r(a - h b)) / 2h`` of the reduced cost.

    The perturbed designs are not clamped, so ``a`` should keep a margin of
    ``h max|b|`` to the bounds.
    """
    from .optimizer import reduced_cost

    b = np.asarray(direction, dtype=float)
    lo, hi = design.bounds
    width = 2.0 * step * float(np.max(np.abs(b), initial=0.0))
    bounds = (max(lo - width, 0.5 * lo), hi + width)
    plus = DesignField(design.values + step * b, bounds, design.exterior_value)
    minus = DesignField(design.values - step * b, bounds, design.exterior_value)
    rp = reduced_cost(mesh, plus, kind, f, Lambda, q, quad, tol=1e-12)
    rm = reduced_cost(mesh, minus, kind, f, Lambda, q, quad, tol=1e-12)
    return (rp - rm) / (2.0 * step)


def random_design(mesh: Mesh, rng: np.random.Generator, bounds=(0.1, 2.0), margin: float = 0.05) -> DesignField:
    lo, hi = bounds
    vals = rng.uniform(lo + margin, hi - margin, mesh.n_interior_elements)
    return DesignField(vals, bounds)


def gradient_check(mesh: Mesh, kind: FormKind, trials: int = 20, seed: int = 0, step: float = 1e-5) -> list[float]:
    """Relative errors of the analytic derivative against central differences."""
    from .optimizer import directional_derivative

    rng = np.random.default_rng(seed)
    errors = []
    for _ in range(trials):
        a = random_design(mesh, rng)
        b = rng.uniform(-1.0, 1.0, a.values.size)
        exact = directional_derivative(mesh, a, b, kind, tol=1e-12)
        fd = finite_difference_derivative(mesh, a, b, kind, step=step)
        errors.append(abs(exact - fd) / max(abs(fd), 1e-300))
    return errors


# check suite -----------------------------------------------------------------


@dataclass
class CheckResult:
    name: str
    passed: bool
    measured: float
    tolerance: float

    def line(self) -> str:
        flag = "PASS" if self.passed else "FAIL"
        return f"{flag} {self.name}: measured {self.measured:.3e} (tolerance {self.tolerance:.1e})"


def run_checks(quick: bool = False, seed: int = 0) -> list[CheckResult]:
    """Invariant suite on small meshes; every entry reports its measured error."""
    rng = np.random.default_rng(seed)
    results = []

    # fast assembly against the dense reference
    n_el = 8 if quick else 16
    mesh = build_interval_mesh(0.0, 1.0, n_el)
    R = 0.25
    ext = extend_with_horizon(mesh, R)
    err = 0.0
    for s in ((0.5,) if quick else (0.25, 0.5, 0.75)):
        a = random_design(ext, rng)
        K = assemble_stiffness(ext, a, FormKind.fractional_conductivity(s, R)).to_dense()
        ref = dense_fractional_assembly_1d(ext, a, s, R)
        err = max(err, float(np.max(np.abs(K - ref)) / np.max(np.abs(ref))))
    results.append(CheckResult("fast vs dense assembly (1D)", err <= 1e-6, err, 1e-6))

    # derivative against finite differences
    gmesh = extend_with_horizon(build_interval_mesh(0.0, 1.0, 32), R)
    trials = 4 if quick else 20
    for kind, m in ((FormKind.fractional_conductivity(0.5, R), gmesh), (FormKind.local_conductivity(), build_interval_mesh(0.0, 1.0, 32))):
        e = max(gradient_check(m, kind, trials, seed))
        results.append(CheckResult(f"gradient vs finite differences ({kind.name})", e <= 1e-4, e, 1e-4))

    # coefficient bracket and partition identity
    kind = FormKind.fractional_conductivity(0.5, R)
    K1 = assemble_stiffness(ext, DesignField.constant(ext, 1.0), kind)
    worst = 0.0
    for _ in range(3 if quick else 10):
        a = random_design(ext, rng, margin=0.0)
        Ka = assemble_stiffness(ext, a, kind)
        for v in rng.standard_normal((100, ext.n_dofs)):
            e1, ea = K1.quadratic(v), Ka.quadratic(v)
            worst = max(worst, (0.1 * e1 - ea) / e1, (ea - 2.0 * e1) / e1)
    results.append(CheckResult("coefficient bracket", worst <= 1e-12, max(worst, 0.0), 1e-12))

    from .forms import element_gradient_values

    u = rng.standard_normal(ext.n_dofs)
    g = element_gradient_values(ext, u, kind, all_elements=True)
    total = K1.quadratic(u)
    perr = abs(g.sum() - total) / total
    results.append(CheckResult("partition identity", perr <= 1e-10, perr, 1e-10))

    # limit probes
    hat = np.zeros(7)
    hat[3] = 1.0
    rungs, local = bbm_limit_probe(build_interval_mesh(0.0, 1.0, 8), hat, (0.5, 0.9, 0.99, 0.999), 1.0)
    gap = abs(rungs[-1][1] - local) / local
    results.append(CheckResult("BBM limit gap", gap <= 0.1, gap, 0.1))

    if not quick:
        ratios = korn_probe(disk_mesh_for_dofs(1.0, 25), (0.3, 0.6, 0.9), 0.2, seed=seed)
        low = min(r for _, r in ratios)
        results.append(CheckResult("Korn ratio floor", low > KORN_FLOOR, low, KORN_FLOOR))
    return results
