"""SPD solves and the discrete design-to-state map."""

from __future__ import annotations

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .errors import NumericalIntegrityError, ParameterError, SolverError
from .forms import (
    DesignField,
    FormKind,
    QuadConfig,
    Source,
    StateField,
    SymSparseMatrix,
    assemble_load,
    assemble_stiffness,
)
from .mesh import Mesh

DIRECT_LIMIT = 2000
DEFAULT_TOL = 1e-10


def _as_operator(K):
    if isinstance(K, SymSparseMatrix):
        return K
    if sp.issparse(K) or isinstance(K, np.ndarray):
        return SymSparseMatrix.from_full(K)
    raise ParameterError(f"unsupported matrix type {type(K).__name__}")


def pcg(K: SymSparseMatrix, F: np.ndarray, tol: float, max_iter: int) -> np.ndarray:
    """Conjugate gradients with Jacobi preconditioning.

    Raises
    ------
    SolverError
        When ``||K u - F|| / ||F|| > tol`` after ``max_iter`` iterations.
    """
    A = K.to_scipy()
    diag = A.diagonal()
    if np.any(diag <= 0):
        raise NumericalIntegrityError("matrix has a non-positive diagonal entry")
    inv_d = 1.0 / diag
    fnorm = np.linalg.norm(F)
    x = np.zeros_like(F)
    r = F.copy()
    z = inv_d * r
    p = z.copy()
    rz = r @ z
    for it in range(1, max_iter + 1):
        Ap = A @ p
        pAp = p @ Ap
        if pAp <= 0:
            raise NumericalIntegrityError("matrix is not positive definite (CG breakdown)")
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        res = np.linalg.norm(r) / fnorm
        if res <= tol:
            # guard against drift of the recursive residual
            true_res = np.linalg.norm(F - A @ x) / fnorm
            if true_res <= tol:
                return x
            r = F - A @ x
        z = inv_d * r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    res = np.linalg.norm(F - A @ x) / fnorm
    raise SolverError(f"CG did not converge in {max_iter} iterations (residual {res:.3e})", res, max_iter)


def solve_spd(K, F, tol: float = DEFAULT_TOL, max_iter: int = 10000) -> np.ndarray:
    """Solve ``K u = F`` for symmetric positive definite ``K``.

    Systems below 2000 unknowns are factorized (Cholesky); larger ones use
    Jacobi-preconditioned conjugate gradients.  The returned solution satisfies
    ``||K u - F|| <= tol ||F||``.
    """
    K = _as_operator(K)
    F = np.asarray(F, dtype=float)
    if F.shape != (K.n,):
        raise ParameterError(f"right-hand side has shape {F.shape}, matrix is {K.shape}")
    if not tol > 0:
        raise ParameterError("tol must be positive")
    fnorm = np.linalg.norm(F)
    if fnorm == 0.0:
        return np.zeros_like(F)
    if K.n < DIRECT_LIMIT:
        A = K.to_dense()
        try:
            c = scipy.linalg.cho_factor(A, lower=True)
        except np.linalg.LinAlgError as exc:
            raise NumericalIntegrityError("Cholesky factorization met a non-positive pivot") from exc
        u = scipy.linalg.cho_solve(c, F)
        res = np.linalg.norm(A @ u - F) / fnorm
        if res > tol:
            # one step of iterative refinement usually suffices
            u += scipy.linalg.cho_solve(c, F - A @ u)
            res = np.linalg.norm(A @ u - F) / fnorm
            if res > tol:
                raise SolverError(f"direct solve residual {res:.3e} exceeds tolerance", res, 0)
        return u
    return pcg(K, F, tol, max_iter)


def design_to_state(
    mesh: Mesh,
    design: DesignField,
    kind: FormKind,
    f: Source | str = "const:1",
    tol: float = DEFAULT_TOL,
    quad: QuadConfig | None = None,
) -> StateField:
    """Discrete state ``u`` with ``B[a](u, v) = <f, v>`` for all discrete ``v``."""
    if isinstance(f, str):
        f = Source.parse(f)
    comps = kind.components(mesh)
    F = assemble_load(mesh, f, comps)
    K = assemble_stiffness(mesh, design, kind, quad, check=False)
    return StateField(mesh, solve_spd(K, F, tol), comps)
