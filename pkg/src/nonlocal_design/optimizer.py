"""Reduced cost, its derivative and projected gradient descent on the design.

The reduced cost of a design ``a`` is

    r(a) = <f, u(a)> + sum_T Lambda |a_T|^q |T|,

with ``u(a)`` the discrete state.  Because the state equation is symmetric its
derivative needs no adjoint solve:

    Dr[a](b) = -sum_T b_T g_T + sum_T Lambda q a_T^(q-1) b_T |T|,
    g_T = B[chi_T](u, u).

The descent step on element ``T`` is
``a_T <- clamp(a_T + tau/|T| (g_T - q Lambda a_T^(q-1) |T|))``; for
``Lambda = 1/2, q = 2`` this is ``tau/|T| g_T + (1 - tau) a_T``.
"""

from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import NonlocalDesignError, ParameterError
from .forms import (
    DesignField,
    FormKind,
    QuadConfig,
    Source,
    StateField,
    assemble_load,
    element_gradient_values,
)
from .mesh import INTERIOR, Mesh
from .solver import DEFAULT_TOL, design_to_state

log = logging.getLogger(__name__)

LOG_COLUMNS = ("iter", "reduced_cost", "state_l2", "design_l2", "max_design", "min_design")
DESCENT_SLACK = 1e-12


@dataclass
class PgdConfig:
    """Settings of the projected gradient descent.

    ``stop_tol`` (off by default) stops early once the relative cost decrease of
    one step falls below it.
    """

    kind: FormKind
    source: Source = field(default_factory=Source)
    tau: float = 0.25
    max_iterations: int = 20
    bounds: tuple[float, float] = (0.1, 2.0)
    Lambda: float = 0.5
    q: float = 2.0
    solver_tol: float = DEFAULT_TOL
    stop_tol: float | None = None
    quad: QuadConfig | None = None

    def __post_init__(self):
        if isinstance(self.source, str):
            self.source = Source.parse(self.source)
        if not 0.0 < self.tau <= 1.0:
            raise ParameterError(f"tau must lie in (0, 1], got {self.tau}")
        if int(self.max_iterations) != self.max_iterations or self.max_iterations < 0:
            raise ParameterError("max_iterations must be a non-negative integer")
        if not self.q > 1.0:
            raise ParameterError(f"q must exceed 1, got {self.q}")
        if not np.all(np.asarray(self.Lambda) > 0):
            raise ParameterError("Lambda must be positive")
        lo, hi = self.bounds
        if not 0.0 < lo <= hi:
            raise ParameterError(f"invalid bounds {self.bounds}")
        if self.stop_tol is not None and not self.stop_tol > 0:
            raise ParameterError("stop_tol must be positive when given")


@dataclass
class PgdResult:
    design: DesignField
    state: StateField
    cost_history: list[float]
    gradient_sweep_time: float
    solve_time: float
    iterations_run: int
    log_rows: list[tuple] = field(default_factory=list)
    descent_violations: list[tuple[int, float]] = field(default_factory=list)
    compliance: float = float("nan")

    def log_csv(self) -> str:
        """Iteration log as CSV text (fixed formatting, reproducible)."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for row in self.log_rows:
            w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])
        return buf.getvalue()


class PgdAborted(NonlocalDesignError):
    """A state solve failed during descent; ``partial`` holds the history so far."""

    def __init__(self, message, partial: PgdResult):
        super().__init__(message)
        self.partial = partial


def project_design(values, bounds) -> np.ndarray:
    """Element-wise clamp to ``[a_min, a_max]``."""
    lo, hi = bounds
    return np.minimum(np.maximum(np.asarray(values, dtype=float), lo), hi)


def _interior_measures(mesh: Mesh) -> np.ndarray:
    return mesh.measures[mesh.element_region == INTERIOR]


def design_penalty(mesh: Mesh, design: DesignField, Lambda=0.5, q: float = 2.0) -> float:
    """``sum_T Lambda |a_T|^q |T|`` over the interior elements."""
    return float(np.sum(Lambda * np.abs(design.values) ** q * _interior_measures(mesh)))


def compliance(mesh: Mesh, u: StateField, f: Source) -> float:
    """``<f, u>`` using the same load vector as the state solve."""
    return float(assemble_load(mesh, f, u.components) @ u.dof_values)


def reduced_cost(
    mesh: Mesh,
    design: DesignField,
    kind: FormKind,
    f: Source | str = "const:1",
    Lambda=0.5,
    q: float = 2.0,
    quad: QuadConfig | None = None,
    tol: float = DEFAULT_TOL,
) -> float:
    """``<f, u(a)> + sum_T Lambda |a_T|^q |T|``."""
    if isinstance(f, str):
        f = Source.parse(f)
    u = design_to_state(mesh, design, kind, f, tol, quad)
    return compliance(mesh, u, f) + design_penalty(mesh, design, Lambda, q)


def directional_derivative(
    mesh: Mesh,
    design: DesignField,
    direction,
    kind: FormKind,
    f: Source | str = "const:1",
    Lambda=0.5,
    q: float = 2.0,
    quad: QuadConfig | None = None,
    state: StateField | None = None,
    tol: float = DEFAULT_TOL,
) -> float:
    """Gateaux derivative of the reduced cost at ``design`` in ``direction``."""
    if isinstance(f, str):
        f = Source.parse(f)
    b = np.asarray(direction, dtype=float).ravel()
    if b.size != design.values.size:
        raise ParameterError("direction must have one value per interior element")
    u = state if state is not None else design_to_state(mesh, design, kind, f, tol, quad)
    g = element_gradient_values(mesh, u, kind, quad)
    a = design.values
    return float(-b @ g + np.sum(Lambda * q * a ** (q - 1) * b * _interior_measures(mesh)))


def pgd_step(design: DesignField, g: np.ndarray, measures: np.ndarray, tau, Lambda, q) -> np.ndarray:
    """One explicit gradient step followed by the clamp projection."""
    a = design.values
    trial = a + (tau / measures) * (g - q * Lambda * a ** (q - 1) * measures)
    return project_design(trial, design.bounds)


def run_pgd(mesh: Mesh, config: PgdConfig, initial: DesignField | None = None) -> PgdResult:
    """Projected gradient descent from ``a_0 = (a_min + a_max)/2``.

    Runs ``config.max_iterations`` steps (fewer with ``stop_tol``).  The cost
    history has one entry per visited design, including the start and the final
    design, whose state is returned.
    """
    lo, hi = config.bounds
    design = initial if initial is not None else DesignField.constant(mesh, 0.5 * (lo + hi), config.bounds)
    meas = _interior_measures(mesh)
    kind, f = config.kind, config.source
    history: list[float] = []
    rows: list[tuple] = []
    violations: list[tuple[int, float]] = []
    t_solve = t_grad = 0.0
    state = None
    comps = kind.components(mesh)
    F = assemble_load(mesh, f, comps)

    def partial(k):
        return PgdResult(design, state, history, t_grad, t_solve, k, rows, violations)

    k = 0
    while True:
        t0 = time.perf_counter()
        try:
            state = design_to_state(mesh, design, kind, f, config.solver_tol, config.quad)
        except NonlocalDesignError as exc:
            raise PgdAborted(f"state solve failed at iteration {k}: {exc}", partial(k)) from exc
        t_solve += time.perf_counter() - t0
        comp = float(F @ state.dof_values)
        cost = comp + design_penalty(mesh, design, config.Lambda, config.q)
        a = design.values
        if a.min() < lo or a.max() > hi:
            raise NonlocalDesignError(f"iterate {k} left the admissible set")
        if history and cost > history[-1] + DESCENT_SLACK * max(1.0, abs(history[-1])):
            violations.append((k, cost - history[-1]))
            log.warning("cost increased at iteration %d by %.3e", k, cost - history[-1])
        history.append(cost)
        rows.append((k, cost, state.l2_norm(), design.l2_norm(mesh), float(a.max()), float(a.min())))
        log.info("iter %d cost %.8f", k, cost)
        if k >= config.max_iterations:
            break
        if config.stop_tol is not None and k > 0:
            if history[-2] - history[-1] < config.stop_tol * abs(history[-2]):
                break
        t0 = time.perf_counter()
        g = element_gradient_values(mesh, state, kind, config.quad)
        t_grad += time.perf_counter() - t0
        design = design.with_values(pgd_step(design, g, meas, config.tau, config.Lambda, config.q))
        k += 1
    result = PgdResult(design, state, history, t_grad, t_solve, k, rows, violations)
    result.compliance = comp
    return result
