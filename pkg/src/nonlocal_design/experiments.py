"""Study drivers: single table rows and ladders in s, h, or both.

A study is described by a flat ``key=value`` text file::

    study=joint_ac            # table_row | s_up_one | h_refinement | joint_ac
    dim=1                     # 1: interval, 2: disk
    s_ladder=0.5,0.9,0.99     # s = 1 selects the local form
    r_ladder=0.2,0.05,0.01
    elements_ladder=16,32,64  # 1D resolution (dofs_ladder=961,... in 2D)
    iterations=20             # one value or one per rung
    tau=0.25
    f=const:1                 # or ball:3:0.25:-0.2:0.1
    bounds=0.1:2.0
    out=results/ac

Results go to ``<out>/results.csv`` (one row per rung, deterministic), run
times to ``<out>/timings.csv``, per-rung fields and iteration logs next to them
and a short ``summary.txt`` for ladder studies.
"""

from __future__ import annotations

import csv
import io
import logging
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError
from .forms import FormKind, QuadConfig, Source, StateField, l2_norm, seminorm
from .mesh import (
    Mesh,
    build_interval_mesh,
    disk_mesh_for_dofs,
    extend_with_horizon,
    point_location,
)
from .optimizer import PgdConfig, PgdResult, compliance, design_penalty, run_pgd

log = logging.getLogger(__name__)

STUDY_KINDS = ("table_row", "s_up_one", "h_refinement", "joint_ac")
RECORD_COLUMNS = ("dofs", "iterations", "s", "R", "u_l2", "u_semi", "a_l2", "cost")


@dataclass
class ExperimentRecord:
    dofs: int
    iterations: int
    s: float
    R: float
    u_l2: float
    u_semi: float
    a_l2: float
    cost: float
    wall_time: float = 0.0

    def csv_values(self) -> list[str]:
        return [str(self.dofs), str(self.iterations)] + [
            repr(float(getattr(self, c))) for c in RECORD_COLUMNS[2:]
        ]


@dataclass
class RungResult:
    """Everything produced by one rung: record, meshes and the PGD result."""

    record: ExperimentRecord
    mesh: Mesh
    result: PgdResult
    kind: FormKind


@dataclass
class StudyConfig:
    study: str = "table_row"
    dim: int = 2
    s_ladder: list[float] = field(default_factory=lambda: [1.0])
    r_ladder: list[float] = field(default_factory=lambda: [0.0])
    resolution_ladder: list[int] = field(default_factory=lambda: [961])
    iterations: list[int] = field(default_factory=lambda: [20])
    tau: float = 0.25
    source: Source = field(default_factory=Source)
    bounds: tuple[float, float] = (0.1, 2.0)
    Lambda: float = 0.5
    q: float = 2.0
    radius: float = 1.0
    domain: tuple[float, float] = (0.0, 1.0)
    reference_resolution: int | None = None
    reference_iterations: int | None = None
    solver_tol: float = 1e-10
    quad: QuadConfig | None = None
    out: str | None = None

    def __post_init__(self):
        if self.study not in STUDY_KINDS:
            raise ConfigurationError(f"unknown study {self.study!r}")
        if self.dim not in (1, 2):
            raise ConfigurationError("dim must be 1 or 2")
        n = max(len(self.s_ladder), len(self.r_ladder), len(self.resolution_ladder))
        if n == 0:
            raise ConfigurationError("ladders must be non-empty")
        for name in ("s_ladder", "r_ladder", "resolution_ladder", "iterations"):
            v = getattr(self, name)
            if len(v) == 1 and n > 1:
                setattr(self, name, list(v) * n)
            elif len(v) != n:
                raise ConfigurationError(f"{name} has {len(v)} entries, expected {n}")
        for s, R in zip(self.s_ladder, self.r_ladder):
            if not 0.0 < s <= 1.0:
                raise ConfigurationError(f"s must lie in (0, 1], got {s}")
            if s < 1.0 and not R > 0:
                raise ConfigurationError("fractional rungs need R > 0")
        if self.study == "joint_ac":
            if any(b <= a for a, b in zip(self.s_ladder, self.s_ladder[1:])):
                raise ConfigurationError("joint_ac needs strictly increasing s")
            if any(b <= a for a, b in zip(self.resolution_ladder, self.resolution_ladder[1:])):
                raise ConfigurationError("joint_ac needs strictly refining meshes")

    @property
    def n_rungs(self) -> int:
        return len(self.s_ladder)

    def pgd_config(self, kind: FormKind, iterations: int) -> PgdConfig:
        return PgdConfig(
            kind=kind,
            source=self.source,
            tau=self.tau,
            max_iterations=iterations,
            bounds=self.bounds,
            Lambda=self.Lambda,
            q=self.q,
            solver_tol=self.solver_tol,
            quad=self.quad,
        )


def _floats(text):
    return [float(t) for t in text.split(",") if t.strip()]


def _ints(text):
    return [int(t) for t in text.split(",") if t.strip()]


def parse_study_config(text: str) -> StudyConfig:
    """Parse the ``key=value`` study format (``#`` starts a comment)."""
    kv = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected key=value")
        key, value = (p.strip() for p in line.split("=", 1))
        kv[key] = value
    args = {}
    quad = {}
    try:
        for key, value in kv.items():
            if key == "study":
                args["study"] = value
            elif key == "dim":
                args["dim"] = int(value)
            elif key == "s_ladder":
                args["s_ladder"] = _floats(value)
            elif key == "r_ladder":
                args["r_ladder"] = _floats(value)
            elif key in ("dofs_ladder", "elements_ladder"):
                args["resolution_ladder"] = _ints(value)
            elif key == "iterations":
                args["iterations"] = _ints(value)
            elif key == "tau":
                args["tau"] = float(value)
            elif key == "f":
                args["source"] = Source.parse(value)
            elif key == "bounds":
                lo, hi = value.split(":")
                args["bounds"] = (float(lo), float(hi))
            elif key == "lambda":
                args["Lambda"] = float(value)
            elif key == "q":
                args["q"] = float(value)
            elif key == "radius":
                args["radius"] = float(value)
            elif key == "domain":
                a, b = value.split(":")
                args["domain"] = (float(a), float(b))
            elif key in ("reference_dofs", "reference_elements"):
                args["reference_resolution"] = int(value)
            elif key == "reference_iterations":
                args["reference_iterations"] = int(value)
            elif key == "solver_tol":
                args["solver_tol"] = float(value)
            elif key in ("touching_order", "near_order", "far_order", "chunk_rows"):
                quad[key] = int(value)
            elif key in ("near_factor", "memory_mb"):
                quad[key] = float(value)
            elif key in ("far_mode", "cache"):
                quad[key] = value
            elif key == "out":
                args["out"] = value
            else:
                raise ConfigurationError(f"unknown key {key!r}")
    except ValueError as exc:
        raise ConfigurationError(f"bad value in study config: {exc}") from exc
    if quad:
        dim = args.get("dim", 2)
        base = asdict(QuadConfig.default(dim))
        base.update(quad)
        args["quad"] = QuadConfig(**base)
    return StudyConfig(**args)


def load_study_config(path) -> StudyConfig:
    return parse_study_config(Path(path).read_text())


# single rungs ----------------------------------------------------------------


def build_mesh(config: StudyConfig, resolution: int, R: float) -> Mesh:
    """Design-domain mesh for one rung, extended by the horizon when ``R > 0``."""
    if config.dim == 1:
        mesh = build_interval_mesh(config.domain[0], config.domain[1], resolution)
    else:
        mesh = disk_mesh_for_dofs(config.radius, resolution)
    return extend_with_horizon(mesh, R) if R > 0 else mesh


def run_rung(config: StudyConfig, k: int, iterations: int | None = None) -> RungResult:
    s, R = config.s_ladder[k], config.r_ladder[k]
    its = config.iterations[k] if iterations is None else iterations
    kind = FormKind.from_parameters(s, R)
    if s == 1.0:
        R = 0.0
    mesh = build_mesh(config, config.resolution_ladder[k], R)
    return _run(config, mesh, kind, its)


def _run(config: StudyConfig, mesh: Mesh, kind: FormKind, its: int) -> RungResult:
    t0 = time.perf_counter()
    result = run_pgd(mesh, config.pgd_config(kind, its))
    record = ExperimentRecord(
        dofs=mesh.n_dofs,
        iterations=result.iterations_run,
        s=kind.s if kind.is_fractional else 1.0,
        R=kind.R if kind.is_fractional else 0.0,
        u_l2=result.state.l2_norm(),
        u_semi=seminorm(mesh, result.state, kind, config.quad),
        a_l2=result.design.l2_norm(mesh),
        cost=result.cost_history[-1],
    )
    record.wall_time = time.perf_counter() - t0
    log.info("rung done: %s", record)
    return RungResult(record, mesh, result, kind)


def check_record(rung: RungResult, source: Source, Lambda=0.5, q=2.0) -> float:
    """Relative mismatch between the recorded cost and the emitted fields."""
    mesh, res = rung.mesh, rung.result
    cost = compliance(mesh, res.state, source) + design_penalty(mesh, res.design, Lambda, q)
    return abs(cost - rung.record.cost) / max(abs(cost), 1e-300)


# cross-mesh comparison -------------------------------------------------------


def interpolate_state(state: StateField, target: Mesh) -> np.ndarray:
    """P1 interpolant of ``state`` at the DOFs of ``target`` (zero outside)."""
    src = state.mesh.interior_mesh() if state.mesh.n_interior_elements < state.mesh.n_elements else state.mesh
    vals = np.zeros((src.n_vertices, state.components))
    vals[src.interior_vertex] = state.dof_values.reshape(-1, state.components)
    pts = target.vertices[target.interior_vertex]
    elem, bary = point_location(src, pts)
    out = np.zeros((len(pts), state.components))
    ok = elem >= 0
    out[ok] = np.einsum("pk,pkc->pc", bary[ok], vals[src.elements[elem[ok]]])
    return out.ravel()


def state_distance(a: StateField, b: StateField, reference: Mesh) -> float:
    """``||a - b||_{L2}`` after interpolating both onto ``reference``."""
    ua = interpolate_state(a, reference)
    ub = interpolate_state(b, reference)
    return l2_norm(reference, ua - ub, a.components)


# outputs ---------------------------------------------------------------------


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", newline="\n") as fh:
        fh.write(text)
    os.replace(tmp, path)


def records_csv(records: list[ExperimentRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RECORD_COLUMNS)
    for r in records:
        w.writerow(r.csv_values())
    return buf.getvalue()


def timings_csv(records: list[ExperimentRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("dofs", "s", "R", "wall_time"))
    for r in records:
        w.writerow([r.dofs, repr(r.s), repr(r.R), f"{r.wall_time:.3f}"])
    return buf.getvalue()


def field_text(rung: RungResult) -> str:
    """Mesh text format with the state (vertices) and design (elements) appended."""
    mesh = rung.mesh
    u = rung.result.state.vertex_values()
    coef = rung.result.design.all_values(mesh)
    lines = mesh.to_text().splitlines()
    nv, ne = mesh.n_vertices, mesh.n_elements
    out = [lines[0]]
    for i in range(nv):
        out.append(lines[1 + i] + " " + " ".join(repr(float(v)) for v in u[i]))
    for e in range(ne):
        out.append(lines[1 + nv + e] + " " + repr(float(coef[e])))
    return "\n".join(out) + "\n"


def write_outputs(out, rungs: list[RungResult], summary: str | None = None) -> None:
    if out is None:
        return
    out = Path(out)
    records = [r.record for r in rungs]
    for k, rung in enumerate(rungs):
        _atomic_write(out / f"fields_{k}.txt", field_text(rung))
        _atomic_write(out / f"iterations_{k}.csv", rung.result.log_csv())
    _atomic_write(out / "results.csv", records_csv(records))
    _atomic_write(out / "timings.csv", timings_csv(records))
    if summary is not None:
        _atomic_write(out / "summary.txt", summary)


# studies ---------------------------------------------------------------------


def _strictly_decreasing(values) -> bool:
    return all(b < a for a, b in zip(values, values[1:]))


@dataclass
class StudyResult:
    rungs: list[RungResult]
    summary: dict

    @property
    def records(self) -> list[ExperimentRecord]:
        return [r.record for r in self.rungs]

    def summary_text(self) -> str:
        lines = []
        for key, value in self.summary.items():
            if isinstance(value, (list, tuple)):
                value = ",".join(repr(float(v)) for v in value)
            lines.append(f"{key}={value}")
        return "\n".join(lines) + "\n"


def run_table_row(config: StudyConfig) -> ExperimentRecord:
    """Full descent for the first rung; writes CSV and field files."""
    rung = run_rung(config, 0)
    write_outputs(config.out, [rung])
    return rung.record


def run_s_up_one_study(config: StudyConfig) -> StudyResult:
    """Fixed mesh, increasing s; reports the cost gap to the local problem."""
    if len(set(config.resolution_ladder)) != 1:
        raise ConfigurationError("s_up_one keeps the mesh fixed")
    rungs = [run_rung(config, k) for k in range(config.n_rungs)]
    local = next((r for r in rungs if not r.kind.is_fractional), None)
    if local is None:
        mesh = build_mesh(config, config.resolution_ladder[0], 0.0)
        local = _run(config, mesh, FormKind.local_conductivity(), config.iterations[-1])
    gaps = [abs(r.record.cost - local.record.cost) for r in rungs]
    summary = {
        "study": "s_up_one",
        "local_cost": repr(local.record.cost),
        "cost_gap": gaps,
        "gap_decreasing": _strictly_decreasing(gaps[: len(gaps) - (not rungs[-1].kind.is_fractional)]),
    }
    result = StudyResult(rungs, summary)
    write_outputs(config.out, rungs, result.summary_text())
    return result


def run_h_refinement_study(config: StudyConfig) -> StudyResult:
    """Fixed (s, R), refining meshes; Cauchy differences of cost and state."""
    if len(set(config.s_ladder)) != 1 or len(set(config.r_ladder)) != 1:
        raise ConfigurationError("h_refinement keeps s and R fixed")
    rungs = [run_rung(config, k) for k in range(config.n_rungs)]
    finest = rungs[-1].mesh.interior_mesh() if rungs[-1].kind.is_fractional else rungs[-1].mesh
    dcost = [abs(b.record.cost - a.record.cost) for a, b in zip(rungs, rungs[1:])]
    dstate = [state_distance(a.result.state, b.result.state, finest) for a, b in zip(rungs, rungs[1:])]
    rates = [float(np.log2(a / b)) if b > 0 and a > 0 else float("inf") for a, b in zip(dstate, dstate[1:])]
    summary = {
        "study": "h_refinement",
        "cost_cauchy": dcost,
        "state_cauchy": dstate,
        "state_rate": rates,
        "cost_decreasing": _strictly_decreasing(dcost),
        "state_decreasing": _strictly_decreasing(dstate),
    }
    result = StudyResult(rungs, summary)
    write_outputs(config.out, rungs, result.summary_text())
    return result


def run_joint_ac_study(config: StudyConfig) -> StudyResult:
    """Joint ladder ``s_k -> 1, h_k -> 0`` against a fine local reference."""
    ref_res = config.reference_resolution or 4 * config.resolution_ladder[-1]
    ref_its = config.reference_iterations or config.iterations[-1]
    ref_mesh = build_mesh(config, ref_res, 0.0)
    ref = _run(config, ref_mesh, FormKind.local_conductivity(), ref_its)
    rungs = [run_rung(config, k) for k in range(config.n_rungs)]
    state_err = [state_distance(r.result.state, ref.result.state, ref_mesh) for r in rungs]
    cost_err = [abs(r.record.cost - ref.record.cost) for r in rungs]
    summary = {
        "study": "joint_ac",
        "reference_cost": repr(ref.record.cost),
        "reference_dofs": ref.record.dofs,
        "state_error": state_err,
        "cost_error": cost_err,
        "state_error_decreasing": _strictly_decreasing(state_err),
        "cost_error_decreasing": _strictly_decreasing(cost_err),
    }
    result = StudyResult(rungs, summary)
    write_outputs(config.out, rungs, result.summary_text())
    return result


def run_study(config: StudyConfig):
    """Dispatch on ``config.study``."""
    if config.study == "table_row":
        return run_table_row(config)
    if config.study == "s_up_one":
        return run_s_up_one_study(config)
    if config.study == "h_refinement":
        return run_h_refinement_study(config)
    return run_joint_ac_study(config)
