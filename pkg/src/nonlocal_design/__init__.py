"""Optimal design of fractional and peridynamic conductors.

Piecewise-constant coefficients on simplicial meshes are optimized by projected
gradient descent for fractional (and peridynamic) state equations, with the
local problems as the ``s = 1`` limit.
"""

from .errors import (
    ConfigurationError,
    NonlocalDesignError,
    NumericalIntegrityError,
    OracleError,
    ParameterError,
    SolverError,
)
from .experiments import (
    ExperimentRecord,
    StudyConfig,
    load_study_config,
    parse_study_config,
    run_h_refinement_study,
    run_joint_ac_study,
    run_s_up_one_study,
    run_study,
    run_table_row,
)
from .forms import (
    DesignField,
    FormKind,
    QuadConfig,
    Source,
    StateField,
    assemble_load,
    assemble_stiffness,
    element_gradient_values,
    gamma_constant,
    seminorm,
)
from .mesh import (
    HORIZON,
    INTERIOR,
    Mesh,
    PairClass,
    build_disk_mesh,
    build_interval_mesh,
    classify_pair,
    disk_mesh_for_dofs,
    extend_with_horizon,
    load_mesh,
    save_mesh,
)
from .optimizer import PgdConfig, PgdResult, directional_derivative, reduced_cost, run_pgd
from .quadrature import QuadRule, gauss_simplex, singular_pair_rule
from .solver import design_to_state, solve_spd

__version__ = "0.1.0"
