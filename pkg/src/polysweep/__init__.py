"""Optimal control of perturbed sweeping dynamics over convex polyhedra."""

from .conditions import (
    CheckOptions,
    ContinuousDuals,
    DualBundle,
    IndexSplit,
    ResidualReport,
    assemble_limit,
    bundle_to_continuous,
    check_continuous,
    check_discrete,
    coderivative_domain_check,
    coderivative_membership,
    index_split,
    normalization_sum,
    normalize_bundle,
    recover_discrete_duals,
)
from .discretize import (
    ConvergenceTable,
    DiscretePair,
    DiscreteProblem,
    Mesh,
    Reference,
    approximate_feasible,
    build_mesh,
    convergence_report,
    discretize_problem,
)
from .dynamics import (
    BVControl,
    ControlSet,
    CostFunction,
    PerturbationMap,
    SweepingProblem,
    Trajectory,
    catching_up_step,
    extract_eta,
    integrate,
    right_velocity,
)
from .geometry import (
    ActiveSet,
    ConeDecomposition,
    Polyhedron,
    active_set,
    licq,
    project_normal_cone,
    project_polyhedron,
    project_tangent_cone,
)
from .problemfile import (
    ProblemFile,
    certificate_to_bundle,
    certificate_to_continuous,
    load_problem_file,
)
from .qp import NnlsSolution, nnls, project_halfspaces, signed_least_squares
from .solver import SolveOptions, SolveResult, brute_force, solve

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
