"""Finite element simulation of regularized stochastic total variation flow.

Mesh and assembly live in `mesh` and `fem_core`, the implicit scheme in
`stepper`, noise generation in `noise`, the verification studies in
`studies`, serialization in `io_formats`, and the CLI in `cli`.
"""

from .fem_core import (
    EnergyBreakdown,
    assemble_mass,
    assemble_stiffness,
    check_positivity,
    discrete_laplacian,
    energy,
    l2_project,
    tv_operator_load,
)
from .linalg import CgFailure, SparseMatrix, cg_solve, spmv
from .mesh import FeFunction, Mesh, build_unit_square_mesh, interpolate
from .noise import NoiseKind, WienerPath, derive_seed, noise_load, sample_path
from .stepper import (
    SchemeParams,
    StepFailure,
    TrajectoryRecord,
    implicit_step,
    interpolant_eval,
    run_trajectory,
)
from .studies import ExperimentConfig, make_noisy_image

__all__ = [
    "CgFailure",
    "EnergyBreakdown",
    "ExperimentConfig",
    "FeFunction",
    "Mesh",
    "NoiseKind",
    "SchemeParams",
    "SparseMatrix",
    "StepFailure",
    "TrajectoryRecord",
    "WienerPath",
    "assemble_mass",
    "assemble_stiffness",
    "build_unit_square_mesh",
    "cg_solve",
    "check_positivity",
    "derive_seed",
    "discrete_laplacian",
    "energy",
    "implicit_step",
    "interpolate",
    "interpolant_eval",
    "l2_project",
    "make_noisy_image",
    "noise_load",
    "run_trajectory",
    "sample_path",
    "spmv",
    "tv_operator_load",
]
