"""Numerical laboratory for stochastic mechanics and its relativistic extension."""

__version__ = "0.1.0"

from ._backend import BACKEND, get_kernels
from .fields import (FIXED_ZERO, NONRELATIVISTIC, PERIODIC, RELATIVISTIC,
                     ComplexWaveField, Grid1D, GridError, PhysicalParams,
                     PolarField, make_grid, polar_decompose)
from .identities import (ALL_EQUATIONS, ANTIPARTICLE, PARTICLE, SPACELIKE,
                         TIMELIKE, ConvergenceResult, convergence_study,
                         full_report, self_convergence)
from .kleingordon import (CFLError, KGProblem, compute_currents,
                          kg_gaussian_packet, kg_plane_wave, kg_superposition,
                          solve_klein_gordon)
from .report import ResidualReport
from .schrodinger import (CrankNicolson, SchrodingerProblem, SolverError,
                          analytic_box_eigenstate, analytic_free_gaussian,
                          solve_schrodinger)
from .stochastic import (WalkerEnsemble, init_ensemble, ks_statistic,
                         run_nelson, step_ensemble)
from .velocities import VelocityFieldSet, velocity_fields

__all__ = [
    "BACKEND", "get_kernels",
    "FIXED_ZERO", "NONRELATIVISTIC", "PERIODIC", "RELATIVISTIC",
    "ComplexWaveField", "Grid1D", "GridError", "PhysicalParams", "PolarField",
    "make_grid", "polar_decompose",
    "ALL_EQUATIONS", "ANTIPARTICLE", "PARTICLE", "SPACELIKE", "TIMELIKE",
    "ConvergenceResult", "convergence_study", "full_report", "self_convergence",
    "CFLError", "KGProblem", "compute_currents", "kg_gaussian_packet",
    "kg_plane_wave", "kg_superposition", "solve_klein_gordon",
    "ResidualReport",
    "CrankNicolson", "SchrodingerProblem", "SolverError",
    "analytic_box_eigenstate", "analytic_free_gaussian", "solve_schrodinger",
    "WalkerEnsemble", "init_ensemble", "ks_statistic", "run_nelson",
    "step_ensemble",
    "VelocityFieldSet", "velocity_fields",
]
