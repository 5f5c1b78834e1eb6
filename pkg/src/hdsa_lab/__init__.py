"""Hyper-differential sensitivity analysis for a Bayesian heat-conduction inverse problem.

A P1 finite-element model on the unit square, a Gaussian prior on the
log-conductivity, adjoint derivatives, an inexact Newton-CG MAP solver, a
Lanczos low-rank Hessian and the sensitivities of the MAP point and the
Bayes risk to the auxiliary and noise parameters.
"""
from .adjoint import OptimizationState
from .forward import ComplementaryParams, HeatProblem, ObservationSet
from .hdsa import (PipelineSettings, SensitivityReport, apply_DM, default_scheme, run_pipeline,
                   spread_study)
from .lowrank import build_lowrank
from .mesh import build_mesh
from .newton import SolverConfig, solve_map
from .prior import PriorOperators, PriorSpec

__version__ = "0.1.0"

__all__ = [
    "ComplementaryParams", "HeatProblem", "ObservationSet", "OptimizationState", "PipelineSettings",
    "PriorOperators", "PriorSpec", "SensitivityReport", "SolverConfig", "apply_DM", "build_lowrank",
    "build_mesh", "default_scheme", "run_pipeline", "solve_map", "spread_study",
]
