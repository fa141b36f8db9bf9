"""Newtonian dynamical systems admitting the normal shift of hypersurfaces.

Construct the admissible force fields on Riemannian manifolds (dimension
n >= 3) from a generating function, simulate normal shifts of hypersurfaces
and normal blow-ups of points along their trajectories, and verify the
normality conditions as machine-checkable residuals.
"""

from .dynamics import (IntegratorOptions, Trajectory, integrate,
                       integrate_family, speed_rate, w0_evolve)
from .errors import (DegenerateGeneratorError, EvalDomainError,
                     ExprSyntaxError, FrameRankError, IntegrationError,
                     MetricError, NormalShiftError, RootFindError,
                     ScenarioError, SpeedFloorError, UnknownVariableError)
from .expr import DualValue, Expr, eval_dual, parse, to_source
from .forcefield import (ForceField, GeneratingFunction, NormalityReport,
                         ScalarAnsatz, VFormGenerating, WFormGenerating,
                         additional_normality_residual, build_force,
                         check_normality, conformal_force, dual_convert,
                         gauge_transform, reduced_residuals, scalar_ansatz,
                         weak_normality_residual, zero_force)
from .geometry import (ExtendedCovectorField, ExtendedScalarField, Metric,
                       SphericalCovectorField, SphericalScalarField,
                       spatial_gradient, velocity_gradient)
from .metrizability import (ConnectionDeformation, InheritanceReport,
                            conformal_connection, conformal_deformation,
                            inheritance_test, inherited_force,
                            metrizable_force)
from .scenario import Scenario, load_scenario, validate_scenario
from .shift import (DeviationResult, Hypersurface, ShiftFamily, blowup,
                    build_shift, deviation, gnn_check,
                    initial_deviation_rate, normality_certificate, solve_nu,
                    unit_normal, w_constancy)

__version__ = "0.1.0"

__all__ = [
    "DegenerateGeneratorError", "EvalDomainError", "ExprSyntaxError",
    "FrameRankError", "IntegrationError", "MetricError", "NormalShiftError",
    "RootFindError", "ScenarioError", "SpeedFloorError",
    "UnknownVariableError",
    "DualValue", "Expr", "eval_dual", "parse", "to_source",
    "Metric", "ExtendedScalarField", "SphericalScalarField",
    "ExtendedCovectorField", "SphericalCovectorField",
    "spatial_gradient", "velocity_gradient",
    "ForceField", "GeneratingFunction", "WFormGenerating", "VFormGenerating",
    "NormalityReport", "ScalarAnsatz",
    "build_force", "conformal_force", "zero_force", "dual_convert",
    "gauge_transform", "scalar_ansatz", "check_normality",
    "weak_normality_residual", "additional_normality_residual",
    "reduced_residuals",
    "IntegratorOptions", "Trajectory", "integrate", "integrate_family",
    "speed_rate", "w0_evolve",
    "Hypersurface", "ShiftFamily", "DeviationResult",
    "unit_normal", "solve_nu", "build_shift", "blowup", "deviation",
    "initial_deviation_rate", "normality_certificate", "w_constancy",
    "gnn_check",
    "ConnectionDeformation", "InheritanceReport", "conformal_connection",
    "conformal_deformation", "inherited_force", "metrizable_force",
    "inheritance_test",
    "Scenario", "load_scenario", "validate_scenario",
    "__version__",
]
