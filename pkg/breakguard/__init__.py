import logging

from breakguard.breakguard import Breakguard, set_options
from breakguard.config import RunConfig, RunManifest
from breakguard.mesh import (Boundary, Subdomain, Geometry, Mesh,
        build_rect_mesh, plain_rect_mesh)
from breakguard.fem import (FunctionSpace, Field, SparseOperator, assemble,
        solve_sparse)
from breakguard.forward_model import (MaterialParams, ChanceConfig,
        PorosityField, ForwardModel, StateSolution, porosity_map, solve_state,
        thermal_compliance, chance_function, von_mises_stress, p_norm_stress)
from breakguard.qoi import ThermalCompliance, StressConstraint
from breakguard.random_field import (MaternConfig, MaternField, sample,
        apply_covariance, apply_precision, marginal_variance,
        params_from_stats, stats_from_params)
from breakguard.sensitivity import (SolveCounter, LinearizationPoint,
        HessianActionHandle, solve_adjoint, grad_m, hess_action,
        second_order_gradient, finite_difference_check)
from breakguard.risk_estimators import (EigOptions, TaylorModel,
        MomentEstimate, DiagonalCovariance, generalized_eig,
        build_taylor_model, eval_quad, taylor_moments, mc_moments, cv_moments,
        chance_prob)
from breakguard.optimizer import (CostConfig, ContinuationConfig,
        IncgOptions, DesignProblem, eval_cost, design_gradient, incg_solve,
        adaptive_optimize, analytic_solve_count)
from breakguard.exceptions import (BreakguardException, InvalidGeometryError,
        ShapeError, AssemblyError, SolverError, ConfigError, VerificationError)
from breakguard.utils import TRACE, ColoredFormatter, sigmoid
from breakguard.version import __version__

logging.addLevelName(TRACE, "TRACE")
formatter = ColoredFormatter("[%(threadName)s][%(name)s][%(levelname)s]  %(message)s  (%(filename)s:%(lineno)s)")
handler_stream = logging.StreamHandler()
handler_stream.setFormatter(formatter)
logging.getLogger("breakguard").addHandler(handler_stream)

# don't expose ColoredFormatter to consumers
del ColoredFormatter

__all__ = [
# core
"Breakguard", "set_options", "RunConfig", "RunManifest",
# mesh and finite elements
"Boundary", "Subdomain", "Geometry", "Mesh", "build_rect_mesh",
"plain_rect_mesh", "FunctionSpace", "Field", "SparseOperator", "assemble",
"solve_sparse",
# forward model
"MaterialParams", "ChanceConfig", "PorosityField", "ForwardModel",
"StateSolution", "porosity_map", "solve_state", "thermal_compliance",
"chance_function", "von_mises_stress", "p_norm_stress", "ThermalCompliance",
"StressConstraint",
# random field
"MaternConfig", "MaternField", "sample", "apply_covariance",
"apply_precision", "marginal_variance", "params_from_stats",
"stats_from_params",
# derivatives
"SolveCounter", "LinearizationPoint", "HessianActionHandle", "solve_adjoint",
"grad_m", "hess_action", "second_order_gradient", "finite_difference_check",
# estimators
"EigOptions", "TaylorModel", "MomentEstimate", "DiagonalCovariance",
"generalized_eig", "build_taylor_model", "eval_quad", "taylor_moments",
"mc_moments", "cv_moments", "chance_prob",
# optimizer
"CostConfig", "ContinuationConfig", "IncgOptions", "DesignProblem",
"eval_cost", "design_gradient", "incg_solve", "adaptive_optimize",
"analytic_solve_count",
# exceptions
"BreakguardException", "InvalidGeometryError", "ShapeError", "AssemblyError",
"SolverError", "ConfigError", "VerificationError",
# utils
"TRACE", "sigmoid",
# version
"__version__"
]
