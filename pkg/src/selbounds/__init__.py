"""Partial identification of ratio estimands under bounded selection weights.

Inverse selection probabilities are only known to lie in ``[1/b, 1/a]``.  The
package computes the resulting identified interval for means, least-squares and
instrumental-variable estimands, asymptotic and bootstrap confidence intervals,
p-values, intervals tightened by auxiliary population information, and bounds
under a parametric selection model.
"""

from .bootstrap import BootstrapCI, BootstrapFailure, bootstrap_ci, bootstrap_table
from .constraints import (
    AuxConstraint,
    ConstrainedInterval,
    ConstraintProblem,
    InfeasibleByConstruction,
    InfeasibleConstraints,
    LevelConvention,
    SolverOptions,
    solve_constrained_bounds,
    theorem3_ci,
    tune_alpha_split,
)
from .core import (
    ContinuousSupportWarning,
    EmptyInput,
    Estimand,
    IntervalEstimate,
    NonFiniteEvaluation,
    ObservationSet,
    SelectionBoundsError,
    SupportTable,
    WeightBox,
    ZeroDenominator,
    collapse_support,
    evaluate,
)
from .inference import AsymptoticCI, confidence_interval, p_value, sigma_hat
from .lfp import check_global_optimality, solve_bounds, solve_bounds_bruteforce
from .parametric import (
    InfeasiblePolytope,
    ParametricFamily,
    ParametricInterval,
    Sign,
    feasible_alpha_polytope,
    solve_parametric_bounds,
)

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
