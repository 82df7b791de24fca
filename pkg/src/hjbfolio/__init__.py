"""Stochastic-control toolkit for power-utility portfolio optimization
under incomplete-market stochastic volatility models.

Subpackages: model (market specification and condition checks), hamiltonian
(closed-form Hamiltonian algebra and trust-region cutoff), pde (explicit
finite-difference solver for the exponent equation), montecarlo (primal and
dual simulation estimators), oracle (closed-form reference solutions), cli
(batch entry point).
"""

from .hamiltonian import (
    QuadraticForm,
    assemble_quadratic,
    dual_maximizer,
    hamiltonian_closed,
    hamiltonian_maxform,
    hamiltonian_truncated,
    optimal_portfolio,
    running_cost_L,
)
from .model import (
    ConditionReport,
    DegeneratePointError,
    DerivedCoefficients,
    ModelSpec,
    StatePoint,
    builtin_model,
    check_conditions,
    eval_coefficients,
)
from .montecarlo import (
    Estimate,
    MarkovControl,
    SimConfig,
    dual_control_from_field,
    estimate_dual_gradient,
    estimate_dual_value,
    estimate_utility_direct,
    estimate_utility_girsanov,
)
from .oracle import MertonSolution, brute_force_hR, merton_closed_form
from .pde import (
    Grid,
    PolicyField,
    SolverConfig,
    ValueField,
    default_grid,
    extract_policy,
    make_grid,
    read_field_binary,
    residual,
    solve_semilinear,
    write_field_binary,
)

__version__ = "0.1.0"

__all__ = [
    "ConditionReport", "DegeneratePointError", "DerivedCoefficients",
    "Estimate", "Grid", "MarkovControl", "MertonSolution", "ModelSpec",
    "PolicyField", "QuadraticForm", "SimConfig", "SolverConfig", "StatePoint",
    "ValueField", "assemble_quadratic", "brute_force_hR", "builtin_model",
    "check_conditions", "default_grid", "dual_control_from_field",
    "dual_maximizer", "estimate_dual_gradient", "estimate_dual_value",
    "estimate_utility_direct", "estimate_utility_girsanov",
    "eval_coefficients", "extract_policy", "hamiltonian_closed",
    "hamiltonian_maxform", "hamiltonian_truncated", "make_grid",
    "merton_closed_form", "optimal_portfolio", "read_field_binary",
    "residual", "running_cost_L", "solve_semilinear", "write_field_binary",
]
