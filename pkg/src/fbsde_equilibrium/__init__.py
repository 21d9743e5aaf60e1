"""Monte Carlo verification of equilibrium policies for time-inconsistent
recursive-utility control problems.

The package simulates a controlled forward state, solves the recursive
utility and the two adjoint equations by least-squares Monte Carlo, and tests
the resulting Hamiltonian conditions for spike deviations.
"""

from __future__ import annotations

__version__ = "0.1.0"

from .adjoint import (
    AdjointBundle,
    CandidateTuple,
    compute_kappa,
    solve_adjoints,
    solve_candidate,
)
from .bsde import (
    BsdeSolution,
    LinearBsdeSpec,
    RegressionBasis,
    comparison_check,
    evaluate_cost_functional,
    solve_bsde_regression,
    solve_linear_bsde_explicit,
    solve_linear_bsde_regression,
    stability_check,
)
from .equilibrium import (
    EquilibriumReport,
    analyse_cell,
    argmin_hamiltonian,
    check_equilibrium,
    delta_hamiltonian,
    estimate_spike_limit_adjoint,
    estimate_spike_limit_direct,
)
from .merton import (
    PRESETS,
    build_merton_problem,
    classical_merton_baseline,
    hyperbolic_discount,
    inverse_marginal_upsilon,
    preset_policy,
    preset_setup,
    verify_policy_conditions,
)
from .model import (
    CoefficientBundle,
    ControlDomain,
    ProblemError,
    ProblemInstance,
    StateDomain,
    TimeGrid,
    build_problem,
)
from .sde import (
    BrownianEnsemble,
    SpikeWindow,
    generate_brownian,
    solve_state_forward,
    solve_variational_first,
)

__all__ = [
    "AdjointBundle", "BrownianEnsemble", "BsdeSolution", "CandidateTuple",
    "CoefficientBundle", "ControlDomain", "EquilibriumReport", "LinearBsdeSpec", "PRESETS",
    "ProblemError", "ProblemInstance", "RegressionBasis", "SpikeWindow", "StateDomain",
    "TimeGrid", "analyse_cell", "argmin_hamiltonian", "build_merton_problem", "build_problem",
    "check_equilibrium", "classical_merton_baseline", "comparison_check", "compute_kappa",
    "delta_hamiltonian", "estimate_spike_limit_adjoint", "estimate_spike_limit_direct",
    "evaluate_cost_functional", "generate_brownian", "hyperbolic_discount",
    "inverse_marginal_upsilon", "preset_policy", "preset_setup", "solve_adjoints",
    "solve_bsde_regression", "solve_candidate", "solve_linear_bsde_explicit",
    "solve_linear_bsde_regression", "solve_state_forward", "solve_variational_first",
    "stability_check", "verify_policy_conditions",
]
