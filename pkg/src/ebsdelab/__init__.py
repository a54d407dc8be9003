"""Numerical laboratory for ergodic BSDEs with jumps and seasonal dynamics.

Pipeline: simulate the time-periodic mean-reverting jump diffusion, verify
its ergodicity empirically, solve discounted infinite-horizon BSDEs by
regression Monte Carlo, extract the long-run pair (v, lambda) by vanishing
discount, and apply the machinery to risk-averse ergodic control and power
plant valuation.
"""

__version__ = "0.1.0"

from .bsde import (
    BsdeSolution,
    Driver,
    RegressionBasis,
    driver_constant,
    driver_from_state,
    driver_linear,
    martingale_residuals,
    pide_oracle_1d,
    solve_finite_horizon,
    verify_driver,
)
from .control import (
    ConstantPolicy,
    ControlProblem,
    Policy,
    evaluate_policy,
    hamiltonian,
    hamiltonian_driver,
    solve_ergodic_control,
)
from .discounted import (
    DiscountedSolve,
    Numerics,
    horizon_convergence_study,
    solve_discounted,
    truncation_horizon,
)
from .ebsde import (
    EbsdeResult,
    growth_diagnostic,
    lambda_via_invariant_measure,
    periodicity_check,
    vanishing_discount,
)
from .ergodicity import (
    BoundedFunction,
    DecayFit,
    FitDegenerateError,
    HittingTimeStats,
    InvariantSample,
    coupling_decay,
    harvest_invariant,
    hitting_times,
    test_function,
)
from .forward_sde import (
    PathEnsemble,
    PeriodicCoefficients,
    SimulationError,
    constant_drift,
    constant_matrix,
    evolution_operator,
    moment_bound_report,
    simulate,
    sinusoidal_diagonal,
    sinusoidal_drift,
    saturated_drift,
    tabulated_matrix,
    validate_coefficients,
    zero_drift,
)
from .levy_model import LevyModel, compensator_drift, sample_increment, tilt
from .powerplant import Scenario, SparkSpreadModel, plant_value, spread_uncertainty, worst_case_lambda
from .rng import RandomStream, derive_seed
