"""Stackelberg mean-variance portfolio game with asymmetric information.

Solves the equilibrium of two investors trading one stock whose drift only
the leader knows: backward PDE surfaces, closed-form strategies (the
follower's affine response and the leader's Gaussian randomized policy),
sampled and exploratory wealth simulation, and Monte Carlo verification of
the equilibrium and discretization-convergence claims.
"""

__version__ = "0.1.0"

from .market import DerivedConstants, ModelParams, derive_constants, gamma_term
from .objectives import (
    ObjectiveEstimate,
    estimate_follower_objective,
    estimate_leader_objective,
    value_function,
)
from .pde import (
    PdeGridSpec,
    StabilityError,
    SurfaceSet,
    ValueSurface,
    interpolate,
    solve_a,
    solve_A1,
    solve_A2,
    solve_surfaces,
    source_R,
)
from .simulate import (
    EnsembleResult,
    PathBundle,
    SimulationError,
    TimeGrid,
    filter_statistics,
    sample_u1_sequence,
    simulate_ensemble,
    simulate_exploratory,
    simulate_sampled,
    step_filter,
    z_transform,
)
from .strategies import (
    FollowerResponse,
    GaussianPolicy,
    aggregate_control,
    follower_response,
    leader_policy,
    policy_entropy,
    sample_action,
)
from .verify import (
    CertificateReport,
    ConvergenceReport,
    PerturbationSpec,
    SlopeEstimate,
    convergence_study,
    follower_slope_test,
    leader_slope_test,
    stackelberg_certificate,
)

__all__ = [
    "__version__",
    "ModelParams",
    "DerivedConstants",
    "derive_constants",
    "gamma_term",
    "PdeGridSpec",
    "ValueSurface",
    "SurfaceSet",
    "StabilityError",
    "solve_a",
    "solve_A1",
    "solve_A2",
    "solve_surfaces",
    "source_R",
    "interpolate",
    "FollowerResponse",
    "GaussianPolicy",
    "follower_response",
    "aggregate_control",
    "leader_policy",
    "sample_action",
    "policy_entropy",
    "TimeGrid",
    "PathBundle",
    "EnsembleResult",
    "SimulationError",
    "step_filter",
    "simulate_sampled",
    "simulate_exploratory",
    "simulate_ensemble",
    "sample_u1_sequence",
    "z_transform",
    "filter_statistics",
    "ObjectiveEstimate",
    "estimate_follower_objective",
    "estimate_leader_objective",
    "value_function",
    "PerturbationSpec",
    "SlopeEstimate",
    "ConvergenceReport",
    "CertificateReport",
    "follower_slope_test",
    "leader_slope_test",
    "convergence_study",
    "stackelberg_certificate",
]
