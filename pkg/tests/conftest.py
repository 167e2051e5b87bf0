import pytest

from stackmv import ModelParams, PdeGridSpec, leader_policy, solve_surfaces

# Desk-scale benchmark parameter set used across the suite.
BENCHMARK = dict(
    mu1=0.10,
    mu2=0.02,
    sigma=0.2,
    r=0.03,
    T=1.0,
    gamma1=2.0,
    gamma2=2.0,
    lambda1=0.5,
    lambda2=0.5,
    lambda0=0.1,
)


@pytest.fixture(scope="session")
def params():
    return ModelParams(**BENCHMARK)


@pytest.fixture(scope="session")
def surfaces(params):
    # moderate grid: plenty for 4-sigma Monte Carlo comparisons, fast to solve
    return solve_surfaces(params, PdeGridSpec(n_time=257, n_space=127))


@pytest.fixture(scope="session")
def policy(params, surfaces):
    return leader_policy(params, surfaces.a1, surfaces.a2)
