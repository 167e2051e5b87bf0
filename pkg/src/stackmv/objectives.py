"""Monte Carlo mean-variance objectives and closed-form value functions.

Estimates are of the form mean - gamma/2 * variance (+ lambda0 * entropy
integral for the leader) over the terminal wealth-difference of an ensemble.
Standard errors use the delta method via per-path influence values, which
accounts for the variance estimator's own noise (fourth central moment) and
its covariance with the mean.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .market import ModelParams
from .pde import ValueSurface, interpolate
from .simulate import EnsembleResult, terminal_z
from .strategies import GaussianPolicy, policy_entropy

__all__ = [
    "ObjectiveEstimate",
    "estimate_follower_objective",
    "estimate_leader_objective",
    "value_function",
    "CSV_HEADER",
]

CSV_HEADER = "who,regime,n_paths,mean_term,variance_term,entropy_term,value,std_error"


@dataclass(frozen=True)
class ObjectiveEstimate:
    who: str
    regime: str
    mean_term: float
    variance_term: float
    entropy_term: float
    value: float
    std_error: float
    n_paths: int

    def csv_row(self) -> str:
        return ",".join(
            [self.who, self.regime, str(self.n_paths)]
            + [
                f"{v:.17g}"
                for v in (
                    self.mean_term,
                    self.variance_term,
                    self.entropy_term,
                    self.value,
                    self.std_error,
                )
            ]
        )


def _terminals(paths, who: str, params: ModelParams) -> tuple[np.ndarray, str]:
    """Terminal wealth-difference array and regime from bundles or ensemble."""
    if isinstance(paths, EnsembleResult):
        return np.asarray(terminal_z(who, paths.x1_T, paths.x2_T, params)), paths.regime
    bundles = list(paths)
    if len(bundles) < 2:
        raise ValueError("need at least 2 paths to estimate an objective")
    regimes = {b.regime for b in bundles}
    if len(regimes) != 1:
        raise ValueError(f"mixed regimes in path collection: {sorted(regimes)}")
    x1 = np.asarray([b.X1[-1] for b in bundles])
    x2 = np.asarray([b.X2[-1] for b in bundles])
    return np.asarray(terminal_z(who, x1, x2, params)), regimes.pop()


def mv_statistics(z: np.ndarray, gamma: float):
    """Mean-variance value of a terminal sample plus per-path influences."""
    n = z.size
    if n < 2:
        raise ValueError("need at least 2 paths to estimate an objective")
    m = float(np.mean(z))
    centered = z - m
    v = float(np.sum(centered**2) / (n - 1))
    value = m - 0.5 * gamma * v
    influence = centered - 0.5 * gamma * (centered**2 - v)
    return m, v, value, influence


def _std_error(influence: np.ndarray) -> float:
    n = influence.size
    return float(np.std(influence, ddof=1) / np.sqrt(n))


def estimate_follower_objective(paths, params: ModelParams) -> ObjectiveEstimate:
    """Follower's conditional mean-variance objective from an ensemble.

    The conditioning on the leader's realized actions is operational: the
    supplied paths must share one frozen action sequence while the
    observable-noise continuations vary.
    """
    z, regime = _terminals(paths, "follower", params)
    m, v, value, influence = mv_statistics(z, params.gamma2)
    return ObjectiveEstimate(
        who="follower",
        regime=regime,
        mean_term=m,
        variance_term=v,
        entropy_term=0.0,
        value=value,
        std_error=_std_error(influence),
        n_paths=z.size,
    )


def estimate_leader_objective(
    paths,
    policy: GaussianPolicy,
    params: ModelParams,
    regime: str | None = None,
    entropy_integral: float | None = None,
) -> ObjectiveEstimate:
    """Leader's entropy-regularized mean-variance objective.

    The entropy integral defaults to the closed form T * H(policy), exact for
    the constant-variance Gaussian policy; perturbed piecewise policies pass
    their left-endpoint quadrature explicitly.
    """
    z, path_regime = _terminals(paths, "leader", params)
    if regime is not None and regime != path_regime:
        raise ValueError(f"paths have regime {path_regime!r}, expected {regime!r}")
    if entropy_integral is None:
        entropy_integral = params.T * policy_entropy(policy)
    m, v, value, influence = mv_statistics(z, params.gamma1)
    return ObjectiveEstimate(
        who="leader",
        regime=path_regime,
        mean_term=m,
        variance_term=v,
        entropy_term=float(entropy_integral),
        value=value + params.lambda0 * float(entropy_integral),
        std_error=_std_error(influence),
        n_paths=z.size,
    )


def value_function(
    who: str,
    t: float,
    x1: float,
    x2: float,
    p: float,
    A: ValueSurface,
    params: ModelParams,
) -> float:
    """Closed-form equilibrium value: affine in wealth plus the A-surface."""
    if who == "leader":
        if A.kind != "A1":
            raise ValueError(f"leader value needs kind 'A1', got {A.kind!r}")
        lam, own, other = params.lambda1, x1, x2
    elif who == "follower":
        if A.kind != "A2":
            raise ValueError(f"follower value needs kind 'A2', got {A.kind!r}")
        lam, own, other = params.lambda2, x2, x1
    else:
        raise ValueError(f"who must be 'leader' or 'follower', got {who!r}")
    return (1.0 - lam / 2.0) * own - lam / 2.0 * other + interpolate(A, t, p, "value")
