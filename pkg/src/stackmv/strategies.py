"""Closed-form equilibrium strategies of both investors.

* The follower's response is deterministic given the leader's action: an
  action-independent base (myopic demand plus hedging demand) plus a constant
  slope ``kappa`` times the leader's action.
* The aggregate control -- the exposure-weighted combination of both
  portfolios -- is independent of the leader's action: the follower's
  response is built to cancel it.
* The leader randomizes: she samples from a Gaussian whose mean depends on
  (t, p) and whose variance is the constant lambda0 / (gamma1 sigma^2 chi^2).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import ndtri

from .market import ModelParams, derive_constants, gamma_term
from .pde import ValueSurface, interpolate

__all__ = [
    "FollowerResponse",
    "GaussianPolicy",
    "follower_response",
    "aggregate_control",
    "leader_policy",
    "sample_action",
    "policy_entropy",
]


@dataclass(frozen=True)
class FollowerResponse:
    """Affine response u2 = base + slope * u1 at one (t, p)."""

    base: float
    slope: float

    def action(self, u1: float) -> float:
        return self.base + self.slope * u1


class GaussianPolicy:
    """Gaussian randomized strategy: state-dependent mean, constant variance.

    Constructed by :func:`leader_policy` from solved surfaces; tests may
    construct it directly (e.g. with variance 0 for degenerate limits).
    """

    def __init__(
        self,
        mean_surface: Callable,
        variance: float,
        params: ModelParams | None = None,
        a1: ValueSurface | None = None,
        a2: ValueSurface | None = None,
    ):
        if variance < 0.0:
            raise ValueError(f"variance must be nonnegative, got {variance}")
        self.mean_surface = mean_surface
        self.variance = float(variance)
        self.params = params
        self.a1 = a1
        self.a2 = a2

    def mean(self, t: float, p):
        return self.mean_surface(t, p)

    def mean_row(self, t: float, p_nodes: np.ndarray) -> np.ndarray:
        """Mean over a whole row of p-nodes; fast path when surface-backed."""
        if self.params is not None and self.a1 is not None and self.a2 is not None:
            return _leader_mean_row(self.params, self.a1, self.a2, t, p_nodes)
        return np.asarray(
            [self.mean_surface(t, float(p)) for p in p_nodes], dtype=float
        )

    @property
    def std(self) -> float:
        return math.sqrt(self.variance)


def follower_response(
    t: float, p: float, a2: ValueSurface, params: ModelParams
) -> FollowerResponse:
    """Follower's equilibrium response at (t, p) given a solved ``a2``."""
    da2 = interpolate(a2, t, p, which="dp")
    consts = derive_constants(params)
    return FollowerResponse(base=float(gamma_term(p, da2, params)), slope=consts.kappa)


def aggregate_control(t: float, p: float, a2: ValueSurface, params: ModelParams) -> float:
    """Deterministic aggregate control; carries no leader-action argument."""
    da2 = interpolate(a2, t, p, which="dp")
    return float(
        (params.theta(p) - params.r) / (params.sigma**2 * params.gamma2)
        - params.beta(p) * da2 / params.sigma
    )


def _leader_mean_row(
    params: ModelParams, a1: ValueSurface, a2: ValueSurface, t: float, p_nodes
) -> np.ndarray:
    consts = derive_constants(params)
    p_arr = np.asarray(p_nodes, dtype=float)
    da1 = np.interp(p_arr, a1.grid.p_nodes(), a1.dp_row(t))
    da2 = np.interp(p_arr, a2.grid.p_nodes(), a2.dp_row(t))
    return (params.theta(p_arr) - params.r) * consts.l / params.sigma**2 - (
        params.beta(p_arr) / (consts.chi * params.sigma)
    ) * (da1 + (1.0 - consts.chi) * da2)


def leader_policy(
    params: ModelParams, a1: ValueSurface, a2: ValueSurface
) -> GaussianPolicy:
    """Leader's Gaussian equilibrium policy from solved ``a1`` and ``a2``."""
    if params.lambda0 <= 0.0:
        raise ValueError("leader policy requires lambda0 > 0")
    if a1.kind != "a1" or a2.kind != "a2":
        raise ValueError(
            f"expected surfaces of kinds ('a1', 'a2'), got ({a1.kind!r}, {a2.kind!r})"
        )
    consts = derive_constants(params)
    variance = params.lambda0 / (params.gamma1 * params.sigma**2 * consts.chi**2)

    def mean_surface(t, p):
        out = _leader_mean_row(params, a1, a2, t, np.asarray(p, dtype=float))
        return float(out) if np.ndim(p) == 0 else out

    return GaussianPolicy(mean_surface, variance, params=params, a1=a1, a2=a2)


def sample_action(
    policy: GaussianPolicy, t: float, p: float, rng_state: np.random.Generator
) -> float:
    """Draw one action: mean + std * z with z from the inverse normal CDF.

    Advances ``rng_state`` by exactly one uniform draw, so identical seeds
    reproduce identical actions bit for bit.
    """
    u = rng_state.random()
    z = float(ndtri(max(u, 1e-300)))
    return float(policy.mean(t, p)) + policy.std * z


def policy_entropy(policy: GaussianPolicy) -> float:
    """Differential entropy (nats) of the Gaussian policy; time-constant."""
    if policy.variance <= 0.0:
        raise ValueError("entropy requires positive variance")
    return 0.5 * math.log(2.0 * math.pi * math.e * policy.variance)
