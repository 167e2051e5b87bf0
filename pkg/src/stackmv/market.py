"""Market model: parameter block, filter coefficients and derived constants.

One risky asset with unknown drift, either ``mu1`` or ``mu2`` (``mu1 > mu2``).
The partially informed investor tracks the posterior probability ``p`` that
the drift equals ``mu1``; every coefficient that enters the wealth and filter
dynamics is a function of ``p``:

* ``theta(p)``  -- posterior drift estimate, the convex combination of the
  two drift hypotheses,
* ``beta(p)``   -- volatility of the posterior probability process, vanishing
  quadratically at the endpoints of [0, 1].

All wealth quantities are discounted; there is no undiscounted API.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

__all__ = [
    "ModelParams",
    "DerivedConstants",
    "derive_constants",
    "gamma_term",
]


def _as_probability(p):
    """Validate p in [0, 1] (scalar or array) and return it as ndarray."""
    arr = np.asarray(p, dtype=float)
    if not np.all(np.isfinite(arr)) or np.any(arr < 0.0) or np.any(arr > 1.0):
        raise ValueError("probability argument outside [0, 1]")
    return arr


def _scalar_or_array(out: np.ndarray):
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class ModelParams:
    """All market, preference and randomization constants.

    Attributes
    ----------
    mu1, mu2 : drift hypotheses (per unit time), ``mu1 > mu2``.
    sigma    : stock volatility, > 0.
    r        : risk-free rate, > 0.
    T        : horizon, > 0.
    gamma1, gamma2 : risk aversions of leader / follower, > 0.
    lambda1, lambda2 : relative-performance weights in [0, 1).
    lambda0  : entropy (randomization) weight, >= 0.  Zero is permitted only
               in degenerate-limit regression tests; the leader policy and
               the leader value surface require a strictly positive value.
    """

    mu1: float
    mu2: float
    sigma: float
    r: float
    T: float
    gamma1: float
    gamma2: float
    lambda1: float
    lambda2: float
    lambda0: float

    def __post_init__(self):
        if not self.mu1 > self.mu2:
            raise ValueError(f"mu1 must exceed mu2, got mu1={self.mu1}, mu2={self.mu2}")
        for name in ("sigma", "r", "T", "gamma1", "gamma2"):
            if not getattr(self, name) > 0.0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("lambda1", "lambda2"):
            v = getattr(self, name)
            if not (0.0 <= v < 1.0):
                raise ValueError(f"{name} must lie in [0, 1), got {v}")
        if not self.lambda0 >= 0.0:
            raise ValueError(f"lambda0 must be nonnegative, got {self.lambda0}")

    @classmethod
    def unchecked(cls, **kwargs) -> "ModelParams":
        """Construct without validation.

        Test harnesses use this for degenerate settings such as ``mu1 == mu2``
        (which makes beta vanish identically and yields closed-form surfaces).
        Production code paths never call it.
        """
        obj = object.__new__(cls)
        for f in fields(cls):
            object.__setattr__(obj, f.name, float(kwargs[f.name]))
        return obj

    # -- coefficient functions ------------------------------------------------

    def theta(self, p):
        """Posterior drift estimate (mu1 - mu2) * p + mu2, affine in p."""
        arr = _as_probability(p)
        return _scalar_or_array((self.mu1 - self.mu2) * arr + self.mu2)

    def beta(self, p):
        """Filter volatility (mu1 - mu2)/sigma * p * (1 - p), >= 0 on [0, 1]."""
        arr = _as_probability(p)
        return _scalar_or_array((self.mu1 - self.mu2) / self.sigma * arr * (1.0 - arr))


@dataclass(frozen=True)
class DerivedConstants:
    """Constants derived from the preference weights.

    kappa : slope of the follower's response to the leader's action,
            lambda2 / (2 - lambda2), in [0, 1).
    chi   : aggregate exposure weight of the leader after the follower's
            response is folded in, (2 - lambda2 - lambda1) / (2 - lambda2),
            in (0, 1].
    l     : effective inverse risk aversion of the leader,
            (2*gamma2 - lambda2*gamma2 + lambda1*gamma1)
            / ((2 - lambda2 - lambda1) * gamma1 * gamma2), > 0.
    """

    kappa: float
    chi: float
    l: float


def derive_constants(params: ModelParams) -> DerivedConstants:
    """Evaluate the three derived constants as algebraic functions of params."""
    lam1, lam2 = params.lambda1, params.lambda2
    g1, g2 = params.gamma1, params.gamma2
    kappa = lam2 / (2.0 - lam2)
    chi = (2.0 - lam2 - lam1) / (2.0 - lam2)
    l = (2.0 * g2 - lam2 * g2 + lam1 * g1) / ((2.0 - lam2 - lam1) * g1 * g2)
    return DerivedConstants(kappa=kappa, chi=chi, l=l)


def gamma_term(p, da2, params: ModelParams):
    """The action-independent part of the follower's equilibrium response.

    ``da2`` is the p-derivative of the follower's anticipated-gains surface
    evaluated at the same (t, p) as ``p``; the caller supplies it from a
    solved surface.  The full response is ``gamma_term + kappa * u1``.
    """
    scale = 1.0 - params.lambda2 / 2.0
    myopic = (params.theta(p) - params.r) / (params.sigma**2 * params.gamma2 * scale)
    hedge = params.beta(p) * np.asarray(da2, dtype=float) / (params.sigma * scale)
    out = np.asarray(myopic - hedge, dtype=float)
    return _scalar_or_array(out)
