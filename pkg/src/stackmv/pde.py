"""Finite-difference solvers for the four backward value surfaces.

Each surface lives on a uniform grid over [0, T] x [0, 1] and satisfies a
backward Cauchy problem with zero terminal data:

* anticipated-gains surfaces (kinds ``a1`` / ``a2``): advection-diffusion
  with source (theta(p) - r)^2 / (sigma^2 * gamma); their p-derivative feeds
  the hedging demand of the strategies,
* value-offset surfaces (kinds ``A2`` / ``A1``): pure diffusion driven by the
  running reward of the corresponding equilibrium strategy; ``A1`` carries an
  additional constant source rewarding the randomization entropy.

The diffusion coefficient beta(p)^2 / 2 degenerates at p in {0, 1}, where the
problems reduce to ODEs in time with exact linear-in-(T - t) solutions; those
are imposed as Dirichlet data so the discrete stencil never needs a boundary
condition the continuous problem does not supply.

Solvers march in the time-to-go variable tau = T - t and store rows
forward-indexed in t, so ``values[-1]`` is the (zero) terminal row.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_banded

from .market import ModelParams, derive_constants

__all__ = [
    "PdeGridSpec",
    "ValueSurface",
    "SurfaceSet",
    "StabilityError",
    "solve_a",
    "solve_A2",
    "solve_A1",
    "solve_surfaces",
    "source_R",
    "interpolate",
    "entropy_source_constant",
    "write_csv",
    "default_csv_name",
]

SCHEMES = ("explicit", "crank_nicolson")
A_KINDS = ("a1", "a2")
BIG_A_KINDS = ("A1", "A2")


class StabilityError(RuntimeError):
    """Raised when the explicit scheme violates its stability bound."""


@dataclass(frozen=True)
class PdeGridSpec:
    """Uniform grid: ``n_time`` time levels, ``n_space`` interior p-nodes."""

    n_time: int = 512
    n_space: int = 256
    scheme: str = "crank_nicolson"

    def __post_init__(self):
        if self.n_time < 2:
            raise ValueError(f"n_time must be >= 2, got {self.n_time}")
        if self.n_space < 3:
            raise ValueError(f"n_space must be >= 3, got {self.n_space}")
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")

    @property
    def dp(self) -> float:
        return 1.0 / (self.n_space + 1)

    def dt(self, horizon: float) -> float:
        return horizon / (self.n_time - 1)

    def p_nodes(self) -> np.ndarray:
        """All p-nodes including the two boundary nodes at 0 and 1."""
        return np.linspace(0.0, 1.0, self.n_space + 2)

    def time_levels(self, horizon: float) -> np.ndarray:
        return np.linspace(0.0, horizon, self.n_time)


@dataclass(frozen=True)
class ValueSurface:
    """A solved surface with optional stored p-derivative.

    ``values`` is indexed (time level, p node) over the full node set
    including boundaries; the terminal row is identically zero.
    ``dp_values`` holds second-order central differences in p (one-sided at
    the boundary nodes) and is present only for the ``a1`` / ``a2`` kinds.
    """

    kind: str
    values: np.ndarray
    dp_values: np.ndarray | None
    grid: PdeGridSpec
    params: ModelParams
    gamma: float | None = None

    def __post_init__(self):
        self.values.setflags(write=False)
        if self.dp_values is not None:
            self.dp_values.setflags(write=False)

    @property
    def horizon(self) -> float:
        return self.params.T

    def _time_weights(self, t: float) -> tuple[int, float]:
        T = self.horizon
        if not (-1e-12 <= t <= T + 1e-12):
            raise ValueError(f"time {t} outside [0, {T}]")
        dt = self.grid.dt(T)
        pos = min(max(t, 0.0), T) / dt
        k = min(int(pos), self.grid.n_time - 2)
        return k, pos - k

    def value_row(self, t: float) -> np.ndarray:
        """Row of surface values at time t, linearly interpolated in time."""
        k, w = self._time_weights(t)
        return (1.0 - w) * self.values[k] + w * self.values[k + 1]

    def dp_row(self, t: float) -> np.ndarray:
        """Row of p-derivatives at time t; only stored for a1/a2 kinds."""
        if self.dp_values is None:
            raise ValueError(f"surface kind {self.kind!r} stores no p-derivative")
        k, w = self._time_weights(t)
        return (1.0 - w) * self.dp_values[k] + w * self.dp_values[k + 1]


@dataclass(frozen=True)
class SurfaceSet:
    """The four solved surfaces of one parameter set on one grid."""

    a1: ValueSurface
    a2: ValueSurface
    A1: ValueSurface
    A2: ValueSurface


# -- boundary data -------------------------------------------------------------


def _a_boundary_rates(params: ModelParams, gamma: float) -> tuple[float, float]:
    # At p in {0, 1} the advection and diffusion vanish and the problem is
    # d a / d tau = (mu_i - r)^2 / (sigma^2 gamma), hence a = rate * tau.
    lo = (params.mu2 - params.r) ** 2 / (params.sigma**2 * gamma)
    hi = (params.mu1 - params.r) ** 2 / (params.sigma**2 * gamma)
    return lo, hi


def _big_a_boundary_rates(
    params: ModelParams, gamma: float, extra: float
) -> tuple[float, float]:
    # With beta = 0 and dp a = 0 the running reward collapses to
    # (theta - r)^2 / (2 sigma^2 gamma); `extra` adds the constant entropy
    # reward of the leader problem.
    lo = (params.mu2 - params.r) ** 2 / (2.0 * params.sigma**2 * gamma) + extra
    hi = (params.mu1 - params.r) ** 2 / (2.0 * params.sigma**2 * gamma) + extra
    return lo, hi


def entropy_source_constant(params: ModelParams) -> float:
    """Constant entropy reward rate entering the leader value surface.

    Equals lambda0/2 * log(2*pi*lambda0 / (gamma1 * sigma^2 * chi^2)), i.e.
    lambda0 * (policy entropy - 1/2) at the equilibrium policy variance.
    Requires lambda0 > 0; the limit lambda0 -> 0 diverges and is only ever
    used for the policy mean, never for the value surface.
    """
    if params.lambda0 <= 0.0:
        raise ValueError("entropy source requires lambda0 > 0")
    chi = derive_constants(params).chi
    return 0.5 * params.lambda0 * math.log(
        2.0 * math.pi * params.lambda0 / (params.gamma1 * params.sigma**2 * chi**2)
    )


# -- source terms ----------------------------------------------------------------


def _running_reward(theta_minus_r, beta, da, gamma, sigma):
    """Four-term running reward of the aggregate equilibrium strategy.

    With m = (theta - r)/(sigma^2 gamma) - beta * da / sigma:
    reward = (theta - r) m - gamma/2 sigma^2 m^2 - gamma/2 beta^2 da^2
             - gamma sigma beta da m.
    """
    m = theta_minus_r / (sigma**2 * gamma) - beta * da / sigma
    return (
        theta_minus_r * m
        - 0.5 * gamma * sigma**2 * m**2
        - 0.5 * gamma * beta**2 * da**2
        - gamma * sigma * beta * da * m
    )


def source_R(p, da2, params: ModelParams):
    """Running reward entering the follower value surface, at given dp a2."""
    p_arr = np.asarray(p, dtype=float)
    da = np.asarray(da2, dtype=float)
    if not np.all(np.isfinite(da)):
        raise ValueError("da2 must be finite")
    out = _running_reward(
        params.theta(p_arr) - params.r,
        params.beta(p_arr),
        da,
        params.gamma2,
        params.sigma,
    )
    out = np.asarray(out, dtype=float)
    return float(out) if out.ndim == 0 else out


# -- core marching ----------------------------------------------------------------


def _check_explicit_stability(params: ModelParams, grid: PdeGridSpec):
    beta_max = (params.mu1 - params.mu2) / (4.0 * params.sigma)
    dt = grid.dt(params.T)
    dp = grid.dp
    if beta_max > 0.0 and dt > dp**2 / beta_max**2:
        raise StabilityError(
            f"explicit scheme unstable: dt={dt:.3e} exceeds "
            f"dp^2/max(beta)^2={dp**2 / beta_max**2:.3e}; refine n_time or use "
            "crank_nicolson"
        )


def _march(
    params: ModelParams,
    grid: PdeGridSpec,
    diffusion: np.ndarray,
    advection: np.ndarray,
    source_rows,
    boundary_rates: tuple[float, float],
):
    """March val_tau = D val_pp + C val_p + source backward from zero data.

    ``diffusion`` (D >= 0) and ``advection`` (C) are arrays over interior
    nodes; ``source_rows(k)`` returns the interior source at time index k.
    Returns the full (n_time, n_space + 2) array indexed forward in t.
    """
    n_t, n_s = grid.n_time, grid.n_space
    dt = grid.dt(params.T)
    dp = grid.dp
    taus = params.T - grid.time_levels(params.T)
    lo_rate, hi_rate = boundary_rates

    vals = np.zeros((n_t, n_s + 2))
    vals[:, 0] = lo_rate * taus
    vals[:, -1] = hi_rate * taus

    if grid.scheme == "explicit":
        _check_explicit_stability(params, grid)
        c_plus = np.maximum(advection, 0.0)
        c_minus = np.minimum(advection, 0.0)
        for k in range(n_t - 2, -1, -1):
            prev = vals[k + 1]
            interior = prev[1:-1]
            lap = (prev[2:] - 2.0 * interior + prev[:-2]) / dp**2
            fwd = (prev[2:] - interior) / dp
            bwd = (interior - prev[:-2]) / dp
            new = interior + dt * (
                diffusion * lap + c_plus * fwd + c_minus * bwd + source_rows(k + 1)
            )
            if not np.all(np.isfinite(new)):
                raise RuntimeError(f"non-finite values while marching at time level {k}")
            vals[k, 1:-1] = new
        return vals

    # Crank-Nicolson with centered advection; the operator is constant in
    # time so the tridiagonal system is rebuilt cheaply per step.
    lower = diffusion / dp**2 - advection / (2.0 * dp)
    diag = -2.0 * diffusion / dp**2
    upper = diffusion / dp**2 + advection / (2.0 * dp)

    ab = np.zeros((3, n_s))
    ab[0, 1:] = -0.5 * dt * upper[:-1]
    ab[1, :] = 1.0 - 0.5 * dt * diag
    ab[2, :-1] = -0.5 * dt * lower[1:]

    for k in range(n_t - 2, -1, -1):
        prev = vals[k + 1]
        interior = prev[1:-1]
        explicit_op = (
            lower * np.concatenate(([prev[0]], interior[:-1]))
            + diag * interior
            + upper * np.concatenate((interior[1:], [prev[-1]]))
        )
        rhs = interior + 0.5 * dt * explicit_op + 0.5 * dt * (
            source_rows(k + 1) + source_rows(k)
        )
        rhs[0] += 0.5 * dt * lower[0] * vals[k, 0]
        rhs[-1] += 0.5 * dt * upper[-1] * vals[k, -1]
        new = solve_banded((1, 1), ab, rhs)
        if not np.all(np.isfinite(new)):
            raise RuntimeError(f"non-finite values while marching at time level {k}")
        vals[k, 1:-1] = new
    return vals


def _central_dp(values: np.ndarray, dp: float) -> np.ndarray:
    out = np.empty_like(values)
    out[:, 1:-1] = (values[:, 2:] - values[:, :-2]) / (2.0 * dp)
    out[:, 0] = (-3.0 * values[:, 0] + 4.0 * values[:, 1] - values[:, 2]) / (2.0 * dp)
    out[:, -1] = (3.0 * values[:, -1] - 4.0 * values[:, -2] + values[:, -3]) / (2.0 * dp)
    return out


# -- public solves ----------------------------------------------------------------


def solve_a(
    params: ModelParams, gamma: float, grid: PdeGridSpec, kind: str | None = None
) -> ValueSurface:
    """Solve an anticipated-gains surface for the given risk aversion.

    The kind defaults to ``a1`` when gamma matches ``params.gamma1`` and
    ``a2`` otherwise; pass ``kind`` explicitly to disambiguate (needed when
    the two risk aversions coincide).  Any positive gamma is accepted.
    """
    if not gamma > 0.0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    if kind is None:
        kind = "a1" if gamma == params.gamma1 else "a2"
    if kind not in A_KINDS:
        raise ValueError(f"kind must be one of {A_KINDS}, got {kind!r}")
    p_int = grid.p_nodes()[1:-1]
    beta = params.beta(p_int)
    theta_minus_r = params.theta(p_int) - params.r
    source = theta_minus_r**2 / (params.sigma**2 * gamma)

    vals = _march(
        params,
        grid,
        diffusion=0.5 * beta**2,
        advection=-beta * theta_minus_r / params.sigma,
        source_rows=lambda k: source,
        boundary_rates=_a_boundary_rates(params, gamma),
    )
    return ValueSurface(
        kind=kind,
        values=vals,
        dp_values=_central_dp(vals, grid.dp),
        grid=grid,
        params=params,
        gamma=gamma,
    )


def _dp_rows_on_grid(a: ValueSurface, grid: PdeGridSpec, params: ModelParams):
    """p-derivative rows of ``a`` sampled on the target grid's nodes."""
    if a.grid == grid:
        return a.dp_values
    p_nodes = grid.p_nodes()
    times = grid.time_levels(params.T)
    src_nodes = a.grid.p_nodes()
    rows = np.empty((grid.n_time, p_nodes.size))
    for k, t in enumerate(times):
        rows[k] = np.interp(p_nodes, src_nodes, a.dp_row(t))
    return rows


def _solve_big_a(
    params: ModelParams,
    a: ValueSurface,
    grid: PdeGridSpec,
    gamma: float,
    extra_source: float,
    kind: str,
) -> ValueSurface:
    p_int = grid.p_nodes()[1:-1]
    beta = params.beta(p_int)
    theta_minus_r = params.theta(p_int) - params.r
    dp_rows = _dp_rows_on_grid(a, grid, params)

    def source_rows(k: int) -> np.ndarray:
        return (
            _running_reward(theta_minus_r, beta, dp_rows[k][1:-1], gamma, params.sigma)
            + extra_source
        )

    vals = _march(
        params,
        grid,
        diffusion=0.5 * beta**2,
        advection=np.zeros_like(beta),
        source_rows=source_rows,
        boundary_rates=_big_a_boundary_rates(params, gamma, extra_source),
    )
    return ValueSurface(
        kind=kind, values=vals, dp_values=None, grid=grid, params=params, gamma=gamma
    )


def solve_A2(params: ModelParams, a2: ValueSurface, grid: PdeGridSpec) -> ValueSurface:
    """Solve the follower value-offset surface from a solved ``a2``."""
    if a2.kind != "a2":
        raise ValueError(f"expected a surface of kind 'a2', got {a2.kind!r}")
    if a2.grid.n_time < grid.n_time or a2.grid.n_space < grid.n_space:
        raise ValueError("a2 was solved on a coarser grid than requested")
    return _solve_big_a(params, a2, grid, params.gamma2, 0.0, "A2")


def solve_A1(params: ModelParams, a1: ValueSurface, grid: PdeGridSpec) -> ValueSurface:
    """Solve the leader value-offset surface from a solved ``a1``.

    Rejects lambda0 <= 0: the constant entropy reward diverges in that limit.
    """
    if a1.kind != "a1":
        raise ValueError(f"expected a surface of kind 'a1', got {a1.kind!r}")
    if a1.grid.n_time < grid.n_time or a1.grid.n_space < grid.n_space:
        raise ValueError("a1 was solved on a coarser grid than requested")
    extra = entropy_source_constant(params)
    return _solve_big_a(params, a1, grid, params.gamma1, extra, "A1")


def solve_surfaces(params: ModelParams, grid: PdeGridSpec) -> SurfaceSet:
    """Solve all four surfaces on one grid."""
    a1 = solve_a(params, params.gamma1, grid, kind="a1")
    # identical problem up to the risk aversion; reuse when gammas coincide
    if params.gamma2 == params.gamma1:
        a2 = ValueSurface(
            kind="a2",
            values=a1.values,
            dp_values=a1.dp_values,
            grid=grid,
            params=params,
            gamma=params.gamma2,
        )
    else:
        a2 = solve_a(params, params.gamma2, grid, kind="a2")
    return SurfaceSet(
        a1=a1,
        a2=a2,
        A1=solve_A1(params, a1, grid),
        A2=solve_A2(params, a2, grid),
    )


def interpolate(surface: ValueSurface, t: float, p: float, which: str = "value"):
    """Bilinear interpolation on the stored grid; exact at grid nodes."""
    if which not in ("value", "dp"):
        raise ValueError(f"which must be 'value' or 'dp', got {which!r}")
    if not (-1e-12 <= p <= 1.0 + 1e-12):
        raise ValueError(f"p={p} outside [0, 1]")
    row = surface.value_row(t) if which == "value" else surface.dp_row(t)
    dp = surface.grid.dp
    pos = min(max(p, 0.0), 1.0) / dp
    j = min(int(pos), surface.grid.n_space)
    w = pos - j
    return float((1.0 - w) * row[j] + w * row[j + 1])


# -- CSV export -------------------------------------------------------------------


def default_csv_name(surface: ValueSurface) -> str:
    return f"{surface.kind}_{surface.grid.n_time}x{surface.grid.n_space}.csv"


def write_csv(surface: ValueSurface, path) -> None:
    """Header row of p-nodes; one row per time level with t first."""
    p_nodes = surface.grid.p_nodes()
    times = surface.grid.time_levels(surface.params.T)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("t," + ",".join(f"{p:.17g}" for p in p_nodes) + "\n")
        for t, row in zip(times, surface.values):
            fh.write(f"{t:.17g}," + ",".join(f"{v:.17g}" for v in row) + "\n")
