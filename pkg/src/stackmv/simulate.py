"""Path simulation: filter SDE, sampled and exploratory wealth dynamics.

Two regimes share one Euler-Maruyama engine:

* ``sampled``     -- the leader draws one action per grid interval and holds
  it; the follower's control is re-evaluated at every SDE substep as
  base(t, P) + kappa * u1(active interval).  All three states (P, X1, X2)
  are driven by the single observable Brownian stream.
* ``exploratory`` -- the idealized continuous-sampling dynamics: the policy
  mean and standard deviation enter as separate diffusion channels, the
  second one driven by an independent Brownian stream.

Paths are vectorized in chunks; every path owns counter-based substreams
(see :mod:`stackmv.rng`), so results are independent of chunk size and of
how paths are distributed over workers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

from . import rng as _rng
from .market import ModelParams, derive_constants
from .pde import ValueSurface
from .strategies import GaussianPolicy

__all__ = [
    "TimeGrid",
    "PathBundle",
    "EnsembleResult",
    "FilterStats",
    "SimulationError",
    "step_filter",
    "simulate_sampled",
    "simulate_exploratory",
    "simulate_ensemble",
    "sample_u1_sequence",
    "z_transform",
    "terminal_z",
    "filter_statistics",
]

_SEQUENCE_PATH_BASE = 1 << 32  # path indices reserved for frozen u1 draws
_RECORD_LIMIT = 5_000_000      # max recorded state entries (paths * steps)


class SimulationError(RuntimeError):
    """Raised when a path produces non-finite state."""


@dataclass(frozen=True)
class TimeGrid:
    """Action-sampling grid on [0, T] plus SDE substeps per interval."""

    nodes: np.ndarray
    substeps: int = 1

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float)
        object.__setattr__(self, "nodes", nodes)
        if nodes.ndim != 1 or nodes.size < 2:
            raise ValueError("grid needs at least two nodes")
        if nodes[0] != 0.0:
            raise ValueError(f"grid must start at 0, got {nodes[0]}")
        if np.any(np.diff(nodes) <= 0.0):
            raise ValueError("grid nodes must be strictly increasing")
        if self.substeps < 1:
            raise ValueError(f"substeps must be >= 1, got {self.substeps}")
        nodes.setflags(write=False)

    @classmethod
    def uniform(cls, n_intervals: int, horizon: float, substeps: int = 1) -> "TimeGrid":
        if n_intervals < 1:
            raise ValueError(f"n_intervals must be >= 1, got {n_intervals}")
        return cls(np.linspace(0.0, horizon, n_intervals + 1), substeps)

    @property
    def n_intervals(self) -> int:
        return self.nodes.size - 1

    @property
    def mesh(self) -> float:
        """Largest interval length."""
        return float(np.max(np.diff(self.nodes)))

    def delta(self, t: float) -> float:
        """Piecewise-constant clock: the grid node active at time t."""
        horizon = float(self.nodes[-1])
        if not 0.0 <= t <= horizon:
            raise ValueError(f"time {t} outside [0, {horizon}]")
        i = int(np.searchsorted(self.nodes, t, side="right")) - 1
        return float(self.nodes[min(i, self.n_intervals - 1)])

    def step_times(self) -> np.ndarray:
        """All SDE step times, with `substeps` equal substeps per interval."""
        pieces = [
            np.linspace(self.nodes[i], self.nodes[i + 1], self.substeps, endpoint=False)
            for i in range(self.n_intervals)
        ]
        return np.concatenate(pieces + [self.nodes[-1:]])


@dataclass(frozen=True)
class PathBundle:
    """One recorded Monte Carlo realization."""

    times: np.ndarray
    P: np.ndarray
    what: np.ndarray
    wbar: np.ndarray | None
    X1: np.ndarray
    X2: np.ndarray
    u1_actions: np.ndarray | None
    regime: str


@dataclass(frozen=True)
class EnsembleResult:
    """Terminal state of a path ensemble (memory-light form)."""

    regime: str
    n_paths: int
    x1_T: np.ndarray
    x2_T: np.ndarray
    # optional per-path records used by paired-deviation reconstructions
    first_gain: np.ndarray | None = None   # sum of (theta - r) dt + sigma dWhat
    first_noise: np.ndarray | None = None  # standard-normal action draw at node 0


@dataclass(frozen=True)
class FilterStats:
    horizons: np.ndarray
    means: np.ndarray
    std_errors: np.ndarray
    n_paths: int
    p_min: float
    p_max: float
    excursion_fraction: float
    total_steps: int


def step_filter(p: float, dW: float, dt: float, params: ModelParams) -> float:
    """One Euler-Maruyama filter step, projected back onto [0, 1]."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p={p} outside [0, 1]")
    if not dt > 0.0:
        raise ValueError(f"dt must be positive, got {dt}")
    return float(min(max(p + params.beta(p) * dW, 0.0), 1.0))


# -- engine ---------------------------------------------------------------------


def _chunk_normals(seed: int, indices: np.ndarray, channel: int, n: int) -> np.ndarray:
    out = np.empty((indices.size, n))
    for row, idx in enumerate(indices):
        gen = _rng.stream(seed, int(idx), channel)
        out[row] = gen.random(n)
    np.clip(out, 1e-300, None, out=out)
    return ndtri(out)


def _interp_rows(row: np.ndarray, p: np.ndarray, inv_dp: float, last: int) -> np.ndarray:
    pos = p * inv_dp
    j = pos.astype(np.int64)
    np.minimum(j, last - 1, out=j)
    w = pos - j
    return row[j] * (1.0 - w) + row[j + 1] * w


class _Coefficients:
    """Per-step coefficient rows over the p-grid, precomputed once."""

    def __init__(
        self,
        grid: TimeGrid,
        params: ModelParams,
        a2: ValueSurface,
        policy: GaussianPolicy | None,
    ):
        self.step_times = grid.step_times()
        starts = self.step_times[:-1]
        self.dt = np.diff(self.step_times)
        self.sqrt_dt = np.sqrt(self.dt)
        self.n_steps = starts.size
        self.interval = np.repeat(np.arange(grid.n_intervals), grid.substeps)
        self.p_nodes = a2.grid.p_nodes()
        self.inv_dp = 1.0 / a2.grid.dp
        self.last = self.p_nodes.size - 1

        consts = derive_constants(params)
        self.kappa = consts.kappa
        scale = 1.0 - params.lambda2 / 2.0
        myopic = (params.theta(self.p_nodes) - params.r) / (
            params.sigma**2 * params.gamma2 * scale
        )
        beta_nodes = params.beta(self.p_nodes)
        self.gamma_rows = np.empty((self.n_steps, self.p_nodes.size))
        for k, t in enumerate(starts):
            self.gamma_rows[k] = myopic - beta_nodes * a2.dp_row(t) / (
                params.sigma * scale
            )
        self.mean_rows = None
        if policy is not None:
            self.mean_rows = np.empty_like(self.gamma_rows)
            for k, t in enumerate(starts):
                self.mean_rows[k] = policy.mean_row(t, self.p_nodes)


def simulate_ensemble(
    regime: str,
    grid: TimeGrid,
    policy: GaussianPolicy,
    a2: ValueSurface,
    params: ModelParams,
    x1_0: float,
    x2_0: float,
    p0: float,
    seed: int,
    n_paths: int,
    *,
    u1_sequence: np.ndarray | None = None,
    follower_override: tuple[float, float] | None = None,
    policy_window: tuple[float, float, float] | None = None,
    record_first_interval: bool = False,
    record_paths: bool = False,
    path_offset: int = 0,
    chunk_size: int = 8192,
) -> EnsembleResult | PathBundle:
    """Simulate ``n_paths`` paths and return terminals (or one full bundle).

    Optional perturbations:

    * ``u1_sequence``       -- frozen leader actions, one per grid interval;
      replaces sampling (sampled regime only).
    * ``follower_override`` -- ``(h, v2)``: the follower's control is the
      constant ``v2`` on [0, h) instead of the equilibrium response.
    * ``policy_window``     -- ``(h, mean_shift, var_scale)``: the policy is
      perturbed on [0, h): mean shifted, variance scaled.  In the sampled
      regime the window must align with grid nodes.

    With ``record_paths`` (single or few paths) the full state history is
    returned as a :class:`PathBundle` (first path) instead.
    """
    if regime not in ("sampled", "exploratory"):
        raise ValueError(f"regime must be 'sampled' or 'exploratory', got {regime!r}")
    if not 0.0 < p0 < 1.0:
        raise ValueError(f"p0 must lie in (0, 1), got {p0}")
    if n_paths < 1:
        raise ValueError(f"n_paths must be >= 1, got {n_paths}")
    if u1_sequence is not None:
        if regime != "sampled":
            raise ValueError("u1_sequence only applies to the sampled regime")
        u1_sequence = np.asarray(u1_sequence, dtype=float)
        if u1_sequence.shape != (grid.n_intervals,):
            raise ValueError(
                f"u1_sequence needs one action per interval "
                f"({grid.n_intervals}), got shape {u1_sequence.shape}"
            )
    if policy_window is not None and policy_window[2] <= 0.0:
        raise ValueError("variance scale must be positive")

    coef = _Coefficients(grid, params, a2, policy)
    n_steps = coef.n_steps
    if record_paths and n_paths * n_steps > _RECORD_LIMIT:
        raise ValueError("record_paths is limited to small ensembles")

    sigma = params.sigma
    mu_spread = params.mu1 - params.mu2
    sigma_tilde = policy.std
    exploratory = regime == "exploratory"
    node_steps = np.arange(grid.n_intervals) * grid.substeps
    node_is_perturbed = (
        None
        if policy_window is None
        else grid.nodes[:-1] < policy_window[0] - 1e-12
    )
    step_in_window = (
        None
        if policy_window is None
        else coef.step_times[:-1] < policy_window[0] - 1e-12
    )
    follower_window = (
        None
        if follower_override is None
        else coef.step_times[:-1] < follower_override[0] - 1e-12
    )

    x1_T = np.empty(n_paths)
    x2_T = np.empty(n_paths)
    g0 = np.empty(n_paths) if record_first_interval else None
    xi0 = np.empty(n_paths) if record_first_interval else None
    rec = None

    for start in range(0, n_paths, chunk_size):
        stop = min(start + chunk_size, n_paths)
        idx = np.arange(start, stop, dtype=np.int64) + path_offset
        m = idx.size

        zw = _chunk_normals(seed, idx, _rng.CHANNEL_WHAT, n_steps)
        what = zw * coef.sqrt_dt
        wbar = None
        if exploratory:
            wbar = _chunk_normals(seed, idx, _rng.CHANNEL_WBAR, n_steps) * coef.sqrt_dt
        xi = None
        if not exploratory and u1_sequence is None:
            xi = _chunk_normals(seed, idx, _rng.CHANNEL_XI, grid.n_intervals)

        P = np.full(m, p0)
        X1 = np.full(m, float(x1_0))
        X2 = np.full(m, float(x2_0))
        u1 = np.empty(m)
        u1_rec = np.empty((m, grid.n_intervals)) if (record_paths and not exploratory) else None
        if record_paths and rec is None:
            rec = {
                "P": np.empty((n_paths, n_steps + 1)),
                "X1": np.empty((n_paths, n_steps + 1)),
                "X2": np.empty((n_paths, n_steps + 1)),
                "what": np.empty((n_paths, n_steps)),
                "wbar": np.empty((n_paths, n_steps)) if exploratory else None,
            }
        if record_first_interval:
            g0[start:stop] = 0.0

        for k in range(n_steps):
            if record_paths:
                rec["P"][start:stop, k] = P
                rec["X1"][start:stop, k] = X1
                rec["X2"][start:stop, k] = X2
                rec["what"][start:stop, k] = what[:, k]
                if exploratory:
                    rec["wbar"][start:stop, k] = wbar[:, k]

            theta_minus_r = mu_spread * P + params.mu2 - params.r
            beta = mu_spread / sigma * P * (1.0 - P)
            dw = what[:, k]
            dt_k = coef.dt[k]
            core = theta_minus_r * dt_k + sigma * dw
            base = _interp_rows(coef.gamma_rows[k], P, coef.inv_dp, coef.last)

            if exploratory:
                b = _interp_rows(coef.mean_rows[k], P, coef.inv_dp, coef.last)
                s_t = sigma_tilde
                if step_in_window is not None and step_in_window[k]:
                    b = b + policy_window[1]
                    s_t = sigma_tilde * math.sqrt(policy_window[2])
                dwb = wbar[:, k]
                X1 += b * core + sigma * s_t * dwb
                X2 += (base + coef.kappa * b) * core + sigma * coef.kappa * s_t * dwb
            else:
                i = coef.interval[k]
                if k == node_steps[i]:
                    if u1_sequence is not None:
                        u1[:] = u1_sequence[i]
                    else:
                        mean_i = _interp_rows(
                            coef.mean_rows[k], P, coef.inv_dp, coef.last
                        )
                        s_i = sigma_tilde
                        if node_is_perturbed is not None and node_is_perturbed[i]:
                            mean_i = mean_i + policy_window[1]
                            s_i = sigma_tilde * math.sqrt(policy_window[2])
                        u1 = mean_i + s_i * xi[:, i]
                    if u1_rec is not None:
                        u1_rec[:, i] = u1
                if follower_window is not None and follower_window[k]:
                    u2 = np.full(m, follower_override[1])
                else:
                    u2 = base + coef.kappa * u1
                X1 += u1 * core
                X2 += u2 * core

            if record_first_interval and coef.interval[k] == 0:
                g0[start:stop] += core
            P = np.clip(P + beta * dw, 0.0, 1.0)

        if not (np.all(np.isfinite(X1)) and np.all(np.isfinite(X2))):
            bad = int(np.sum(~np.isfinite(X1) | ~np.isfinite(X2)))
            raise SimulationError(
                f"{bad} path(s) in chunk [{start}, {stop}) produced non-finite wealth"
            )

        x1_T[start:stop] = X1
        x2_T[start:stop] = X2
        if record_first_interval:
            xi0[start:stop] = xi[:, 0] if xi is not None else 0.0
        if record_paths:
            rec["P"][start:stop, n_steps] = P
            rec["X1"][start:stop, n_steps] = X1
            rec["X2"][start:stop, n_steps] = X2
            if u1_rec is not None:
                rec.setdefault("u1", np.empty((n_paths, grid.n_intervals)))
                rec["u1"][start:stop] = u1_rec

    if record_paths:
        return PathBundle(
            times=coef.step_times,
            P=rec["P"][0],
            what=rec["what"][0],
            wbar=rec["wbar"][0] if exploratory else None,
            X1=rec["X1"][0],
            X2=rec["X2"][0],
            u1_actions=rec["u1"][0] if not exploratory else None,
            regime=regime,
        )
    return EnsembleResult(
        regime=regime,
        n_paths=n_paths,
        x1_T=x1_T,
        x2_T=x2_T,
        first_gain=g0,
        first_noise=xi0,
    )


def simulate_sampled(
    grid: TimeGrid,
    policy: GaussianPolicy,
    a2: ValueSurface,
    params: ModelParams,
    x1_0: float,
    x2_0: float,
    p0: float,
    seed: int,
    path_index: int = 0,
) -> PathBundle:
    """One sampled-regime path with full state history."""
    return simulate_ensemble(
        "sampled", grid, policy, a2, params, x1_0, x2_0, p0, seed, 1,
        record_paths=True, path_offset=path_index,
    )


def simulate_exploratory(
    grid: TimeGrid,
    policy: GaussianPolicy,
    a2: ValueSurface,
    params: ModelParams,
    x1_0: float,
    x2_0: float,
    p0: float,
    seed: int,
    path_index: int = 0,
) -> PathBundle:
    """One exploratory-regime path with full state history."""
    return simulate_ensemble(
        "exploratory", grid, policy, a2, params, x1_0, x2_0, p0, seed, 1,
        record_paths=True, path_offset=path_index,
    )


def sample_u1_sequence(
    grid: TimeGrid,
    policy: GaussianPolicy,
    a2: ValueSurface,
    params: ModelParams,
    p0: float,
    seed: int,
    sequence_index: int = 0,
) -> np.ndarray:
    """Draw one frozen leader action sequence along its own filter path.

    Sequences live on reserved path indices so they never collide with the
    ensemble streams of the same master seed.
    """
    bundle = simulate_ensemble(
        "sampled", grid, policy, a2, params, 0.0, 0.0, p0, seed, 1,
        record_paths=True, path_offset=_SEQUENCE_PATH_BASE + sequence_index,
    )
    return bundle.u1_actions.copy()


def terminal_z(who: str, x1, x2, params: ModelParams):
    """Exposure-weighted wealth combination at matching indices."""
    if who == "leader":
        lam = params.lambda1
        own, other = x1, x2
    elif who == "follower":
        lam = params.lambda2
        own, other = x2, x1
    else:
        raise ValueError(f"who must be 'leader' or 'follower', got {who!r}")
    return (1.0 - lam / 2.0) * np.asarray(own) - lam / 2.0 * np.asarray(other)


def z_transform(bundle: PathBundle, who: str, params: ModelParams) -> np.ndarray:
    """Pointwise wealth-difference path for one investor."""
    return terminal_z(who, bundle.X1, bundle.X2, params)


def filter_statistics(
    params: ModelParams,
    p0: float,
    seed: int,
    n_paths: int,
    n_steps: int,
    horizon_fracs=(0.25, 0.5, 1.0),
    projection: bool = True,
    chunk_size: int = 8192,
) -> FilterStats:
    """Filter-only ensemble: means at horizons plus confinement diagnostics.

    With ``projection=False`` the path is left unclamped (coefficients are
    still evaluated on the clipped value) and excursions beyond
    [-eps, 1 + eps] with eps = 10 sqrt(dt) max(beta) are counted.
    """
    if not 0.0 < p0 < 1.0:
        raise ValueError(f"p0 must lie in (0, 1), got {p0}")
    dt = params.T / n_steps
    sqrt_dt = math.sqrt(dt)
    mu_spread = params.mu1 - params.mu2
    beta_max = mu_spread / (4.0 * params.sigma)
    eps = 10.0 * sqrt_dt * beta_max
    checks = sorted({max(1, round(f * n_steps)) for f in horizon_fracs})

    sums = np.zeros(len(checks))
    sumsq = np.zeros(len(checks))
    p_min, p_max = np.inf, -np.inf
    excursions = 0

    for start in range(0, n_paths, chunk_size):
        stop = min(start + chunk_size, n_paths)
        idx = np.arange(start, stop, dtype=np.int64)
        z = _chunk_normals(seed, idx, _rng.CHANNEL_WHAT, n_steps)
        P = np.full(idx.size, p0)
        pos = 0
        for k in range(n_steps):
            p_eval = np.clip(P, 0.0, 1.0) if not projection else P
            beta = mu_spread / params.sigma * p_eval * (1.0 - p_eval)
            P = P + beta * z[:, k] * sqrt_dt
            if projection:
                np.clip(P, 0.0, 1.0, out=P)
            else:
                excursions += int(np.sum((P < -eps) | (P > 1.0 + eps)))
            p_min = min(p_min, float(P.min()))
            p_max = max(p_max, float(P.max()))
            if pos < len(checks) and k + 1 == checks[pos]:
                sums[pos] += float(P.sum())
                sumsq[pos] += float((P**2).sum())
                pos += 1

    means = sums / n_paths
    variances = np.maximum(sumsq / n_paths - means**2, 0.0)
    return FilterStats(
        horizons=np.asarray([c * dt for c in checks]),
        means=means,
        std_errors=np.sqrt(variances / n_paths),
        n_paths=n_paths,
        p_min=p_min,
        p_max=p_max,
        excursion_fraction=excursions / (n_paths * n_steps),
        total_steps=n_paths * n_steps,
    )
