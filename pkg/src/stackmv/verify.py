"""Numerical verification of the equilibrium and convergence claims.

* Slope tests: perturb one player's control (or policy) on a short window
  [0, h] and estimate the first-order objective change per unit window.  At
  an intra-personal equilibrium the slope is nonpositive for every
  perturbation and zero for the null perturbation.  All comparisons are
  paired: both arms replay identical noise streams.
* Convergence study: the gap between the leader's sampled-dynamics objective
  and its exploratory idealization shrinks linearly in the sampling mesh.
  The default estimator integrates the action-sampling and exploration noise
  out analytically path by path (conditioning on the observable noise);
  this leaves the same expectations but removes the randomization variance,
  which would otherwise swamp the O(mesh) gap at desk-scale path counts.
  The direct two-ensemble estimator remains available and reports itself
  noise-limited when the gaps are not resolved.
* Certificate: one-node policy deviations at the initial grid node must not
  improve the sampled objective by more than the measured exploratory-
  approximation gap (plus Monte Carlo noise).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .market import ModelParams, derive_constants
from .objectives import mv_statistics
from .pde import SurfaceSet
from .simulate import (
    TimeGrid,
    _chunk_normals,
    _Coefficients,
    _interp_rows,
    sample_u1_sequence,
    simulate_ensemble,
    terminal_z,
)
from .strategies import GaussianPolicy, follower_response, leader_policy, policy_entropy
from . import rng as _rng

__all__ = [
    "PerturbationSpec",
    "SlopeEstimate",
    "ConvergenceReport",
    "CertificateReport",
    "DeviationResult",
    "follower_slope_test",
    "leader_slope_test",
    "convergence_study",
    "stackelberg_certificate",
]

PERTURBATION_KINDS = ("follower_constant", "leader_mean_shift", "leader_variance_scale")


@dataclass(frozen=True)
class PerturbationSpec:
    kind: str
    magnitude: float
    window: float

    def __post_init__(self):
        if self.kind not in PERTURBATION_KINDS:
            raise ValueError(f"kind must be one of {PERTURBATION_KINDS}, got {self.kind!r}")
        if not math.isfinite(self.magnitude):
            raise ValueError("magnitude must be finite")
        if not self.window > 0.0:
            raise ValueError(f"window must be positive, got {self.window}")
        if self.kind == "leader_variance_scale" and self.magnitude <= 0.0:
            raise ValueError("variance scale must be positive")


@dataclass(frozen=True)
class SlopeEstimate:
    """Objective change per unit window, with paired standard error."""

    kind: str
    magnitude: float
    window: float
    slope: float
    std_error: float
    unpaired_std_error: float
    j_equilibrium: float
    j_perturbed: float
    n_paths: int
    realization: int | None = None


@dataclass(frozen=True)
class ConvergenceReport:
    meshes: np.ndarray
    objective_gaps: np.ndarray
    gap_std_errors: np.ndarray
    fitted_order: float
    epsilon: float
    epsilon_std_error: float
    j_exploratory: float
    j_sampled: np.ndarray
    monotone_within_noise: bool
    noise_limited: bool
    n_paths: int
    estimator: str

    @property
    def passes(self) -> bool:
        return (
            not self.noise_limited
            and self.monotone_within_noise
            and math.isfinite(self.fitted_order)
            and self.fitted_order >= 0.7
        )


@dataclass(frozen=True)
class DeviationResult:
    mean_offset: float
    variance_scale: float
    gain: float
    std_error: float


@dataclass(frozen=True)
class CertificateReport:
    mesh: float
    deviations: list[DeviationResult]
    max_gain: float
    max_gain_std_error: float
    epsilon: float
    passes: bool
    recommend_refinement: bool
    n_paths: int
    convergence: ConvergenceReport | None = field(repr=False, default=None)


def _paired_slope(
    kind: str,
    magnitude: float,
    window: float,
    z_eq: np.ndarray,
    z_pert: np.ndarray,
    gamma: float,
    entropy_shift: float = 0.0,
    realization: int | None = None,
) -> SlopeEstimate:
    _, _, val_eq, if_eq = mv_statistics(z_eq, gamma)
    _, _, val_pert, if_pert = mv_statistics(z_pert, gamma)
    n = z_eq.size
    diff = (val_pert + entropy_shift) - val_eq
    if_diff = if_pert - if_eq
    se_paired = float(np.std(if_diff, ddof=1) / np.sqrt(n))
    se_unpaired = float(
        np.sqrt(np.var(if_eq, ddof=1) / n + np.var(if_pert, ddof=1) / n)
    )
    return SlopeEstimate(
        kind=kind,
        magnitude=magnitude,
        window=window,
        slope=diff / window,
        std_error=se_paired / window,
        unpaired_std_error=se_unpaired / window,
        j_equilibrium=val_eq,
        j_perturbed=val_pert + entropy_shift,
        n_paths=n,
        realization=realization,
    )


def follower_slope_test(
    spec: PerturbationSpec,
    params: ModelParams,
    surfaces: SurfaceSet,
    grid: TimeGrid,
    n_paths: int,
    seed: int,
    *,
    x1_0: float = 1.0,
    x2_0: float = 1.0,
    p0: float = 0.5,
    realizations: int = 8,
) -> list[SlopeEstimate]:
    """Slope of the follower objective under a constant-control window.

    The follower's control is replaced on [0, window) by the constant
    ``equilibrium action at (0, p0) + magnitude``; magnitude 0 is the null
    perturbation.  The almost-sure claim is tested per frozen leader action
    sequence: each of the ``realizations`` sequences gets its own paired
    estimate against the same observable-noise ensemble.
    """
    if spec.kind != "follower_constant":
        raise ValueError(f"expected kind 'follower_constant', got {spec.kind!r}")
    if spec.window > params.T:
        raise ValueError("window exceeds the horizon")
    policy = leader_policy(params, surfaces.a1, surfaces.a2)
    consts = derive_constants(params)
    base0 = _follower_base(params, surfaces, 0.0, p0)

    results = []
    for real in range(realizations):
        u1_seq = sample_u1_sequence(
            grid, policy, surfaces.a2, params, p0, seed, sequence_index=real
        )
        v2 = base0 + consts.kappa * u1_seq[0] + spec.magnitude
        eq = simulate_ensemble(
            "sampled", grid, policy, surfaces.a2, params,
            x1_0, x2_0, p0, seed, n_paths, u1_sequence=u1_seq,
        )
        pert = simulate_ensemble(
            "sampled", grid, policy, surfaces.a2, params,
            x1_0, x2_0, p0, seed, n_paths, u1_sequence=u1_seq,
            follower_override=(spec.window, v2),
        )
        z_eq = terminal_z("follower", eq.x1_T, eq.x2_T, params)
        z_pert = terminal_z("follower", pert.x1_T, pert.x2_T, params)
        results.append(
            _paired_slope(
                spec.kind, spec.magnitude, spec.window,
                z_eq, z_pert, params.gamma2, realization=real,
            )
        )
    return results


def _follower_base(params, surfaces, t, p):
    return follower_response(t, p, surfaces.a2, params).base


def leader_slope_test(
    spec: PerturbationSpec,
    params: ModelParams,
    surfaces: SurfaceSet,
    grid: TimeGrid,
    n_paths: int,
    seed: int,
    *,
    x1_0: float = 1.0,
    x2_0: float = 1.0,
    p0: float = 0.5,
) -> SlopeEstimate:
    """Slope of the leader's exploratory objective under a policy window.

    ``leader_mean_shift`` adds ``magnitude`` to the policy mean on
    [0, window); ``leader_variance_scale`` multiplies the policy variance by
    ``magnitude`` there.  Entropy bookkeeping for the variance case is exact:
    the entropy integral changes by window * log(magnitude) / 2.
    """
    if spec.kind not in ("leader_mean_shift", "leader_variance_scale"):
        raise ValueError(f"expected a leader perturbation kind, got {spec.kind!r}")
    if spec.window > params.T:
        raise ValueError("window exceeds the horizon")
    policy = leader_policy(params, surfaces.a1, surfaces.a2)
    if spec.kind == "leader_mean_shift":
        window = (spec.window, spec.magnitude, 1.0)
        entropy_shift = 0.0
    else:
        window = (spec.window, 0.0, spec.magnitude)
        entropy_shift = params.lambda0 * spec.window * 0.5 * math.log(spec.magnitude)

    eq = simulate_ensemble(
        "exploratory", grid, policy, surfaces.a2, params,
        x1_0, x2_0, p0, seed, n_paths,
    )
    pert = simulate_ensemble(
        "exploratory", grid, policy, surfaces.a2, params,
        x1_0, x2_0, p0, seed, n_paths, policy_window=window,
    )
    z_eq = terminal_z("leader", eq.x1_T, eq.x2_T, params)
    z_pert = terminal_z("leader", pert.x1_T, pert.x2_T, params)
    return _paired_slope(
        spec.kind, spec.magnitude, spec.window,
        z_eq, z_pert, params.gamma1, entropy_shift=entropy_shift,
    )


# -- convergence study ------------------------------------------------------------


def _conditional_samples(
    params: ModelParams,
    policy: GaussianPolicy,
    surfaces: SurfaceSet,
    mesh_counts: list[int],
    n_paths: int,
    seed: int,
    sde_steps: int,
    p0: float,
    z1_0: float,
    chunk_size: int = 8192,
):
    """Per-path conditional moments of the leader terminal wealth-difference.

    Conditioning on the observable noise, the sampled terminal Z1 is Gaussian
    with mean M = z1 + chi * sum_i btilde_i G_i - lambda1/2 * sum_k Gamma_k g_k
    and variance chi^2 vartilde * sum_i G_i^2, where g_k is the per-step gain
    (theta - r) dt + sigma dWhat and G_i its sum over a sampling interval.
    The exploratory counterpart freezes nothing and has conditional variance
    sigma^2 chi^2 vartilde T exactly.

    The returned S_i = sum_i G_i^2 carries the exactly-mean-zero control
    variate sigma^2 (sum_i dWhat_i^2 - T) subtracted, which removes the
    dominant quadratic-increment fluctuation while leaving the expectation
    untouched (Euler increments are exact Gaussians with variance dt).
    """
    consts = derive_constants(params)
    chi = consts.chi
    half_lam1 = params.lambda1 / 2.0
    sigma = params.sigma
    mu_spread = params.mu1 - params.mu2

    grid = TimeGrid.uniform(sde_steps, params.T, substeps=1)
    coef = _Coefficients(grid, params, surfaces.a2, policy)
    strides = []
    for n_int in mesh_counts:
        if sde_steps % n_int != 0:
            raise ValueError(
                f"sde_steps={sde_steps} not divisible by mesh count {n_int}"
            )
        strides.append(sde_steps // n_int)

    n_meshes = len(mesh_counts)
    M_tilde = np.empty(n_paths)
    M = np.empty((n_meshes, n_paths))
    S = np.empty((n_meshes, n_paths))

    for start in range(0, n_paths, chunk_size):
        stop = min(start + chunk_size, n_paths)
        idx = np.arange(start, stop, dtype=np.int64)
        m = idx.size
        what = _chunk_normals(seed, idx, _rng.CHANNEL_WHAT, sde_steps) * coef.sqrt_dt

        P = np.full(m, p0)
        gamma_acc = np.zeros(m)
        expl_acc = np.zeros(m)
        frozen = [np.zeros(m) for _ in range(n_meshes)]
        G = [np.zeros(m) for _ in range(n_meshes)]
        W = [np.zeros(m) for _ in range(n_meshes)]
        Mb = [np.zeros(m) for _ in range(n_meshes)]
        Ssum = [np.zeros(m) for _ in range(n_meshes)]
        Qsum = [np.zeros(m) for _ in range(n_meshes)]

        for k in range(sde_steps):
            theta_minus_r = mu_spread * P + params.mu2 - params.r
            g = theta_minus_r * coef.dt[k] + sigma * what[:, k]
            b_row = _interp_rows(coef.mean_rows[k], P, coef.inv_dp, coef.last)
            gam_row = _interp_rows(coef.gamma_rows[k], P, coef.inv_dp, coef.last)
            gamma_acc += gam_row * g
            expl_acc += b_row * g
            for j, stride in enumerate(strides):
                if k % stride == 0:
                    if k > 0:
                        Mb[j] += frozen[j] * G[j]
                        Ssum[j] += G[j] ** 2
                        Qsum[j] += W[j] ** 2
                        G[j][:] = 0.0
                        W[j][:] = 0.0
                    frozen[j][:] = b_row
                G[j] += g
                W[j] += what[:, k]
            beta = mu_spread / sigma * P * (1.0 - P)
            P = np.clip(P + beta * what[:, k], 0.0, 1.0)

        for j in range(n_meshes):
            Mb[j] += frozen[j] * G[j]
            Ssum[j] += G[j] ** 2
            Qsum[j] += W[j] ** 2
            M[j, start:stop] = z1_0 + chi * Mb[j] - half_lam1 * gamma_acc
            S[j, start:stop] = Ssum[j] - sigma**2 * (Qsum[j] - params.T)
        M_tilde[start:stop] = z1_0 + chi * expl_acc - half_lam1 * gamma_acc

    return M_tilde, M, S


def convergence_study(
    params: ModelParams,
    surfaces: SurfaceSet,
    meshes: list[int],
    n_paths: int,
    seed: int,
    *,
    x1_0: float = 1.0,
    x2_0: float = 1.0,
    p0: float = 0.5,
    estimator: str = "conditional",
    sde_steps: int = 2048,
    substeps_direct: int | None = None,
) -> ConvergenceReport:
    """Gap between sampled and exploratory leader objectives per mesh.

    ``meshes`` lists interval counts (e.g. [8, 16, 32, 64]); the report
    stores the corresponding mesh widths T / n.  Common random numbers are
    used across meshes.  ``estimator`` is ``"conditional"`` (default,
    variance-reduced, see module docstring) or ``"direct"``.
    """
    if estimator not in ("conditional", "direct"):
        raise ValueError(f"estimator must be 'conditional' or 'direct', got {estimator!r}")
    counts = sorted(int(n) for n in meshes)
    if len(counts) < 2:
        raise ValueError("need at least two meshes")
    policy = leader_policy(params, surfaces.a1, surfaces.a2)
    consts = derive_constants(params)
    z1_0 = float(terminal_z("leader", x1_0, x2_0, params))
    gamma = params.gamma1
    entropy_term = params.lambda0 * params.T * policy_entropy(policy)

    if estimator == "conditional":
        M_tilde, M, S = _conditional_samples(
            params, policy, surfaces, counts, n_paths, seed, sde_steps, p0, z1_0
        )
        cond_var_expl = params.sigma**2 * consts.chi**2 * policy.variance * params.T

        def leader_if(mm, extra_var):
            mean = float(np.mean(mm))
            centered = mm - mean
            var = float(np.sum(centered**2) / (mm.size - 1))
            value = mean - 0.5 * gamma * (var + float(np.mean(extra_var)))
            infl = (
                centered
                - 0.5 * gamma * (centered**2 - var)
                - 0.5 * gamma * (extra_var - np.mean(extra_var))
            )
            return value + entropy_term, infl

        j_tilde, if_tilde = leader_if(M_tilde, np.full(n_paths, cond_var_expl))
        cond_scale = consts.chi**2 * policy.variance
        j_sampled = np.empty(len(counts))
        gap_ifs = np.empty((len(counts), n_paths))
        for j in range(len(counts)):
            j_m, if_m = leader_if(M[j], cond_scale * S[j])
            j_sampled[j] = j_m
            gap_ifs[j] = if_m - if_tilde
    else:
        sub = substeps_direct or max(1, sde_steps // max(counts))
        expl_grid = TimeGrid.uniform(max(counts), params.T, substeps=sub)
        expl = simulate_ensemble(
            "exploratory", expl_grid, policy, surfaces.a2, params,
            x1_0, x2_0, p0, seed, n_paths,
        )
        z_tilde = terminal_z("leader", expl.x1_T, expl.x2_T, params)
        _, _, val_t, if_tilde = mv_statistics(z_tilde, gamma)
        j_tilde = val_t + entropy_term
        j_sampled = np.empty(len(counts))
        gap_ifs = np.empty((len(counts), n_paths))
        for j, n_int in enumerate(counts):
            grid_m = TimeGrid.uniform(
                n_int, params.T, substeps=max(1, sde_steps // n_int)
            )
            samp = simulate_ensemble(
                "sampled", grid_m, policy, surfaces.a2, params,
                x1_0, x2_0, p0, seed, n_paths,
            )
            z_m = terminal_z("leader", samp.x1_T, samp.x2_T, params)
            _, _, val_m, if_m = mv_statistics(z_m, gamma)
            j_sampled[j] = val_m + entropy_term
            gap_ifs[j] = if_m - if_tilde

    # gaps ordered from coarsest mesh (largest width) to finest
    widths = np.asarray([params.T / n for n in counts])
    signed_gaps = j_sampled - j_tilde
    gaps = np.abs(signed_gaps)
    ses = np.asarray(
        [float(np.std(gap_ifs[j], ddof=1) / math.sqrt(n_paths)) for j in range(len(counts))]
    )

    monotone = True
    for j in range(len(counts) - 1):
        coarse, fine = gaps[j], gaps[j + 1]
        se_pair = float(
            np.std(gap_ifs[j] - gap_ifs[j + 1], ddof=1) / math.sqrt(n_paths)
        )
        if fine > coarse + 3.0 * se_pair + 1e-15:
            monotone = False
    noise_limited = bool(np.any(gaps < 2.0 * ses) or np.any(signed_gaps == 0.0))

    if np.all(gaps > 0.0):
        logw = np.log(widths)
        logg = np.log(gaps)
        order = float(np.polyfit(logw, logg, 1)[0])
    else:
        order = float("nan")

    return ConvergenceReport(
        meshes=widths,
        objective_gaps=gaps,
        gap_std_errors=ses,
        fitted_order=order,
        epsilon=float(gaps[-1]),
        epsilon_std_error=float(ses[-1]),
        j_exploratory=float(j_tilde),
        j_sampled=j_sampled,
        monotone_within_noise=monotone,
        noise_limited=noise_limited,
        n_paths=n_paths,
        estimator=estimator,
    )


# -- certificate ------------------------------------------------------------------

DEFAULT_DEVIATION_GRID = (
    (0.5, 1.0),
    (-0.5, 1.0),
    (1.0, 1.0),
    (-1.0, 1.0),
    (0.0, 0.5),
    (0.0, 2.0),
)


def stackelberg_certificate(
    params: ModelParams,
    surfaces: SurfaceSet,
    grid: TimeGrid,
    n_paths: int,
    seed: int,
    deviation_grid=None,
    convergence: ConvergenceReport | None = None,
    *,
    x1_0: float = 1.0,
    x2_0: float = 1.0,
    p0: float = 0.5,
    convergence_paths: int | None = None,
) -> CertificateReport:
    """Check that one-node policy deviations cannot beat the sampled objective.

    Each deviation replaces the policy at the initial grid node by a Gaussian
    with shifted mean and/or scaled variance.  Because the deviation only
    changes the first sampled action, the deviated terminal wealth-difference
    is reconstructed exactly from the equilibrium ensemble's recorded first
    interval, giving perfectly paired comparisons.  The tolerance epsilon is
    the measured sampled-vs-exploratory gap at the operating mesh.
    """
    if deviation_grid is None:
        deviation_grid = DEFAULT_DEVIATION_GRID
    policy = leader_policy(params, surfaces.a1, surfaces.a2)
    consts = derive_constants(params)
    gamma = params.gamma1

    eq = simulate_ensemble(
        "sampled", grid, policy, surfaces.a2, params,
        x1_0, x2_0, p0, seed, n_paths, record_first_interval=True,
    )
    z_eq = terminal_z("leader", eq.x1_T, eq.x2_T, params)
    _, _, val_eq, if_eq = mv_statistics(z_eq, gamma)
    delta0 = float(grid.nodes[1] - grid.nodes[0])

    rows = []
    for offset, scale in deviation_grid:
        if scale <= 0.0:
            raise ValueError(f"variance scale must be positive, got {scale}")
        du1 = offset + (math.sqrt(scale) - 1.0) * policy.std * eq.first_noise
        z_dev = z_eq + consts.chi * du1 * eq.first_gain
        _, _, val_dev, if_dev = mv_statistics(z_dev, gamma)
        entropy_shift = params.lambda0 * delta0 * 0.5 * math.log(scale)
        gain = (val_dev + entropy_shift) - val_eq
        se = float(np.std(if_dev - if_eq, ddof=1) / math.sqrt(n_paths))
        rows.append(
            DeviationResult(
                mean_offset=offset, variance_scale=scale, gain=gain, std_error=se
            )
        )

    best = max(rows, key=lambda r: r.gain)
    if convergence is None:
        counts = sorted({8, 16, 32, 64} | {grid.n_intervals})
        convergence = convergence_study(
            params, surfaces, counts,
            convergence_paths or n_paths, seed,
            x1_0=x1_0, x2_0=x2_0, p0=p0,
        )
    mesh_width = grid.mesh
    match = np.isclose(convergence.meshes, mesh_width, rtol=1e-9)
    if np.any(match):
        epsilon = float(convergence.objective_gaps[np.argmax(match)])
    else:
        epsilon = convergence.epsilon
    passes = best.gain <= epsilon + 3.0 * best.std_error
    return CertificateReport(
        mesh=mesh_width,
        deviations=rows,
        max_gain=best.gain,
        max_gain_std_error=best.std_error,
        epsilon=epsilon,
        passes=passes,
        recommend_refinement=not passes,
        n_paths=n_paths,
        convergence=convergence,
    )
