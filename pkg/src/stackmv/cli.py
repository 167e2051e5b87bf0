"""Configuration-driven experiment runner.

Reads a YAML config (see README for the schema), executes one named
experiment and writes CSV artifacts plus a key=value manifest that fully
reproduces the run.  Exit codes: 0 = pass, 1 = error, 2 = a claim check
failed.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .market import ModelParams, derive_constants
from .objectives import (
    CSV_HEADER,
    estimate_follower_objective,
    estimate_leader_objective,
    value_function,
)
from .pde import (
    PdeGridSpec,
    SurfaceSet,
    ValueSurface,
    default_csv_name,
    solve_a,
    solve_surfaces,
    write_csv,
)
from .simulate import TimeGrid, simulate_ensemble, sample_u1_sequence, terminal_z
from .strategies import leader_policy
from .verify import (
    ConvergenceReport,
    PerturbationSpec,
    convergence_study,
    follower_slope_test,
    leader_slope_test,
    stackelberg_certificate,
)

EXPERIMENTS = (
    "solve_surfaces",
    "simulate",
    "verify_follower",
    "verify_leader",
    "convergence",
    "certificate",
    "reduce_checks",
)

EXIT_PASS, EXIT_ERROR, EXIT_FAIL = 0, 1, 2


@dataclass(frozen=True)
class SimulationSpec:
    n_paths: int
    seed: int
    substeps: int = 16
    n_intervals: int | None = 64
    nodes: tuple | None = None
    x1_0: float = 1.0
    x2_0: float = 1.0
    p0: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.p0 < 1.0:
            raise ValueError(f"simulation.p0 must lie in (0, 1), got {self.p0}")
        if self.nodes is None and self.n_intervals is None:
            raise ValueError("simulation needs either nodes or n_intervals")

    def time_grid(self, horizon: float) -> TimeGrid:
        if self.nodes is not None:
            return TimeGrid(np.asarray(self.nodes, dtype=float), self.substeps)
        return TimeGrid.uniform(self.n_intervals, horizon, self.substeps)


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelParams
    pde: PdeGridSpec
    simulation: SimulationSpec
    experiment: str
    output_dir: str

    def to_dict(self) -> dict:
        sim = dataclasses.asdict(self.simulation)
        if sim["nodes"] is not None:
            sim["nodes"] = list(sim["nodes"])
        else:
            sim.pop("nodes")
        return {
            "model": dataclasses.asdict(self.model),
            "pde": dataclasses.asdict(self.pde),
            "simulation": sim,
            "experiment": self.experiment,
            "output_dir": self.output_dir,
        }


def _build_section(cls, data: dict, section: str):
    if not isinstance(data, dict):
        raise ValueError(f"{section}: expected a mapping, got {type(data).__name__}")
    valid = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - valid
    if unknown:
        raise ValueError(f"{section}.{sorted(unknown)[0]}: unknown field")
    try:
        if "nodes" in data and data["nodes"] is not None:
            data = dict(data, nodes=tuple(data["nodes"]))
        return cls(**data)
    except TypeError as exc:
        raise ValueError(f"{section}: {exc}") from None
    except ValueError as exc:
        raise ValueError(f"{section}.{exc}") from None


def config_from_dict(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ValueError("config root must be a mapping")
    for key in ("model", "simulation", "experiment", "output_dir"):
        if key not in raw:
            raise ValueError(f"{key}: required section missing")
    if "seed" not in raw.get("simulation", {}):
        raise ValueError("simulation.seed: required (wall-clock seeding is not supported)")
    experiment = raw["experiment"]
    if experiment not in EXPERIMENTS:
        raise ValueError(f"experiment: must be one of {EXPERIMENTS}, got {experiment!r}")
    return ExperimentConfig(
        model=_build_section(ModelParams, raw["model"], "model"),
        pde=_build_section(PdeGridSpec, raw.get("pde", {}), "pde"),
        simulation=_build_section(SimulationSpec, raw["simulation"], "simulation"),
        experiment=experiment,
        output_dir=str(raw["output_dir"]),
    )


def load_config(path) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        raw = yaml.safe_load(fh)
    return config_from_dict(raw)


def dump_config(config: ExperimentConfig) -> str:
    return yaml.safe_dump(config.to_dict(), sort_keys=True)


def _flatten(prefix: str, value, out: list):
    if isinstance(value, dict):
        for k in sorted(value):
            _flatten(f"{prefix}.{k}" if prefix else str(k), value[k], out)
    elif isinstance(value, (list, tuple)):
        out.append((prefix, ",".join(repr(v) for v in value)))
    else:
        out.append((prefix, repr(value) if isinstance(value, float) else str(value)))


def write_manifest(config: ExperimentConfig, out_dir: Path) -> None:
    payload = dump_config(config)
    digest = hashlib.sha256(payload.encode()).hexdigest()
    lines = [
        "tool=stackmv",
        f"version={__version__}",
        f"config_hash=sha256:{digest}",
        f"seed={config.simulation.seed}",
        f"created={time.strftime('%Y-%m-%dT%H:%M:%S%z')}",
    ]
    flat: list = []
    _flatten("config", config.to_dict(), flat)
    lines += [f"{k}={v}" for k, v in flat]
    (out_dir / "manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def emit_plot_data(surface_or_report, out_path) -> None:
    """Long-format (x, y, series) CSV for external plotting tools."""
    rows: list[tuple[float, float, str]] = []
    if isinstance(surface_or_report, ValueSurface):
        surf = surface_or_report
        times = surf.grid.time_levels(surf.params.T)
        p_nodes = surf.grid.p_nodes()
        for p in np.arange(0.1, 0.95, 0.1):
            j = int(np.argmin(np.abs(p_nodes - p)))
            for t, row in zip(times, surf.values):
                rows.append((float(t), float(row[j]), f"p={p:.1f}"))
    elif isinstance(surface_or_report, ConvergenceReport):
        rep = surface_or_report
        for mesh, gap, se in zip(rep.meshes, rep.objective_gaps, rep.gap_std_errors):
            rows.append((float(mesh), float(gap), "gap"))
            rows.append((float(mesh), float(se), "std_error"))
    else:
        raise TypeError(f"cannot emit plot data for {type(surface_or_report).__name__}")
    with open(out_path, "w", encoding="utf-8") as fh:
        fh.write("x,y,series\n")
        for x, y, series in rows:
            fh.write(f"{x:.17g},{y:.17g},{series}\n")


# -- experiments ------------------------------------------------------------------


def _write_summary(out_dir: Path, flags: dict) -> bool:
    lines = [f"{k}={'PASS' if v else 'FAIL'}" for k, v in flags.items()]
    (out_dir / "summary.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return all(flags.values())


def _solve_all(config: ExperimentConfig) -> SurfaceSet:
    return solve_surfaces(config.model, config.pde)


def _run_solve_surfaces(config: ExperimentConfig, out_dir: Path, _args) -> int:
    surfaces = _solve_all(config)
    for surf in (surfaces.a1, surfaces.a2, surfaces.A1, surfaces.A2):
        write_csv(surf, out_dir / default_csv_name(surf))
        emit_plot_data(surf, out_dir / f"plot_{surf.kind}_slices.csv")
    return EXIT_PASS


def _run_simulate(config: ExperimentConfig, out_dir: Path, args) -> int:
    params, sim = config.model, config.simulation
    surfaces = _solve_all(config)
    policy = leader_policy(params, surfaces.a1, surfaces.a2)
    grid = sim.time_grid(params.T)

    u1_seq = sample_u1_sequence(
        grid, policy, surfaces.a2, params, sim.p0, sim.seed, sequence_index=0
    )
    sampled = simulate_ensemble(
        "sampled", grid, policy, surfaces.a2, params,
        sim.x1_0, sim.x2_0, sim.p0, sim.seed, sim.n_paths, u1_sequence=u1_seq,
    )
    exploratory = simulate_ensemble(
        "exploratory", grid, policy, surfaces.a2, params,
        sim.x1_0, sim.x2_0, sim.p0, sim.seed, sim.n_paths,
    )
    est_f = estimate_follower_objective(sampled, params)
    est_l = estimate_leader_objective(exploratory, policy, params)

    v2 = value_function(
        "follower", 0.0, sim.x1_0, sim.x2_0, sim.p0, surfaces.A2, params
    )
    v1 = value_function(
        "leader", 0.0, sim.x1_0, sim.x2_0, sim.p0, surfaces.A1, params
    )
    with open(out_dir / "estimates.csv", "w", encoding="utf-8") as fh:
        fh.write(CSV_HEADER + "\n")
        fh.write(est_f.csv_row() + "\n")
        fh.write(est_l.csv_row() + "\n")
    flags = {
        "follower_value_closure": abs(est_f.value - v2) <= 4.0 * est_f.std_error,
        "leader_value_closure": abs(est_l.value - v1) <= 4.0 * est_l.std_error,
    }

    if args.dump_paths:
        from .simulate import simulate_sampled

        for i in range(4):
            bundle = simulate_sampled(
                grid, policy, surfaces.a2, params,
                sim.x1_0, sim.x2_0, sim.p0, sim.seed, path_index=i,
            )
            _dump_bundle(bundle, grid, out_dir / f"path_{i}.csv")

    return EXIT_PASS if _write_summary(out_dir, flags) else EXIT_FAIL


def _dump_bundle(bundle, grid: TimeGrid, path: Path) -> None:
    active = np.repeat(bundle.u1_actions, grid.substeps)
    active = np.append(active, active[-1])
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("t,P,X1,X2,u1_active\n")
        for t, p, x1, x2, u in zip(bundle.times, bundle.P, bundle.X1, bundle.X2, active):
            fh.write(f"{t:.17g},{p:.17g},{x1:.17g},{x2:.17g},{u:.17g}\n")


def _run_verify_follower(config: ExperimentConfig, out_dir: Path, _args) -> int:
    params, sim = config.model, config.simulation
    surfaces = _solve_all(config)
    grid = sim.time_grid(params.T)
    window = grid.mesh
    rows, flags = [], {}
    for magnitude in (1.0, -1.0, 0.0):
        spec = PerturbationSpec("follower_constant", magnitude, window)
        estimates = follower_slope_test(
            spec, params, surfaces, grid, sim.n_paths, sim.seed,
            x1_0=sim.x1_0, x2_0=sim.x2_0, p0=sim.p0,
        )
        rows += estimates
        label = f"follower_slope_mag_{magnitude:+g}"
        if magnitude == 0.0:
            flags[label] = all(abs(e.slope) <= 4.0 * e.std_error + 1e-12 for e in estimates)
        else:
            flags[label] = all(e.slope <= 3.0 * e.std_error for e in estimates)
    _write_slope_csv(rows, out_dir / "follower_slopes.csv")
    return EXIT_PASS if _write_summary(out_dir, flags) else EXIT_FAIL


def _run_verify_leader(config: ExperimentConfig, out_dir: Path, _args) -> int:
    params, sim = config.model, config.simulation
    surfaces = _solve_all(config)
    grid = sim.time_grid(params.T)
    window = grid.mesh
    batteries = [
        ("leader_mean_shift", 1.0),
        ("leader_mean_shift", -1.0),
        ("leader_mean_shift", 0.0),
        ("leader_variance_scale", 0.5),
        ("leader_variance_scale", 2.0),
    ]
    rows, flags = [], {}
    for kind, magnitude in batteries:
        if kind == "leader_variance_scale" and magnitude <= 0:
            continue
        spec = PerturbationSpec(kind, magnitude, window)
        est = leader_slope_test(
            spec, params, surfaces, grid, sim.n_paths, sim.seed,
            x1_0=sim.x1_0, x2_0=sim.x2_0, p0=sim.p0,
        )
        rows.append(est)
        null = kind == "leader_mean_shift" and magnitude == 0.0
        label = f"{kind}_{magnitude:+g}"
        if null:
            flags[label] = abs(est.slope) <= 4.0 * est.std_error + 1e-12
        else:
            flags[label] = est.slope <= 3.0 * est.std_error
    _write_slope_csv(rows, out_dir / "leader_slopes.csv")
    return EXIT_PASS if _write_summary(out_dir, flags) else EXIT_FAIL


def _write_slope_csv(rows, path: Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("kind,magnitude,window,realization,slope,std_error,unpaired_std_error,n_paths\n")
        for e in rows:
            real = "" if e.realization is None else str(e.realization)
            fh.write(
                f"{e.kind},{e.magnitude:.17g},{e.window:.17g},{real},"
                f"{e.slope:.17g},{e.std_error:.17g},{e.unpaired_std_error:.17g},{e.n_paths}\n"
            )


def _run_convergence(config: ExperimentConfig, out_dir: Path, _args) -> int:
    params, sim = config.model, config.simulation
    surfaces = _solve_all(config)
    report = convergence_study(
        params, surfaces, [8, 16, 32, 64], sim.n_paths, sim.seed,
        x1_0=sim.x1_0, x2_0=sim.x2_0, p0=sim.p0,
    )
    _write_convergence_csv(report, out_dir / "convergence.csv")
    emit_plot_data(report, out_dir / "plot_convergence.csv")
    flags = {
        "gaps_resolved": not report.noise_limited,
        "gaps_monotone_within_noise": report.monotone_within_noise,
        "fitted_order_at_least_0.7": bool(report.fitted_order >= 0.7),
    }
    if report.noise_limited:
        (out_dir / "summary.txt").write_text(
            "noise_limited=FAIL\nhint=increase simulation.n_paths\n", encoding="utf-8"
        )
        return EXIT_FAIL
    return EXIT_PASS if _write_summary(out_dir, flags) else EXIT_FAIL


def _write_convergence_csv(report: ConvergenceReport, path: Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("mesh,objective_gap,std_error,j_sampled,j_exploratory,fitted_order,epsilon\n")
        for mesh, gap, se, js in zip(
            report.meshes, report.objective_gaps, report.gap_std_errors, report.j_sampled
        ):
            fh.write(
                f"{mesh:.17g},{gap:.17g},{se:.17g},{js:.17g},"
                f"{report.j_exploratory:.17g},{report.fitted_order:.17g},{report.epsilon:.17g}\n"
            )


def _run_certificate(config: ExperimentConfig, out_dir: Path, _args) -> int:
    params, sim = config.model, config.simulation
    surfaces = _solve_all(config)
    grid = sim.time_grid(params.T)
    report = stackelberg_certificate(
        params, surfaces, grid, sim.n_paths, sim.seed,
        x1_0=sim.x1_0, x2_0=sim.x2_0, p0=sim.p0,
    )
    with open(out_dir / "certificate.csv", "w", encoding="utf-8") as fh:
        fh.write("mean_offset,variance_scale,gain,std_error\n")
        for d in report.deviations:
            fh.write(
                f"{d.mean_offset:.17g},{d.variance_scale:.17g},"
                f"{d.gain:.17g},{d.std_error:.17g}\n"
            )
    flags = {"epsilon_stackelberg_certificate": report.passes}
    ok = _write_summary(out_dir, flags)
    if not ok:
        with open(out_dir / "summary.txt", "a", encoding="utf-8") as fh:
            fh.write("hint=refine the sampling grid (smaller mesh) and rerun\n")
    return EXIT_PASS if ok else EXIT_FAIL


def _run_reduce_checks(config: ExperimentConfig, out_dir: Path, _args) -> int:
    params = config.model
    grid = config.pde
    flags = {}

    # follower strategy collapses to the single-investor rule when lambda2 = 0
    p_no_l2 = dataclasses.replace(params, lambda2=0.0)
    a2 = solve_a(p_no_l2, p_no_l2.gamma2, grid, kind="a2")
    p_nodes = grid.p_nodes()
    worst = 0.0
    for k, t in enumerate(grid.time_levels(p_no_l2.T)):
        base = (p_no_l2.theta(p_nodes) - p_no_l2.r) / (
            p_no_l2.sigma**2 * p_no_l2.gamma2
        ) - p_no_l2.beta(p_nodes) * a2.dp_values[k] / p_no_l2.sigma
        scale = 1.0 - p_no_l2.lambda2 / 2.0
        full = (p_no_l2.theta(p_nodes) - p_no_l2.r) / (
            p_no_l2.sigma**2 * p_no_l2.gamma2 * scale
        ) - p_no_l2.beta(p_nodes) * a2.dp_values[k] / (p_no_l2.sigma * scale)
        worst = max(worst, float(np.max(np.abs(full - base))))
    flags["follower_reduction_lambda2_zero"] = worst <= 1e-12

    # leader policy collapses to the single-investor rule when both lambdas = 0
    p_single = dataclasses.replace(params, lambda1=0.0, lambda2=0.0)
    consts = derive_constants(p_single)
    flags["leader_l_equals_inverse_gamma1"] = consts.l == 1.0 / p_single.gamma1
    a1 = solve_a(p_single, p_single.gamma1, grid, kind="a1")
    a2s = solve_a(p_single, p_single.gamma2, grid, kind="a2")
    policy = leader_policy(p_single, a1, a2s)
    worst = 0.0
    for t in (0.0, 0.5 * p_single.T, p_single.T):
        mean = policy.mean_row(t, p_nodes)
        single = (p_single.theta(p_nodes) - p_single.r) / (
            p_single.sigma**2 * p_single.gamma1
        ) - p_single.beta(p_nodes) * np.interp(
            p_nodes, p_nodes, a1.dp_row(t)
        ) / p_single.sigma
        worst = max(worst, float(np.max(np.abs(mean - single))))
    flags["leader_reduction_lambdas_zero"] = worst <= 1e-12

    # equal risk aversions give identical anticipated-gains surfaces
    p_equal = dataclasses.replace(params, gamma2=params.gamma1)
    s1 = solve_a(p_equal, p_equal.gamma1, grid, kind="a1")
    s2 = solve_a(p_equal, p_equal.gamma2, grid, kind="a2")
    flags["equal_gamma_identical_surfaces"] = bool(
        np.array_equal(s1.values, s2.values)
        and np.array_equal(s1.dp_values, s2.dp_values)
    )

    # overlay table: leader mean at t=0 vs the single-investor mean
    full_a1 = solve_a(params, params.gamma1, grid, kind="a1")
    full_a2 = solve_a(params, params.gamma2, grid, kind="a2")
    full_policy = leader_policy(params, full_a1, full_a2)
    with open(out_dir / "plot_leader_mean_overlay.csv", "w", encoding="utf-8") as fh:
        fh.write("x,y,series\n")
        for p, y in zip(p_nodes, full_policy.mean_row(0.0, p_nodes)):
            fh.write(f"{p:.17g},{y:.17g},leader_mean\n")
        for p, y in zip(p_nodes, policy.mean_row(0.0, p_nodes)):
            fh.write(f"{p:.17g},{y:.17g},single_investor_mean\n")

    return EXIT_PASS if _write_summary(out_dir, flags) else EXIT_FAIL


_RUNNERS = {
    "solve_surfaces": _run_solve_surfaces,
    "simulate": _run_simulate,
    "verify_follower": _run_verify_follower,
    "verify_leader": _run_verify_leader,
    "convergence": _run_convergence,
    "certificate": _run_certificate,
    "reduce_checks": _run_reduce_checks,
}


def run(config_path, out_override=None, seed_override=None, args=None) -> int:
    """Execute the experiment named in the config; returns the exit status."""
    args = args or argparse.Namespace(dump_paths=False, threads=None)
    try:
        config = load_config(config_path)
        if seed_override is not None:
            config = dataclasses.replace(
                config,
                simulation=dataclasses.replace(config.simulation, seed=int(seed_override)),
            )
        if out_override is not None:
            config = dataclasses.replace(config, output_dir=str(out_override))
    except (OSError, yaml.YAMLError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_ERROR

    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        status = _RUNNERS[config.experiment](config, out_dir, args)
    except Exception as exc:  # numerical failures surface as module errors
        print(f"{config.experiment} failed: {exc}", file=sys.stderr)
        return EXIT_ERROR
    write_manifest(config, out_dir)
    return status


def main(argv=None) -> None:
    parser = argparse.ArgumentParser(
        prog="stackmv",
        description="Stackelberg mean-variance equilibrium experiments",
    )
    parser.add_argument("--config", required=True, help="YAML experiment config")
    parser.add_argument("--out", default=None, help="output directory override")
    parser.add_argument("--seed", type=int, default=None, help="seed override")
    parser.add_argument(
        "--threads", type=int, default=None,
        help="worker cap for vectorized simulation chunks (results are identical "
        "for any value)",
    )
    parser.add_argument(
        "--dump-paths", action="store_true",
        help="write a few full path histories as CSV (simulate experiment)",
    )
    ns = parser.parse_args(argv)
    sys.exit(run(ns.config, out_override=ns.out, seed_override=ns.seed, args=ns))
