from __future__ import annotations

from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from pathlib import Path
import argparse
import json
import logging
import math
import os
import sys
import time
from typing import TextIO

import numpy as np

from . import __version__
from .analysis import (
    MAGIC_ANGLE,
    AnalysisError,
    build_t2_map,
    detect_revivals,
    dipolar_scaling_factor,
    fit_damped_sinusoid,
    magic_angle_hop_average,
)
from .bath import BathConfiguration, generate_bath, generate_lattice, save_bath
from .config import SCENARIOS, RunConfig, apply_overrides, config_from_mapping, parse_config
from .echo import ensemble_average, fringe_scan
from .hamiltonian import FieldGeometry, frequency_trace, tilt_spectrum
from .results import (
    ECHO_FILE,
    FREQS_FILE,
    FRINGE_FIT_FILE,
    FRINGES_FILE,
    HOP_FILE,
    PLOT_LAYOUTS,
    REVIVALS_FILE,
    T2MAP_FILE,
    TILT_SPECTRUM_FILE,
    emit_plot_data,
    write_csv,
    write_metadata,
)
from .runner import SweepRunner
from .store import RunStore
from .utils import canonical_hash, pid_is_alive, utc_now_iso


logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_INVALID = 2
TILT_SPECTRUM_POINTS = 19


@dataclass(slots=True)
class ScenarioOutput:
    files: list[Path]
    seeds: tuple[int, ...] = ()
    dt_max: float | None = None
    extra: dict[str, object] = field(default_factory=dict)


def _nearest_spins(bath: BathConfiguration, count: int) -> BathConfiguration:
    order = np.argsort(bath.distances(), kind="stable")[:count]
    return BathConfiguration(
        seed=bath.seed,
        sites=bath.sites[np.sort(order)],
        abundance=bath.abundance,
        radius=bath.radius,
        min_distance=bath.min_distance,
    )


def _run_freqs(config: RunConfig, runner: SweepRunner, run_dir: Path) -> ScenarioOutput:
    geometry = config.geometry.to_geometry()
    full = generate_bath(
        config.bath.radius_nm,
        config.bath.abundance,
        config.bath.seed,
        min_distance=config.bath.min_distance_nm,
    )
    bath = _nearest_spins(full, config.freqs.n_spins)
    trace = frequency_trace(bath, geometry, config.freqs.times(geometry), config.freqs.m_s)
    trace_file = write_csv(
        run_dir / FREQS_FILE,
        ("spin_index", "r_nm", "time_s", "m_s", "frequency_hz"),
        trace.rows(),
        scenario=config.scenario,
        comments=(f"ambiguous_samples: {int(trace.ambiguous.sum())}",),
    )

    thetas = np.linspace(0.0, math.pi / 2, TILT_SPECTRUM_POINTS)
    spectrum = tilt_spectrum(bath, geometry.b_magnitude, thetas, geometry.omega_rot, config.freqs.m_s)
    radii = bath.distances()
    rows = [
        (math.degrees(float(theta)), spin, float(radii[spin]), float(spectrum[spin, k]))
        for k, theta in enumerate(thetas)
        for spin in range(bath.size)
    ]
    spectrum_file = write_csv(
        run_dir / TILT_SPECTRUM_FILE,
        ("theta_deg", "spin_index", "r_nm", "frequency_hz"),
        rows,
        scenario=config.scenario,
    )
    return ScenarioOutput(
        files=[trace_file, spectrum_file],
        seeds=(config.bath.seed,),
        extra={"n_spins": bath.size, "bath_size": full.size},
    )


def _run_echo(config: RunConfig, runner: SweepRunner, run_dir: Path) -> ScenarioOutput:
    geometry = config.geometry.to_geometry()
    result = ensemble_average(
        config.bath.seeds(),
        config.bath.parameters(),
        geometry,
        config.tau.grid(),
        config.engine.t2_phenom_s,
        settings=config.engine.settings(),
        stretch=config.engine.envelope_stretch,
        runner=runner,
    )
    spread = result.spread if result.spread is not None else np.zeros(result.tau_grid.size)
    files = [
        write_csv(
            run_dir / ECHO_FILE,
            ("tau_s", "signal", "spread"),
            zip(result.tau_grid.tolist(), result.signal.tolist(), spread.tolist()),
            scenario=config.scenario,
            comments=(f"seeds: {len(result.seeds)}", f"engine: {result.engine}"),
        )
    ]

    coverage = float(result.tau_grid[-1] - result.tau_grid[0])
    if geometry.f_rot > 0 and coverage >= 3.0 / geometry.f_rot:
        revivals = detect_revivals(result, geometry.f_rot)
        files.append(
            write_csv(
                run_dir / REVIVALS_FILE,
                ("time_s", "amplitude", "multiple", "offset_from_2t_rot_s"),
                [(r.time, r.amplitude, r.multiple, r.offset) for r in revivals],
                scenario=config.scenario,
            )
        )
    elif geometry.f_rot > 0:
        logger.info("tau grid covers fewer than three rotation periods; skipping revival detection")
    return ScenarioOutput(files=files, seeds=result.seeds, dt_max=result.dt_max)


def _run_fringes(config: RunConfig, runner: SweepRunner, run_dir: Path) -> ScenarioOutput:
    geometry = config.geometry.to_geometry()
    fringes = config.fringes
    settings = config.engine.settings()
    scan = fringe_scan(
        geometry,
        fringes.theta_grid(),
        config.bath.parameters(),
        config.bath.seeds(),
        revival_order=fringes.revival_order,
        phase_schedule=fringes.phase_schedule_rad,
        phase_start=fringes.phase_start_rad,
        phase_slope=fringes.phase_slope,
        t2_phenom=config.engine.t2_phenom_s,
        settings=settings,
        runner=runner,
    )
    rows = [
        (math.degrees(float(theta)), float(b), float(tau), float(phase), float(s))
        for theta, b, tau, phase, s in zip(scan.theta_grid, scan.b_total, scan.tau, scan.start_phase, scan.signal)
    ]
    scan_file = write_csv(
        run_dir / FRINGES_FILE,
        ("theta_deg", "b_total_g", "tau_s", "start_phase_rad", "signal"),
        rows,
        scenario=config.scenario,
        comments=(f"revival_order: {scan.revival_order}",),
    )

    fit = fit_damped_sinusoid(np.column_stack([scan.theta_grid, scan.signal]))
    fit_file = write_csv(
        run_dir / FRINGE_FIT_FILE,
        (
            "offset",
            "amplitude",
            "decay_angle_deg",
            "frequency_per_rad",
            "phase_rad",
            "amplitude_stderr",
            "explained_variance",
            "residual_rms",
            "status",
        ),
        [
            (
                fit.offset,
                fit.amplitude,
                math.degrees(fit.decay_angle),
                fit.frequency,
                fit.phase,
                fit.amplitude_stderr,
                fit.explained_variance,
                fit.residual_rms,
                fit.status,
            )
        ],
        scenario=config.scenario,
    )
    return ScenarioOutput(
        files=[scan_file, fit_file],
        seeds=scan.seeds,
        dt_max=settings.resolve_dt(geometry),
        extra={"revival_order": scan.revival_order, "fit_status": fit.status},
    )


def _run_t2map(config: RunConfig, runner: SweepRunner, run_dir: Path) -> ScenarioOutput:
    geometry = config.geometry.to_geometry()
    settings = config.engine.settings()
    omegas = 2.0 * math.pi * np.asarray(config.t2map.f_rot_grid_hz)
    t2_map = build_t2_map(
        np.radians(config.t2map.theta_grid_deg),
        omegas,
        geometry.b_magnitude,
        config.bath.parameters(),
        config.bath.seeds(),
        t2_phenom=config.engine.t2_phenom_s,
        n_revivals=config.t2map.n_revivals,
        floor=config.t2map.floor,
        delta_theta=geometry.delta_theta,
        settings=settings,
        runner=runner,
    )
    map_file = write_csv(
        run_dir / T2MAP_FILE,
        ("theta_deg", "f_rot_hz", "t2_us", "stretch_n", "residual", "status"),
        t2_map.rows(),
        scenario=config.scenario,
        comments=(f"b_gauss: {geometry.b_magnitude!r}",),
    )
    statuses = [status for row in t2_map.statuses for status in row]
    # the fastest speed sets the finest automatic step of any cell
    fastest = FieldGeometry(b_magnitude=geometry.b_magnitude, omega_rot=float(np.max(omegas, initial=0.0)))
    return ScenarioOutput(
        files=[map_file],
        seeds=t2_map.seeds,
        dt_max=settings.resolve_dt(fastest),
        extra={"cell_statuses": statuses},
    )


def _run_hop(config: RunConfig, runner: SweepRunner, run_dir: Path) -> ScenarioOutput:
    hop = config.hop
    b_magnitude = config.geometry.b_gauss
    lattice = generate_lattice(hop.r_max_nm)
    candidates = sorted(
        (site for site in lattice if np.linalg.norm(site.position) >= hop.r_min_nm),
        key=lambda site: (float(np.linalg.norm(site.position)), site.index),
    )
    if not candidates:
        raise AnalysisError(f"no lattice sites between {hop.r_min_nm} and {hop.r_max_nm} nm")
    picks = sorted(set(np.linspace(0, len(candidates) - 1, hop.n_sites).round().astype(int).tolist()))

    two_pi = 2.0 * math.pi
    rows = []
    for index in picks:
        position = candidates[index].position
        average = magic_angle_hop_average(position, b_magnitude, MAGIC_ANGLE, hop.m_s)
        rows.append(
            (
                index,
                float(position[0]),
                float(position[1]),
                float(position[2]),
                float(np.linalg.norm(position)),
                average.mean_shift / two_pi,
                average.max_abs_shift / two_pi,
                average.isotropic_shift / two_pi,
                average.first_order_suppression,
                average.exact_mean_shift / two_pi,
                average.suppression,
            )
        )
    hop_file = write_csv(
        run_dir / HOP_FILE,
        (
            "site_index",
            "x_nm",
            "y_nm",
            "z_nm",
            "r_nm",
            "mean_shift_hz",
            "max_abs_shift_hz",
            "isotropic_shift_hz",
            "first_order_suppression",
            "exact_mean_shift_hz",
            "suppression",
        ),
        rows,
        scenario=config.scenario,
        comments=(
            f"theta_deg: {math.degrees(MAGIC_ANGLE)!r}",
            f"dipolar_scaling: {dipolar_scaling_factor(MAGIC_ANGLE)!r}",
        ),
    )
    return ScenarioOutput(files=[hop_file], extra={"n_sites": len(rows)})


_HANDLERS: dict[str, Callable[[RunConfig, SweepRunner, Path], ScenarioOutput]] = {
    "freqs": _run_freqs,
    "echo": _run_echo,
    "fringes": _run_fringes,
    "t2map": _run_t2map,
    "hop": _run_hop,
}


def _error_summary(exc: BaseException) -> tuple[int, dict[str, object]]:
    code = getattr(exc, "code", None)
    if isinstance(code, str) and isinstance(exc, (ValueError, RuntimeError)):
        return EXIT_INVALID, {"status": "error", "code": code, "message": str(exc)}
    return EXIT_INTERNAL, {"status": "error", "code": "internal", "message": f"{type(exc).__name__}: {exc}"}


def _emit(summary: dict[str, object], stdout: TextIO) -> None:
    stdout.write(json.dumps(summary) + "\n")
    stdout.flush()


def run_scenario(config: RunConfig, *, stdout: TextIO | None = None) -> int:
    """Run one scenario into its output directory and print a JSON status line."""
    out = sys.stdout if stdout is None else stdout
    run_dir = config.output.directory
    run_dir.mkdir(parents=True, exist_ok=True)
    store = RunStore.for_output_dir(run_dir)
    store.initialize()
    try:
        recovery = store.reconcile_running_runs(pid_is_alive=pid_is_alive)
        if recovery.recovered_count:
            store.add_event(None, "recovery", f"Recovered {recovery.recovered_count} interrupted runs")
        if recovery.orphan_running_count:
            store.add_event(
                None,
                "recovery_orphan",
                f"Detected {recovery.orphan_running_count} RUNNING runs with live PIDs",
            )

        resolved = config.to_dict()
        run = store.create_run(config.scenario, canonical_hash(resolved), run_dir, pid=os.getpid())
        store.add_event(run.id, "run_started", f"scenario={config.scenario} workers={config.engine.workers}")
        started_at = utc_now_iso()
        started = time.monotonic()
        try:
            runner = SweepRunner(config.engine.workers, store=store, run_id=run.id)
            output = _HANDLERS[config.scenario](config, runner, run_dir)
            files = list(output.files)
            if "plot" in config.output.formats:
                layouts = [name for name, (_, owner) in PLOT_LAYOUTS.items() if owner == config.scenario]
                for layout in layouts:
                    # the sidecar does not exist yet, so name the layout
                    files.append(emit_plot_data(run_dir, layout))
            wall_time = time.monotonic() - started
            write_metadata(
                run_dir,
                config=resolved,
                defaults_applied=config.defaults_applied,
                seeds=output.seeds,
                engine=config.engine.engine,
                dt_max=output.dt_max,
                started_at=started_at,
                ended_at=utc_now_iso(),
                wall_time_s=wall_time,
                files=files,
                extra=output.extra,
            )
        except Exception as exc:
            exit_code, summary = _error_summary(exc)
            if exit_code == EXIT_INTERNAL:
                logger.exception("Run %d failed unexpectedly", run.id)
            else:
                logger.error("Run %d failed: %s", run.id, exc)
            store.set_run_status(
                run.id,
                "FAILED",
                exit_code=exit_code,
                error_code=str(summary["code"]),
                error=str(summary["message"]),
            )
            store.add_event(run.id, "run_failed", f"{summary['code']}: {summary['message']}")
            summary["run_id"] = run.id
            _emit(summary, out)
            return exit_code

        store.set_run_status(run.id, "SUCCEEDED", exit_code=EXIT_OK)
        store.add_event(run.id, "run_finished", f"{len(files)} files in {wall_time:.2f}s")
        logger.info("Run %d finished in %.2fs", run.id, wall_time)
        _emit(
            {
                "status": "ok",
                "scenario": config.scenario,
                "run_id": run.id,
                "outputs": [str(path) for path in files],
            },
            out,
        )
        return EXIT_OK
    finally:
        store.close()


def _load_config(path: str | None, overrides: Sequence[str]) -> RunConfig:
    if path is None:
        return config_from_mapping(apply_overrides({}, overrides))
    return parse_config(Path(path), overrides)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rotating-spin-bath",
        description="Spin-echo decoherence of an NV centre in a rotating 13C bath.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument(
        "--log-level",
        default="INFO",
        choices=("DEBUG", "INFO", "WARNING", "ERROR"),
        help="root logger level (default: INFO)",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    def add_config_arguments(sub: argparse.ArgumentParser, *, required: bool) -> None:
        sub.add_argument("config", nargs=None if required else "?", help="JSON run configuration")
        sub.add_argument(
            "--set",
            dest="overrides",
            action="append",
            default=[],
            metavar="BLOCK.KEY=VALUE",
            help="override one configuration value; repeatable",
        )

    for scenario in SCENARIOS:
        add_config_arguments(commands.add_parser(scenario, help=f"run the {scenario} scenario"), required=False)

    validate = commands.add_parser("validate", help="resolve a configuration and print it")
    add_config_arguments(validate, required=True)

    plot = commands.add_parser("plot", help="write gnuplot column files for a finished run")
    plot.add_argument("run_dir", help="output directory of a finished run")
    plot.add_argument("--layout", choices=tuple(PLOT_LAYOUTS), default=None)

    bath = commands.add_parser("bath", help="bath file utilities")
    bath_commands = bath.add_subparsers(dest="bath_command", required=True)
    generate = bath_commands.add_parser("generate", help="write a seeded bath configuration file")
    add_config_arguments(generate, required=False)
    generate.add_argument("--output", default=None, help="bath file path (default: <output dir>/bath_<seed>.json)")
    return parser


def _run_command(args: argparse.Namespace, stdout: TextIO) -> int:
    if args.command in SCENARIOS:
        config = _load_config(args.config, [f"scenario={args.command}", *args.overrides])
        return run_scenario(config, stdout=stdout)

    if args.command == "validate":
        config = _load_config(args.config, args.overrides)
        _emit({"status": "ok", "config": config.to_dict(), "defaults_applied": list(config.defaults_applied)}, stdout)
        return EXIT_OK

    if args.command == "plot":
        target = emit_plot_data(Path(args.run_dir), args.layout)
        _emit({"status": "ok", "outputs": [str(target)]}, stdout)
        return EXIT_OK

    overrides = list(args.overrides)
    if args.config is None:
        overrides.insert(0, "scenario=echo")
    config = _load_config(args.config, overrides)
    bath = generate_bath(
        config.bath.radius_nm,
        config.bath.abundance,
        config.bath.seed,
        min_distance=config.bath.min_distance_nm,
    )
    target = Path(args.output) if args.output else config.output.directory / f"bath_{config.bath.seed}.json"
    save_bath(bath, target)
    logger.info("Wrote bath of %d spins to %s", bath.size, target)
    _emit({"status": "ok", "outputs": [str(target)], "n_spins": bath.size}, stdout)
    return EXIT_OK


def main(argv: Sequence[str] | None = None, *, stdout: TextIO | None = None) -> int:
    out = sys.stdout if stdout is None else stdout
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format=LOG_FORMAT, stream=sys.stderr)
    try:
        return _run_command(args, out)
    except KeyboardInterrupt:
        return EXIT_INTERNAL
    except Exception as exc:
        exit_code, summary = _error_summary(exc)
        if exit_code == EXIT_INTERNAL:
            logger.exception("Unexpected failure")
        _emit(summary, out)
        return exit_code


if __name__ == "__main__":
    sys.exit(main())
