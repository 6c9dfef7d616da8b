from __future__ import annotations

from collections.abc import Iterable, Sequence
from pathlib import Path
import json
import logging
import os

from . import __version__
from .utils import format_float, sha256_file


logger = logging.getLogger(__name__)

META_FILENAME = "run.meta.json"

FREQS_FILE = "frequency_trace.csv"
TILT_SPECTRUM_FILE = "tilt_spectrum.csv"
ECHO_FILE = "echo.csv"
REVIVALS_FILE = "revivals.csv"
FRINGES_FILE = "fringes.csv"
FRINGE_FIT_FILE = "fringe_fit.csv"
T2MAP_FILE = "t2_map.csv"
HOP_FILE = "hop.csv"

# layout -> (source file, scenario that produces it)
PLOT_LAYOUTS = {
    "fig1d": (FREQS_FILE, "freqs"),
    "fig2c": (FRINGES_FILE, "fringes"),
    "fig3": (T2MAP_FILE, "t2map"),
    "fig4": (ECHO_FILE, "echo"),
}


class PlotDataError(ValueError):
    """Raised when result files needed for a plot layout are missing or malformed."""

    code = "results.plot_data"


def _format_cell(value: object) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        return format_float(value)
    if hasattr(value, "item"):
        return _format_cell(value.item())
    text = str(value)
    if "," in text or "\n" in text:
        raise ValueError(f"CSV cell may not contain commas or newlines: {text!r}")
    return text


def _write_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    temporary = path.with_name(path.name + ".tmp")
    try:
        temporary.write_text(text, encoding="utf-8", newline="\n")
        os.replace(temporary, path)
    finally:
        temporary.unlink(missing_ok=True)


def write_csv(
    path: Path,
    columns: Sequence[str],
    rows: Iterable[Sequence[object]],
    *,
    scenario: str,
    comments: Sequence[str] = (),
) -> Path:
    """Comma-separated table with ``#`` header comments; floats use shortest round-trip repr."""
    path = Path(path)
    lines = [f"# scenario: {scenario}", f"# version: {__version__}"]
    lines.extend(f"# {comment}" for comment in comments)
    lines.append(",".join(columns))
    for row in rows:
        if len(row) != len(columns):
            raise ValueError(f"row has {len(row)} cells, expected {len(columns)}")
        lines.append(",".join(_format_cell(cell) for cell in row))
    _write_atomic(path, "\n".join(lines) + "\n")
    logger.debug("Wrote %s", path)
    return path


def read_csv(path: Path) -> tuple[list[str], list[list[str]]]:
    """Column names and raw cell strings; comment lines are skipped."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise PlotDataError(f"Result file does not exist: {path}") from None
    columns: list[str] | None = None
    rows: list[list[str]] = []
    for number, line in enumerate(text.splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        cells = line.split(",")
        if columns is None:
            columns = cells
            continue
        if len(cells) != len(columns):
            raise PlotDataError(f"{path.name} line {number}: expected {len(columns)} cells, got {len(cells)}")
        rows.append(cells)
    if columns is None:
        raise PlotDataError(f"Result file has no column line: {path}")
    return columns, rows


def write_metadata(
    run_dir: Path,
    *,
    config: dict[str, object],
    defaults_applied: Sequence[str],
    seeds: Sequence[int],
    engine: str,
    dt_max: float | None,
    started_at: str,
    ended_at: str,
    wall_time_s: float,
    files: Sequence[Path],
    extra: dict[str, object] | None = None,
) -> Path:
    run_dir = Path(run_dir)
    payload: dict[str, object] = {
        "version": __version__,
        "scenario": config.get("scenario"),
        "config": config,
        "defaults_applied": list(defaults_applied),
        "seeds": [int(seed) for seed in seeds],
        "engine": engine,
        "dt_max_s": dt_max,
        "started_at": started_at,
        "ended_at": ended_at,
        "wall_time_s": wall_time_s,
        "files": [{"name": Path(item).name, "sha256": sha256_file(item)} for item in files],
    }
    if extra:
        payload["extra"] = extra
    path = run_dir / META_FILENAME
    _write_atomic(path, json.dumps(payload, indent=2) + "\n")
    return path


def read_metadata(run_dir: Path) -> dict[str, object]:
    path = Path(run_dir) / META_FILENAME
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise PlotDataError(f"Run directory has no {META_FILENAME}: {run_dir}") from None
    except json.JSONDecodeError as exc:
        raise PlotDataError(f"{META_FILENAME} is not valid JSON (line {exc.lineno})") from exc
    if not isinstance(payload, dict):
        raise PlotDataError(f"{META_FILENAME} must hold a JSON object")
    return payload


def _column(columns: list[str], rows: list[list[str]], name: str, source: str) -> list[float]:
    try:
        index = columns.index(name)
    except ValueError:
        raise PlotDataError(f"{source} has no column {name!r}") from None
    values: list[float] = []
    for row in rows:
        try:
            values.append(float(row[index]))
        except ValueError:
            raise PlotDataError(f"{source} column {name!r} holds a non-number: {row[index]!r}") from None
    return values


def _fig1d(columns: list[str], rows: list[list[str]], source: str) -> list[str]:
    spins = _column(columns, rows, "spin_index", source)
    radii = _column(columns, rows, "r_nm", source)
    times = _column(columns, rows, "time_s", source)
    freqs = _column(columns, rows, "frequency_hz", source)
    lines = ["# time_us frequency_khz; one block per spin"]
    current: int | None = None
    for spin, r, t, f in zip(spins, radii, times, freqs):
        if int(spin) != current:
            if current is not None:
                lines.extend(["", ""])
            current = int(spin)
            lines.append(f"# spin {current} r_nm {format_float(r)}")
        lines.append(f"{format_float(t * 1e6)} {format_float(f * 1e-3)}")
    return lines


def _fig2c(columns: list[str], rows: list[list[str]], source: str) -> list[str]:
    thetas = _column(columns, rows, "theta_deg", source)
    signal = _column(columns, rows, "signal", source)
    taus = _column(columns, rows, "tau_s", source)
    lines = ["# theta_deg signal tau_us"]
    lines.extend(
        f"{format_float(theta)} {format_float(s)} {format_float(tau * 1e6)}"
        for theta, s, tau in zip(thetas, signal, taus)
    )
    return lines


def _fig3(columns: list[str], rows: list[list[str]], source: str) -> list[str]:
    thetas = _column(columns, rows, "theta_deg", source)
    speeds = _column(columns, rows, "f_rot_hz", source)
    t2 = _column(columns, rows, "t2_us", source)
    theta_axis = sorted(set(thetas))
    speed_axis = sorted(set(speeds))
    if len(theta_axis) * len(speed_axis) != len(rows):
        raise PlotDataError(f"{source} is not a complete theta x f_rot grid")
    cells = {(theta, speed): value for theta, speed, value in zip(thetas, speeds, t2)}
    lines = [
        "# nonuniform matrix: first row f_rot_hz, first column theta_deg, cells t2_us",
        " ".join([str(len(speed_axis))] + [format_float(speed) for speed in speed_axis]),
    ]
    for theta in theta_axis:
        values = [format_float(cells[(theta, speed)]) for speed in speed_axis]
        lines.append(" ".join([format_float(theta)] + values))
    return lines


def _fig4(columns: list[str], rows: list[list[str]], source: str) -> list[str]:
    taus = _column(columns, rows, "tau_s", source)
    signal = _column(columns, rows, "signal", source)
    spread = _column(columns, rows, "spread", source)
    lines = ["# tau_us s_ave spread"]
    lines.extend(
        f"{format_float(tau * 1e6)} {format_float(s)} {format_float(d)}"
        for tau, s, d in zip(taus, signal, spread)
    )
    return lines


_RENDERERS = {"fig1d": _fig1d, "fig2c": _fig2c, "fig3": _fig3, "fig4": _fig4}


def emit_plot_data(run_dir: Path, layout: str | None = None) -> Path:
    """Reshape a finished run's CSV into a whitespace-separated gnuplot file ``<layout>.dat``.

    With no layout given, the one matching the run's scenario is used.
    """
    run_dir = Path(run_dir)
    if layout is None:
        scenario = read_metadata(run_dir).get("scenario")
        matches = [name for name, (_, owner) in PLOT_LAYOUTS.items() if owner == scenario]
        if not matches:
            raise PlotDataError(f"No plot layout for scenario {scenario!r}")
        layout = matches[0]
    if layout not in PLOT_LAYOUTS:
        raise PlotDataError(f"Unknown plot layout {layout!r}; expected one of {', '.join(PLOT_LAYOUTS)}")

    source_name, _ = PLOT_LAYOUTS[layout]
    columns, rows = read_csv(run_dir / source_name)
    if not rows:
        raise PlotDataError(f"{source_name} holds no data rows")
    lines = _RENDERERS[layout](columns, rows, source_name)
    target = run_dir / f"{layout}.dat"
    _write_atomic(target, "\n".join(lines) + "\n")
    logger.info("Wrote %s plot data to %s", layout, target)
    return target
