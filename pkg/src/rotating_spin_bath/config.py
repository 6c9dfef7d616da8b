from __future__ import annotations

from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
import json
import logging
import math
import os

import numpy as np
from numpy.typing import NDArray

from .bath import MAX_SEED, BathParameters
from .analysis import DEFAULT_T2_PHENOM
from .echo import DEFAULT_PHASE_SLOPE, ENGINES, EngineSettings
from .hamiltonian import MS_VALUES, FieldGeometry
from .runner import default_workers


logger = logging.getLogger(__name__)

SCENARIOS = ("freqs", "echo", "fringes", "t2map", "hop")
OUTPUT_FORMATS = ("csv", "plot")
OUTPUT_ROOT_ENV = "ROTBATH_OUTPUT_ROOT"
DEFAULT_OUTPUT_ROOT = "runs"
MIN_FRINGE_POINTS = 8

_TRUTHY = {"1", "true", "yes", "y", "on"}
_FALSY = {"0", "false", "no", "n", "off"}


class ConfigError(ValueError):
    """Raised when a run configuration is invalid."""

    code = "config.invalid"


class ConfigParseError(ValueError):
    """Raised when a configuration file cannot be read or is not valid JSON."""

    code = "config.parse"

    def __init__(self, message: str, *, line: int | None = None, column: int | None = None):
        super().__init__(message)
        self.line = line
        self.column = column


class _Block:
    """One config block: tracks which keys were read and which fell back to defaults."""

    def __init__(self, name: str, raw: object, defaults_applied: list[str]):
        if raw is None:
            raw = {}
        if not isinstance(raw, Mapping):
            raise ConfigError(f"'{name}' must be an object")
        self.name = name
        self.raw = raw
        self.defaults_applied = defaults_applied
        self._seen: set[str] = set()

    def qualified(self, key: str) -> str:
        return f"{self.name}.{key}"

    def get(self, key: str, default: object) -> object:
        self._seen.add(key)
        if key not in self.raw:
            self.defaults_applied.append(self.qualified(key))
            return default
        return self.raw[key]

    def reject_unknown(self) -> None:
        unknown = sorted(set(self.raw) - self._seen)
        if unknown:
            raise ConfigError(f"Unknown key in '{self.name}': {unknown[0]}")


def _parse_float(block: _Block, key: str, default: float | None) -> float | None:
    raw = block.get(key, default)
    if raw is None:
        return None
    if isinstance(raw, bool) or not isinstance(raw, (int, float)):
        raise ConfigError(f"Invalid number for {block.qualified(key)}: {raw!r}")
    value = float(raw)
    if not math.isfinite(value):
        raise ConfigError(f"{block.qualified(key)} must be finite")
    return value


def _parse_int(block: _Block, key: str, default: int | None) -> int | None:
    raw = block.get(key, default)
    if raw is None:
        return None
    if isinstance(raw, bool) or not isinstance(raw, int):
        raise ConfigError(f"Invalid integer for {block.qualified(key)}: {raw!r}")
    return raw


def _parse_bool(block: _Block, key: str, default: bool) -> bool:
    raw = block.get(key, default)
    if isinstance(raw, bool):
        return raw
    if isinstance(raw, str):
        normalized = raw.strip().lower()
        if normalized in _TRUTHY:
            return True
        if normalized in _FALSY:
            return False
    raise ConfigError(f"Invalid boolean for {block.qualified(key)}: {raw!r}")


def _parse_str(block: _Block, key: str, default: str, choices: Sequence[str]) -> str:
    raw = block.get(key, default)
    if raw not in choices:
        raise ConfigError(f"{block.qualified(key)} must be one of {', '.join(choices)}, got {raw!r}")
    return str(raw)


def _parse_float_list(block: _Block, key: str, default: Sequence[float] | None) -> tuple[float, ...] | None:
    raw = block.get(key, default)
    if raw is None:
        return None
    if not isinstance(raw, (list, tuple)):
        raise ConfigError(f"{block.qualified(key)} must be a list of numbers")
    values: list[float] = []
    for item in raw:
        if isinstance(item, bool) or not isinstance(item, (int, float)) or not math.isfinite(item):
            raise ConfigError(f"Invalid number in {block.qualified(key)}: {item!r}")
        values.append(float(item))
    return tuple(values)


def _check_range(name: str, value: float, low: float, high: float) -> None:
    if not low <= value <= high:
        raise ConfigError(f"{name} must be between {low:g} and {high:g}, got {value:g}")


def _check_m_s(name: str, value: int) -> None:
    if value not in MS_VALUES:
        raise ConfigError(f"{name} must be one of -1, 0, 1, got {value}")


def _resolve_path(path_value: str, base_dir: Path) -> Path:
    candidate = Path(path_value).expanduser()
    if not candidate.is_absolute():
        candidate = base_dir / candidate
    return candidate.resolve()


@dataclass(frozen=True, slots=True)
class GeometryConfig:
    b_gauss: float = 20.0
    theta_b_deg: float = 0.0
    phi_b_deg: float = 0.0
    f_rot_hz: float = 0.0
    delta_theta_deg: float = 0.0
    phi0_deg: float = 0.0

    def to_geometry(self) -> FieldGeometry:
        return FieldGeometry(
            b_magnitude=self.b_gauss,
            theta_b=math.radians(self.theta_b_deg),
            phi_b=math.radians(self.phi_b_deg),
            omega_rot=2.0 * math.pi * self.f_rot_hz,
            delta_theta=math.radians(self.delta_theta_deg),
            phi0=math.radians(self.phi0_deg),
        )


@dataclass(frozen=True, slots=True)
class BathConfig:
    abundance: float = 0.011
    radius_nm: float = 2.48
    min_distance_nm: float = 0.25
    seed: int = 1
    n_configs: int = 1
    g_max: int = 3
    include_dipolar: bool = True

    def parameters(self) -> BathParameters:
        return BathParameters(
            radius=self.radius_nm,
            abundance=self.abundance,
            min_distance=self.min_distance_nm,
            g_max=self.g_max,
            include_dipolar=self.include_dipolar,
        )

    def seeds(self) -> tuple[int, ...]:
        return tuple(self.seed + index for index in range(self.n_configs))


@dataclass(frozen=True, slots=True)
class EngineConfig:
    engine: str = "conditional"
    dt_max_s: float | None = None
    t2_phenom_s: float | None = None
    envelope_stretch: float = 1.0
    workers: int = 1

    def settings(self) -> EngineSettings:
        return EngineSettings(engine=self.engine, dt_max=self.dt_max_s)


@dataclass(frozen=True, slots=True)
class TauConfig:
    start_s: float = 0.0
    stop_s: float = 200e-6
    count: int = 101

    def grid(self) -> NDArray[np.float64]:
        return np.linspace(self.start_s, self.stop_s, self.count)


@dataclass(frozen=True, slots=True)
class FreqsConfig:
    t_stop_s: float | None = None
    n_times: int = 64
    m_s: int = 0
    n_spins: int = 20

    def times(self, geometry: FieldGeometry) -> NDArray[np.float64]:
        """Sample times; defaults to one rotation period, or 1 ms when stationary."""
        stop = self.t_stop_s
        if stop is None:
            stop = geometry.rotation_period if geometry.omega_rot else 1e-3
        return np.linspace(0.0, stop, self.n_times)


@dataclass(frozen=True, slots=True)
class FringesConfig:
    theta_stop_deg: float = 40.0
    n_theta: int = 41
    revival_order: int | None = None
    phase_start_rad: float = 0.0
    phase_slope: float = DEFAULT_PHASE_SLOPE
    phase_schedule_rad: tuple[float, ...] | None = None

    def theta_grid(self) -> NDArray[np.float64]:
        return np.radians(np.linspace(0.0, self.theta_stop_deg, self.n_theta))


@dataclass(frozen=True, slots=True)
class T2MapConfig:
    theta_grid_deg: tuple[float, ...] = (0.0, 10.0, 20.0, 30.0)
    f_rot_grid_hz: tuple[float, ...] = (0.0, 3330.0, 5170.0)
    n_revivals: int = 12
    floor: float = 0.02


@dataclass(frozen=True, slots=True)
class HopConfig:
    r_min_nm: float = 1.0
    r_max_nm: float = 3.0
    n_sites: int = 10
    m_s: int = -1


@dataclass(frozen=True, slots=True)
class OutputConfig:
    directory: Path
    formats: tuple[str, ...] = ("csv",)


@dataclass(frozen=True, slots=True)
class RunConfig:
    scenario: str
    geometry: GeometryConfig
    bath: BathConfig
    engine: EngineConfig
    tau: TauConfig
    freqs: FreqsConfig
    fringes: FringesConfig
    t2map: T2MapConfig
    hop: HopConfig
    output: OutputConfig
    defaults_applied: tuple[str, ...] = field(default=(), compare=False)

    def to_dict(self) -> dict[str, object]:
        """Fully resolved configuration; parsing it back yields an equal RunConfig."""
        return {
            "scenario": self.scenario,
            "geometry": {
                "b_gauss": self.geometry.b_gauss,
                "theta_b_deg": self.geometry.theta_b_deg,
                "phi_b_deg": self.geometry.phi_b_deg,
                "f_rot_hz": self.geometry.f_rot_hz,
                "delta_theta_deg": self.geometry.delta_theta_deg,
                "phi0_deg": self.geometry.phi0_deg,
            },
            "bath": {
                "abundance": self.bath.abundance,
                "radius_nm": self.bath.radius_nm,
                "min_distance_nm": self.bath.min_distance_nm,
                "seed": self.bath.seed,
                "n_configs": self.bath.n_configs,
                "g_max": self.bath.g_max,
                "include_dipolar": self.bath.include_dipolar,
            },
            "engine": {
                "engine": self.engine.engine,
                "dt_max_s": self.engine.dt_max_s,
                "t2_phenom_s": self.engine.t2_phenom_s,
                "envelope_stretch": self.engine.envelope_stretch,
                "workers": self.engine.workers,
            },
            "tau": {
                "start_s": self.tau.start_s,
                "stop_s": self.tau.stop_s,
                "count": self.tau.count,
            },
            "freqs": {
                "t_stop_s": self.freqs.t_stop_s,
                "n_times": self.freqs.n_times,
                "m_s": self.freqs.m_s,
                "n_spins": self.freqs.n_spins,
            },
            "fringes": {
                "theta_stop_deg": self.fringes.theta_stop_deg,
                "n_theta": self.fringes.n_theta,
                "revival_order": self.fringes.revival_order,
                "phase_start_rad": self.fringes.phase_start_rad,
                "phase_slope": self.fringes.phase_slope,
                "phase_schedule_rad": (
                    None if self.fringes.phase_schedule_rad is None else list(self.fringes.phase_schedule_rad)
                ),
            },
            "t2map": {
                "theta_grid_deg": list(self.t2map.theta_grid_deg),
                "f_rot_grid_hz": list(self.t2map.f_rot_grid_hz),
                "n_revivals": self.t2map.n_revivals,
                "floor": self.t2map.floor,
            },
            "hop": {
                "r_min_nm": self.hop.r_min_nm,
                "r_max_nm": self.hop.r_max_nm,
                "n_sites": self.hop.n_sites,
                "m_s": self.hop.m_s,
            },
            "output": {
                "directory": str(self.output.directory),
                "formats": list(self.output.formats),
            },
        }


def serialize_config(config: RunConfig) -> str:
    return json.dumps(config.to_dict(), indent=2) + "\n"


def apply_overrides(payload: Mapping[str, object], overrides: Sequence[str]) -> dict[str, object]:
    """Apply ``block.key=value`` flags on top of a parsed document.

    Values are read as JSON, falling back to the raw string.
    """
    merged: dict[str, object] = {
        name: dict(value) if isinstance(value, Mapping) else value for name, value in payload.items()
    }
    for item in overrides:
        path, sep, raw_value = item.partition("=")
        if not sep or not path.strip():
            raise ConfigError(f"Override must look like block.key=value, got {item!r}")
        try:
            value: object = json.loads(raw_value)
        except json.JSONDecodeError:
            value = raw_value
        parts = path.strip().split(".")
        if len(parts) == 1:
            merged[parts[0]] = value
            continue
        if len(parts) != 2:
            raise ConfigError(f"Override key must have at most one dot, got {path!r}")
        block_name, key = parts
        block = merged.get(block_name)
        if block is None:
            block = {}
        if not isinstance(block, dict):
            raise ConfigError(f"'{block_name}' must be an object")
        block[key] = value
        merged[block_name] = block
    return merged


def parse_config(
    path: Path,
    overrides: Sequence[str] = (),
    *,
    env: Mapping[str, str] | None = None,
    base_dir: Path | None = None,
) -> RunConfig:
    path = Path(path)
    try:
        content = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigParseError(f"Config file does not exist: {path}") from None
    except OSError as exc:
        raise ConfigParseError(f"Config file is not readable: {path} ({exc})") from exc
    try:
        payload = json.loads(content)
    except json.JSONDecodeError as exc:
        raise ConfigParseError(
            f"Config file is not valid JSON: {path} (line {exc.lineno}, column {exc.colno}: {exc.msg})",
            line=exc.lineno,
            column=exc.colno,
        ) from exc
    if not isinstance(payload, dict):
        raise ConfigParseError("Config must be a JSON object")
    return config_from_mapping(apply_overrides(payload, overrides), env=env, base_dir=base_dir)


def config_from_mapping(
    payload: Mapping[str, object],
    *,
    env: Mapping[str, str] | None = None,
    base_dir: Path | None = None,
) -> RunConfig:
    source_env = os.environ if env is None else env
    root_dir = Path.cwd() if base_dir is None else base_dir
    defaults_applied: list[str] = []

    known_blocks = {"scenario", "geometry", "bath", "engine", "tau", "freqs", "fringes", "t2map", "hop", "output"}
    unknown = sorted(set(payload) - known_blocks)
    if unknown:
        raise ConfigError(f"Unknown config block: {unknown[0]}")

    scenario = payload.get("scenario")
    if scenario is None:
        raise ConfigError("scenario is required")
    if scenario not in SCENARIOS:
        raise ConfigError(f"scenario must be one of {', '.join(SCENARIOS)}, got {scenario!r}")

    geometry = _parse_geometry(_Block("geometry", payload.get("geometry"), defaults_applied))
    bath = _parse_bath(_Block("bath", payload.get("bath"), defaults_applied))
    engine = _parse_engine(_Block("engine", payload.get("engine"), defaults_applied), scenario=str(scenario))
    tau = _parse_tau(_Block("tau", payload.get("tau"), defaults_applied))
    freqs = _parse_freqs(_Block("freqs", payload.get("freqs"), defaults_applied))
    fringes = _parse_fringes(_Block("fringes", payload.get("fringes"), defaults_applied))
    t2map = _parse_t2map(_Block("t2map", payload.get("t2map"), defaults_applied))
    hop = _parse_hop(_Block("hop", payload.get("hop"), defaults_applied))
    output = _parse_output(
        _Block("output", payload.get("output"), defaults_applied),
        scenario=str(scenario),
        env=source_env,
        base_dir=root_dir,
    )

    config = RunConfig(
        scenario=str(scenario),
        geometry=geometry,
        bath=bath,
        engine=engine,
        tau=tau,
        freqs=freqs,
        fringes=fringes,
        t2map=t2map,
        hop=hop,
        output=output,
        defaults_applied=tuple(defaults_applied),
    )
    logger.debug("resolved %s config with %d defaults", config.scenario, len(defaults_applied))
    return config


def _parse_geometry(block: _Block) -> GeometryConfig:
    config = GeometryConfig(
        b_gauss=_parse_float(block, "b_gauss", 20.0),
        theta_b_deg=_parse_float(block, "theta_b_deg", 0.0),
        phi_b_deg=_parse_float(block, "phi_b_deg", 0.0),
        f_rot_hz=_parse_float(block, "f_rot_hz", 0.0),
        delta_theta_deg=_parse_float(block, "delta_theta_deg", 0.0),
        phi0_deg=_parse_float(block, "phi0_deg", 0.0),
    )
    block.reject_unknown()
    _check_range("geometry.b_gauss", config.b_gauss, 0.0, 100.0)
    _check_range("geometry.theta_b_deg", config.theta_b_deg, 0.0, 90.0)
    _check_range("geometry.f_rot_hz", config.f_rot_hz, 0.0, 20000.0)
    _check_range("geometry.delta_theta_deg", config.delta_theta_deg, 0.0, 5.0)
    return config


def _parse_bath(block: _Block) -> BathConfig:
    config = BathConfig(
        abundance=_parse_float(block, "abundance", 0.011),
        radius_nm=_parse_float(block, "radius_nm", 2.48),
        min_distance_nm=_parse_float(block, "min_distance_nm", 0.25),
        seed=_parse_int(block, "seed", 1),
        n_configs=_parse_int(block, "n_configs", 1),
        g_max=_parse_int(block, "g_max", 3),
        include_dipolar=_parse_bool(block, "include_dipolar", True),
    )
    block.reject_unknown()
    _check_range("bath.abundance", config.abundance, 0.0, 1.0)
    if not 0.0 < config.radius_nm <= 6.0:
        raise ConfigError(f"bath.radius_nm must be greater than 0 and at most 6, got {config.radius_nm:g}")
    if config.min_distance_nm < 0:
        raise ConfigError("bath.min_distance_nm must be >= 0")
    if config.n_configs < 1:
        raise ConfigError("bath.n_configs must be >= 1")
    if not 0 <= config.seed <= MAX_SEED - (config.n_configs - 1):
        raise ConfigError(f"bath.seed must be between 0 and 2**64 - n_configs, got {config.seed}")
    _check_range("bath.g_max", config.g_max, 1, 4)
    return config


def _parse_engine(block: _Block, *, scenario: str) -> EngineConfig:
    workers = _parse_int(block, "workers", None)
    config = EngineConfig(
        engine=_parse_str(block, "engine", "conditional", ENGINES),
        dt_max_s=_parse_float(block, "dt_max_s", None),
        t2_phenom_s=_parse_float(block, "t2_phenom_s", DEFAULT_T2_PHENOM if scenario == "t2map" else None),
        envelope_stretch=_parse_float(block, "envelope_stretch", 1.0),
        workers=default_workers() if workers is None else workers,
    )
    block.reject_unknown()
    if config.dt_max_s is not None and config.dt_max_s <= 0:
        raise ConfigError("engine.dt_max_s must be greater than 0")
    if config.t2_phenom_s is not None and config.t2_phenom_s <= 0:
        raise ConfigError("engine.t2_phenom_s must be greater than 0")
    _check_range("engine.envelope_stretch", config.envelope_stretch, 0.5, 4.0)
    if config.workers < 1:
        raise ConfigError("engine.workers must be >= 1")
    return config


def _parse_tau(block: _Block) -> TauConfig:
    config = TauConfig(
        start_s=_parse_float(block, "start_s", 0.0),
        stop_s=_parse_float(block, "stop_s", 200e-6),
        count=_parse_int(block, "count", 101),
    )
    block.reject_unknown()
    if config.start_s < 0:
        raise ConfigError("tau.start_s must be >= 0")
    if config.stop_s <= config.start_s:
        raise ConfigError("tau.stop_s must be greater than tau.start_s")
    if config.count < 2:
        raise ConfigError("tau.count must be >= 2")
    return config


def _parse_freqs(block: _Block) -> FreqsConfig:
    config = FreqsConfig(
        t_stop_s=_parse_float(block, "t_stop_s", None),
        n_times=_parse_int(block, "n_times", 64),
        m_s=_parse_int(block, "m_s", 0),
        n_spins=_parse_int(block, "n_spins", 20),
    )
    block.reject_unknown()
    if config.t_stop_s is not None and config.t_stop_s <= 0:
        raise ConfigError("freqs.t_stop_s must be greater than 0")
    if config.n_times < 2:
        raise ConfigError("freqs.n_times must be >= 2")
    _check_m_s("freqs.m_s", config.m_s)
    if config.n_spins < 1:
        raise ConfigError("freqs.n_spins must be >= 1")
    return config


def _parse_fringes(block: _Block) -> FringesConfig:
    config = FringesConfig(
        theta_stop_deg=_parse_float(block, "theta_stop_deg", 40.0),
        n_theta=_parse_int(block, "n_theta", 41),
        revival_order=_parse_int(block, "revival_order", None),
        phase_start_rad=_parse_float(block, "phase_start_rad", 0.0),
        phase_slope=_parse_float(block, "phase_slope", DEFAULT_PHASE_SLOPE),
        phase_schedule_rad=_parse_float_list(block, "phase_schedule_rad", None),
    )
    block.reject_unknown()
    if not 0.0 < config.theta_stop_deg < 90.0:
        raise ConfigError(f"fringes.theta_stop_deg must be between 0 and 90 exclusive, got {config.theta_stop_deg:g}")
    if config.n_theta < MIN_FRINGE_POINTS:
        raise ConfigError(f"fringes.n_theta must be >= {MIN_FRINGE_POINTS}")
    if config.revival_order is not None and config.revival_order < 1:
        raise ConfigError("fringes.revival_order must be >= 1")
    if config.phase_schedule_rad is not None and len(config.phase_schedule_rad) != config.n_theta:
        raise ConfigError("fringes.phase_schedule_rad must have n_theta entries")
    return config


def _parse_t2map(block: _Block) -> T2MapConfig:
    config = T2MapConfig(
        theta_grid_deg=_parse_float_list(block, "theta_grid_deg", (0.0, 10.0, 20.0, 30.0)),
        f_rot_grid_hz=_parse_float_list(block, "f_rot_grid_hz", (0.0, 3330.0, 5170.0)),
        n_revivals=_parse_int(block, "n_revivals", 12),
        floor=_parse_float(block, "floor", 0.02),
    )
    block.reject_unknown()
    if not config.theta_grid_deg:
        raise ConfigError("t2map.theta_grid_deg must not be empty")
    if not config.f_rot_grid_hz:
        raise ConfigError("t2map.f_rot_grid_hz must not be empty")
    for theta in config.theta_grid_deg:
        _check_range("t2map.theta_grid_deg", theta, 0.0, 90.0)
    for f_rot in config.f_rot_grid_hz:
        _check_range("t2map.f_rot_grid_hz", f_rot, 0.0, 20000.0)
    _check_range("t2map.n_revivals", config.n_revivals, 4, 100)
    _check_range("t2map.floor", config.floor, 0.0, 1.0)
    return config


def _parse_hop(block: _Block) -> HopConfig:
    config = HopConfig(
        r_min_nm=_parse_float(block, "r_min_nm", 1.0),
        r_max_nm=_parse_float(block, "r_max_nm", 3.0),
        n_sites=_parse_int(block, "n_sites", 10),
        m_s=_parse_int(block, "m_s", -1),
    )
    block.reject_unknown()
    if config.r_min_nm <= 0:
        raise ConfigError("hop.r_min_nm must be greater than 0")
    if config.r_max_nm < config.r_min_nm:
        raise ConfigError("hop.r_max_nm must be >= hop.r_min_nm")
    if config.n_sites < 1:
        raise ConfigError("hop.n_sites must be >= 1")
    _check_m_s("hop.m_s", config.m_s)
    return config


def _parse_output(block: _Block, *, scenario: str, env: Mapping[str, str], base_dir: Path) -> OutputConfig:
    root = env.get(OUTPUT_ROOT_ENV, "").strip() or DEFAULT_OUTPUT_ROOT
    raw_directory = block.get("directory", None)
    if raw_directory is None:
        directory = _resolve_path(root, base_dir) / scenario
    elif isinstance(raw_directory, str) and raw_directory.strip():
        directory = _resolve_path(raw_directory, base_dir)
    else:
        raise ConfigError("output.directory must be a non-empty string")
    raw_formats = block.get("formats", ["csv"])
    if isinstance(raw_formats, str):
        raw_formats = [raw_formats]
    if not isinstance(raw_formats, (list, tuple)) or not raw_formats:
        raise ConfigError("output.formats must be a non-empty list")
    formats: list[str] = []
    for item in raw_formats:
        if item not in OUTPUT_FORMATS:
            raise ConfigError(f"output.formats entries must be one of {', '.join(OUTPUT_FORMATS)}, got {item!r}")
        if item not in formats:
            formats.append(str(item))
    block.reject_unknown()
    return OutputConfig(directory=directory, formats=tuple(formats))
