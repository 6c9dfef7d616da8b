"""Post-processing of echo signals: decay and fringe fits, coherence maps, revivals, hop averaging."""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass
import logging
import math

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.optimize import least_squares
from scipy.signal import find_peaks

from .bath import BathParameters
from .echo import EchoResult, EngineSettings, ensemble_average, revival_time
from .hamiltonian import FieldGeometry, effective_field
from .runner import SweepRunner
from .spin_core import CONSTANTS, PhysicalConstants, spherical_vector


logger = logging.getLogger(__name__)

MAGIC_ANGLE = math.acos(1.0 / math.sqrt(3.0))
HOP_AZIMUTHS = (0.0, 2.0 * math.pi / 3.0, 4.0 * math.pi / 3.0)
ISOTROPIC_SAMPLES = 360
STRETCH_BOUNDS = (0.5, 4.0)
MAX_FIT_EVALUATIONS = 200
MIN_DECAY_SAMPLES = 4
MIN_FRINGE_SAMPLES = 8
MIN_EXPLAINED_VARIANCE = 0.5
DEFAULT_REVIVAL_COUNT = 12
DEFAULT_REVIVAL_FLOOR = 0.02
DEFAULT_PROMINENCE = 0.05
DEFAULT_T2_PHENOM = 150e-6

FIT_OK = "ok"
FIT_MAX_ITERATIONS = "max_iterations"
FIT_FAILED = "failed"
FIT_POOR = "poor_fit"
FIT_DEGENERATE = "degenerate"
FIT_INSUFFICIENT = "insufficient_samples"


class AnalysisError(ValueError):
    """Raised for malformed sample sets or analysis parameters."""

    code = "analysis.invalid_input"


class DegenerateFitError(ValueError):
    """Raised when the samples carry no decay to fit."""

    code = "analysis.degenerate_fit"


def _as_samples(samples: ArrayLike) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    array = np.asarray(samples, dtype=np.float64)
    if array.ndim != 2 or array.shape[1] != 2:
        raise AnalysisError(f"samples must be (x, y) pairs, got shape {array.shape}")
    if not np.all(np.isfinite(array)):
        raise AnalysisError("samples must be finite")
    order = np.argsort(array[:, 0], kind="stable")
    return array[order, 0], array[order, 1]


def _fit_status(result) -> str:
    if result.status == 0:
        return FIT_MAX_ITERATIONS
    if result.status < 0:
        return FIT_FAILED
    return FIT_OK


# -- stretched exponential --------------------------------------------------------------------


@dataclass(frozen=True, slots=True)
class StretchedExpFit:
    t2_eff: float
    stretch_n: float
    amplitude: float
    residual_rms: float
    status: str = FIT_OK
    n_evaluations: int = 0

    @property
    def converged(self) -> bool:
        return self.status == FIT_OK


def _one_over_e_crossing(tau: NDArray[np.float64], signal: NDArray[np.float64], amplitude: float) -> float:
    target = amplitude / math.e
    below = np.nonzero(signal <= target)[0]
    if below.size == 0 or below[0] == 0:
        return float(tau[-1])
    k = int(below[0])
    s0, s1 = signal[k - 1], signal[k]
    fraction = (s0 - target) / (s0 - s1)
    return float(tau[k - 1] + fraction * (tau[k] - tau[k - 1]))


def fit_stretched_exponential(samples: ArrayLike) -> StretchedExpFit:
    """Fit S = a exp(-(tau / t2)^n) by bounded least squares.

    The start point is fixed (a from the first sample, t2 from the 1/e crossing of the
    linearly interpolated data, n = 1) and the fit runs on tau normalized by that t2,
    so scaling every tau by c scales the fitted t2 by c.
    """
    tau, signal = _as_samples(samples)
    if tau.size < MIN_DECAY_SAMPLES:
        raise AnalysisError(f"need at least {MIN_DECAY_SAMPLES} samples, got {tau.size}")
    if np.any(tau <= 0):
        raise AnalysisError("tau values must be positive")
    if np.any(np.diff(tau) == 0):
        raise AnalysisError("tau values must be distinct")
    if np.ptp(signal) <= 1e-12 * max(1.0, float(np.max(np.abs(signal)))):
        raise DegenerateFitError("signal is constant; no decay to fit")

    amplitude0 = float(signal[0]) if signal[0] > 0 else float(np.max(np.abs(signal)))
    t2_scale = _one_over_e_crossing(tau, signal, amplitude0)
    x = tau / t2_scale

    def residuals(p: NDArray[np.float64]) -> NDArray[np.float64]:
        return p[0] * np.exp(-((x / p[1]) ** p[2])) - signal

    result = least_squares(
        residuals,
        x0=np.array([amplitude0, 1.0, 1.0]),
        bounds=([0.0, 1e-9, STRETCH_BOUNDS[0]], [np.inf, np.inf, STRETCH_BOUNDS[1]]),
        method="trf",
        max_nfev=MAX_FIT_EVALUATIONS,
    )
    status = _fit_status(result)
    if status != FIT_OK:
        logger.warning("Stretched-exponential fit ended with status %s: %s", status, result.message)
    amplitude, t2_norm, stretch = (float(v) for v in result.x)
    return StretchedExpFit(
        t2_eff=t2_norm * t2_scale,
        stretch_n=stretch,
        amplitude=amplitude,
        residual_rms=float(np.sqrt(np.mean(result.fun**2))),
        status=status,
        n_evaluations=int(result.nfev),
    )


# -- damped sinusoid --------------------------------------------------------------------------


@dataclass(frozen=True, slots=True)
class DampedSinusoidFit:
    """S(x) = offset + amplitude exp(-x / decay_angle) cos(frequency x + phase); x in radians."""

    offset: float
    amplitude: float
    decay_angle: float
    frequency: float
    phase: float
    amplitude_stderr: float
    explained_variance: float
    residual_rms: float
    status: str = FIT_OK

    def evaluate(self, x: ArrayLike) -> NDArray[np.float64]:
        angles = np.asarray(x, dtype=np.float64)
        decay = np.zeros_like(angles) if math.isinf(self.decay_angle) else angles / self.decay_angle
        return self.offset + self.amplitude * np.exp(-decay) * np.cos(self.frequency * angles + self.phase)


def fit_damped_sinusoid(samples: ArrayLike) -> DampedSinusoidFit:
    x, y = _as_samples(samples)
    if x.size < MIN_FRINGE_SAMPLES:
        raise AnalysisError(f"need at least {MIN_FRINGE_SAMPLES} samples, got {x.size}")
    span = float(x[-1] - x[0])
    if not span > 0:
        raise AnalysisError("sample abscissae must span a non-zero range")
    u = (x - x[0]) / span

    offset0 = float(np.mean(y))
    spectrum = np.fft.rfft(y - offset0)
    cycles = np.fft.rfftfreq(u.size, d=1.0 / (u.size - 1))
    peak = 1 + int(np.argmax(np.abs(spectrum[1:]))) if spectrum.size > 1 else 0
    k0 = 2.0 * math.pi * float(cycles[peak])
    amplitude0 = 2.0 * float(np.abs(spectrum[peak])) / u.size
    phase0 = float(np.angle(spectrum[peak]))

    def residuals(p: NDArray[np.float64]) -> NDArray[np.float64]:
        return p[0] + p[1] * np.exp(-p[2] * u) * np.cos(p[3] * u + p[4]) - y

    result = least_squares(
        residuals,
        x0=np.array([offset0, max(amplitude0, 1e-12), 0.1, k0, phase0]),
        bounds=([-np.inf, 0.0, 0.0, 0.0, -np.inf], [np.inf, np.inf, np.inf, np.inf, np.inf]),
        method="trf",
        max_nfev=MAX_FIT_EVALUATIONS * 5,
    )
    offset, amplitude_u, rate_u, k_u, phase_u = (float(v) for v in result.x)

    dof = max(1, u.size - 5)
    variance = 2.0 * float(result.cost) / dof
    jacobian = np.asarray(result.jac)
    covariance = np.linalg.pinv(jacobian.T @ jacobian) * variance
    amplitude_stderr = float(math.sqrt(max(covariance[1, 1], 0.0)))

    total = float(np.sum((y - np.mean(y)) ** 2))
    explained = 1.0 - float(np.sum(result.fun**2)) / total if total > 0 else 0.0
    status = _fit_status(result)
    if status == FIT_OK and explained < MIN_EXPLAINED_VARIANCE:
        status = FIT_POOR
    if status != FIT_OK:
        logger.warning("Damped-sinusoid fit ended with status %s (explained variance %.3f)", status, explained)

    frequency = k_u / span
    rate = rate_u / span
    return DampedSinusoidFit(
        offset=offset,
        amplitude=amplitude_u * math.exp(rate * x[0]),
        decay_angle=math.inf if rate == 0 else 1.0 / rate,
        frequency=frequency,
        phase=phase_u - frequency * x[0],
        amplitude_stderr=amplitude_stderr * math.exp(rate * x[0]),
        explained_variance=explained,
        residual_rms=float(np.sqrt(np.mean(result.fun**2))),
        status=status,
    )


# -- coherence maps ---------------------------------------------------------------------------


def sample_revivals(
    result: EchoResult,
    floor: float = DEFAULT_REVIVAL_FLOOR,
    min_samples: int = MIN_DECAY_SAMPLES,
) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    """Leading revival samples, cut after the first one below ``floor`` (never fewer than ``min_samples``)."""
    tau, signal = result.tau_grid, result.signal
    below = np.nonzero(signal < floor)[0]
    stop = int(below[0]) + 1 if below.size else tau.size
    stop = max(stop, min(min_samples, tau.size))
    return tau[:stop].copy(), signal[:stop].copy()


@dataclass(frozen=True, slots=True)
class T2Cell:
    theta_b: float
    omega_rot: float
    t2_eff: float
    stretch_n: float
    residual_rms: float
    status: str
    n_samples: int


@dataclass(frozen=True, slots=True, eq=False)
class T2Map:
    theta_grid: NDArray[np.float64]
    omega_grid: NDArray[np.float64]
    b_magnitude: float
    seeds: tuple[int, ...]
    cells: tuple[tuple[T2Cell, ...], ...]

    @property
    def t2_values(self) -> NDArray[np.float64]:
        return np.array([[cell.t2_eff for cell in row] for row in self.cells])

    @property
    def statuses(self) -> tuple[tuple[str, ...], ...]:
        return tuple(tuple(cell.status for cell in row) for row in self.cells)

    def rows(self) -> list[tuple[float, float, float, float, float, str]]:
        """(theta_deg, f_rot_hz, t2_us, stretch_n, residual, status), theta-major."""
        out = []
        for row in self.cells:
            for cell in row:
                out.append(
                    (
                        math.degrees(cell.theta_b),
                        cell.omega_rot / (2.0 * math.pi),
                        cell.t2_eff * 1e6,
                        cell.stretch_n,
                        cell.residual_rms,
                        cell.status,
                    )
                )
        return out


def _fit_cell(theta: float, omega: float, tau: NDArray[np.float64], signal: NDArray[np.float64]) -> T2Cell:
    nan = math.nan
    try:
        fit = fit_stretched_exponential(np.column_stack([tau, signal]))
    except DegenerateFitError:
        return T2Cell(theta, omega, nan, nan, nan, FIT_DEGENERATE, tau.size)
    except AnalysisError:
        return T2Cell(theta, omega, nan, nan, nan, FIT_INSUFFICIENT, tau.size)
    return T2Cell(theta, omega, fit.t2_eff, fit.stretch_n, fit.residual_rms, fit.status, tau.size)


def build_t2_map(
    theta_grid: ArrayLike,
    omega_grid: ArrayLike,
    b_magnitude: float,
    params: BathParameters,
    seeds: Sequence[int],
    *,
    t2_phenom: float | None = DEFAULT_T2_PHENOM,
    n_revivals: int = DEFAULT_REVIVAL_COUNT,
    floor: float = DEFAULT_REVIVAL_FLOOR,
    delta_theta: float = 0.0,
    settings: EngineSettings = EngineSettings(),
    runner: SweepRunner | None = None,
) -> T2Map:
    thetas = np.asarray(theta_grid, dtype=np.float64).reshape(-1)
    omegas = np.asarray(omega_grid, dtype=np.float64).reshape(-1)
    if thetas.size == 0 or omegas.size == 0:
        raise AnalysisError("theta and omega grids must be non-empty")
    if n_revivals < MIN_DECAY_SAMPLES:
        raise AnalysisError(f"n_revivals must be >= {MIN_DECAY_SAMPLES}, got {n_revivals}")
    seed_list = tuple(int(seed) for seed in seeds)

    rows: list[tuple[T2Cell, ...]] = []
    for theta in thetas:
        row: list[T2Cell] = []
        for omega in omegas:
            geometry = FieldGeometry(
                b_magnitude=b_magnitude,
                theta_b=float(theta),
                omega_rot=float(omega),
                delta_theta=delta_theta,
            )
            tau_r = revival_time(b_magnitude, geometry.f_rot)
            grid = tau_r * np.arange(1, n_revivals + 1)
            result = ensemble_average(
                seed_list, params, geometry, grid, t2_phenom, settings=settings, runner=runner
            )
            tau, signal = sample_revivals(result, floor)
            cell = _fit_cell(float(theta), float(omega), tau, signal)
            logger.info(
                "T2 cell theta=%.1f deg f_rot=%.0f Hz: t2=%.1f us (%s)",
                math.degrees(theta),
                geometry.f_rot,
                cell.t2_eff * 1e6,
                cell.status,
            )
            row.append(cell)
        rows.append(tuple(row))
    return T2Map(
        theta_grid=thetas,
        omega_grid=omegas,
        b_magnitude=b_magnitude,
        seeds=seed_list,
        cells=tuple(rows),
    )


# -- revivals ---------------------------------------------------------------------------------


@dataclass(frozen=True, slots=True)
class Revival:
    time: float
    amplitude: float
    multiple: int
    offset: float


def upper_envelope(tau: ArrayLike, signal: ArrayLike, max_gap: float) -> NDArray[np.float64]:
    """Signal with the dips between local maxima less than ``max_gap`` apart bridged by straight lines.

    The stretch before the first and after the last maximum is held at that maximum when it
    lies within ``max_gap`` of the grid edge.
    """
    taus = np.asarray(tau, dtype=np.float64)
    values = np.asarray(signal, dtype=np.float64)
    upper = values.copy()
    maxima, _ = find_peaks(values)
    if maxima.size == 0:
        return upper
    for left, right in zip(maxima[:-1], maxima[1:]):
        if taus[right] - taus[left] >= max_gap:
            continue
        span = slice(left, right + 1)
        chord = np.interp(taus[span], taus[[left, right]], values[[left, right]])
        upper[span] = np.maximum(values[span], chord)
    first, last = maxima[0], maxima[-1]
    if taus[first] - taus[0] < max_gap:
        upper[: first + 1] = np.maximum(values[: first + 1], values[first])
    if taus[-1] - taus[last] < max_gap:
        upper[last:] = np.maximum(values[last:], values[last])
    return upper


def detect_revivals(
    result: EchoResult | tuple[ArrayLike, ArrayLike],
    f_rot: float,
    *,
    threshold: float = DEFAULT_PROMINENCE,
) -> list[Revival]:
    if isinstance(result, EchoResult):
        tau, signal = result.tau_grid, result.signal
    else:
        tau = np.asarray(result[0], dtype=np.float64)
        signal = np.asarray(result[1], dtype=np.float64)
    if not f_rot > 0:
        raise AnalysisError(f"f_rot must be greater than 0 Hz, got {f_rot}")
    if tau.size != signal.size:
        raise AnalysisError("tau grid and signal differ in length")
    if float(tau[-1] - tau[0]) < 3.0 / f_rot:
        raise AnalysisError("tau grid must cover at least three rotation periods")

    scale = float(np.max(np.abs(signal)))
    if scale == 0.0:
        return []
    spacing = 2.0 / f_rot
    upper = upper_envelope(tau, signal, 0.5 * spacing)
    peaks, _ = find_peaks(upper, prominence=threshold * scale)
    revivals = []
    for index in peaks:
        t = float(tau[index])
        multiple = int(round(t / spacing))
        revivals.append(Revival(time=t, amplitude=float(signal[index]), multiple=multiple, offset=t - multiple * spacing))
    logger.debug("Detected %d revivals above prominence %.3f", len(revivals), threshold)
    return revivals


# -- magic-angle arithmetic -------------------------------------------------------------------


def dipolar_scaling_factor(theta_b: float) -> float:
    c = math.cos(theta_b)
    return 0.5 * (3.0 * c * c - 1.0)


@dataclass(frozen=True, slots=True, eq=False)
class HopAverage:
    """Precession shifts (rad/s) of one site at equally spaced field azimuths.

    ``shifts`` are first order in the hyperfine coupling and ``exact_shifts`` come from the
    full effective field. The ``*_isotropic_shift`` values are the azimuthal means over a full
    turn; what the hop average leaves of the azimuth-dependent part is ``suppression``.
    """

    theta: float
    m_s: int
    azimuths: tuple[float, ...]
    shifts: NDArray[np.float64]
    exact_shifts: NDArray[np.float64]
    isotropic_shift: float
    exact_isotropic_shift: float

    @property
    def mean_shift(self) -> float:
        return float(np.mean(self.shifts))

    @property
    def max_abs_shift(self) -> float:
        return float(np.max(np.abs(self.shifts)))

    @property
    def exact_mean_shift(self) -> float:
        return float(np.mean(self.exact_shifts))

    @property
    def anisotropic_amplitude(self) -> float:
        return float(np.max(np.abs(self.exact_shifts - self.exact_isotropic_shift)))

    @property
    def first_order_suppression(self) -> float:
        peak = float(np.max(np.abs(self.shifts - self.isotropic_shift)))
        return 0.0 if peak == 0.0 else abs(self.mean_shift - self.isotropic_shift) / peak

    @property
    def suppression(self) -> float:
        peak = self.anisotropic_amplitude
        return 0.0 if peak == 0.0 else abs(self.exact_mean_shift - self.exact_isotropic_shift) / peak


def _hop_shifts(
    position: NDArray[np.float64],
    b_magnitude: float,
    theta: float,
    azimuths: NDArray[np.float64],
    m_s: int,
    constants: PhysicalConstants,
) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    bare = constants.gamma_n * b_magnitude
    first = np.empty(azimuths.size)
    exact = np.empty(azimuths.size)
    for k, phi in enumerate(azimuths):
        b = spherical_vector(b_magnitude, theta, float(phi))
        unit = b / b_magnitude if b_magnitude else b
        field = effective_field(b, position, m_s, constants=constants)
        first[k] = constants.gamma_n * float(unit @ (field.vector - b))
        exact[k] = field.precession_frequency(constants) - bare
    return first, exact


def magic_angle_hop_average(
    site: ArrayLike,
    b_magnitude: float,
    theta: float = MAGIC_ANGLE,
    m_s: int = -1,
    *,
    azimuths: Sequence[float] = HOP_AZIMUTHS,
    constants: PhysicalConstants = CONSTANTS,
) -> HopAverage:
    position = np.asarray(site, dtype=np.float64)
    hops = np.asarray(azimuths, dtype=np.float64)
    shifts, exact = _hop_shifts(position, b_magnitude, theta, hops, m_s, constants)
    turn = np.linspace(0.0, 2.0 * math.pi, ISOTROPIC_SAMPLES, endpoint=False)
    turn_shifts, turn_exact = _hop_shifts(position, b_magnitude, theta, turn, m_s, constants)
    return HopAverage(
        theta=float(theta),
        m_s=int(m_s),
        azimuths=tuple(float(phi) for phi in hops),
        shifts=shifts,
        exact_shifts=exact,
        isotropic_shift=float(np.mean(turn_shifts)),
        exact_isotropic_shift=float(np.mean(turn_exact)),
    )
