"""Time-ordered propagation and the disjoint-cluster spin-echo simulator.

Every cluster is evolved on a uniform midpoint grid of piecewise-constant Hamiltonians.
When all requested half-echo times are integer multiples of one step, the propagators
for every tau come out of a single running product; otherwise each tau is propagated
on its own.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, field
import logging
import math

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .bath import BathConfiguration, BathParameters, ClusterPartition
from .hamiltonian import ClusterHamiltonian, FieldGeometry, build_cluster_hamiltonian, ms_index
from .runner import SweepRunner
from .spin_core import CONSTANTS, PhysicalConstants


logger = logging.getLogger(__name__)

ENGINES = ("conditional", "full")
ASSIGNMENT_THRESHOLD = 0.7
STEPS_PER_PERIOD = 64
CHUNK_BYTES = 64 * 1024 * 1024
GRID_TOLERANCE = 1e-9
COHERENCE_FLOOR = 1e-12
DEFAULT_PHASE_SLOPE = 2.0


class EchoError(ValueError):
    """Raised for invalid echo or propagation input."""

    code = "echo.invalid_input"


class ConvergenceError(RuntimeError):
    """Raised when step halving does not settle within the refinement limit."""

    code = "echo.convergence"


class ManifoldAssignmentError(RuntimeError):
    """Raised when eigenstates cannot be assigned to an electron manifold."""

    code = "echo.manifold_assignment"


@dataclass(frozen=True, slots=True)
class EngineSettings:
    engine: str = "conditional"
    dt_max: float | None = None
    tolerance: float | None = None
    max_refinements: int = 4

    def __post_init__(self) -> None:
        if self.engine not in ENGINES:
            raise EchoError(f"engine must be one of {ENGINES}, got {self.engine!r}")
        if self.dt_max is not None and not self.dt_max > 0:
            raise EchoError(f"dt_max must be greater than 0 s, got {self.dt_max}")
        if self.max_refinements < 0:
            raise EchoError("max_refinements must be >= 0")

    def resolve_dt(self, geometry: FieldGeometry, constants: PhysicalConstants = CONSTANTS) -> float:
        return default_dt_max(geometry, constants) if self.dt_max is None else self.dt_max


@dataclass(frozen=True, slots=True)
class PulseSequence:
    """pi/2 - tau/2 - pi - tau/2 - pi/2 on the {0, -1} transition, pulses instantaneous."""

    tau: float
    start_time: float = 0.0

    def __post_init__(self) -> None:
        if self.tau < 0:
            raise EchoError(f"tau must be >= 0 s, got {self.tau}")

    @property
    def half(self) -> float:
        return 0.5 * self.tau


@dataclass(frozen=True, slots=True, eq=False)
class EchoResult:
    tau_grid: NDArray[np.float64]
    signal: NDArray[np.float64]
    geometry: FieldGeometry
    seeds: tuple[int, ...]
    engine: str
    dt_max: float
    start_time: float = 0.0
    t2_phenom: float | None = None
    spread: NDArray[np.float64] | None = None
    metadata: dict[str, object] = field(default_factory=dict)

    @property
    def n_configs(self) -> int:
        return len(self.seeds)


def default_dt_max(geometry: FieldGeometry, constants: PhysicalConstants = CONSTANTS) -> float:
    """min(1/(64 f_rot), 1/(64 f_L)) with f_L the rotating-frame bare Larmor frequency."""
    f_larmor = (constants.gamma_n * geometry.b_magnitude + abs(geometry.omega_rot)) / (2.0 * math.pi)
    bound = 1.0 / (STEPS_PER_PERIOD * max(f_larmor, 1.0e3))
    if geometry.omega_rot:
        bound = min(bound, 1.0 / (STEPS_PER_PERIOD * abs(geometry.f_rot)))
    return bound


def revival_time(b_total: float, f_rot: float, n: int = 1, constants: PhysicalConstants = CONSTANTS) -> float:
    if n < 1:
        raise EchoError(f"revival order must be >= 1, got {n}")
    denominator = constants.gamma_n * b_total / (2.0 * math.pi) + f_rot
    if not denominator > 0:
        raise EchoError(f"revival time undefined for B_tot={b_total} G and f_rot={f_rot} Hz")
    return 2.0 * n / denominator


def pulse_operator(kind: str, phase: float = 0.0, dimension: int = 3) -> NDArray[np.complex128]:
    angles = {"pi/2": math.pi / 2.0, "pi": math.pi}
    if kind not in angles:
        raise EchoError(f"pulse kind must be 'pi/2' or 'pi', got {kind!r}")
    if dimension % 3:
        raise EchoError(f"dimension must be a multiple of 3, got {dimension}")
    half = angles[kind] / 2.0
    rotation = np.array(
        [
            [math.cos(half), -1j * math.sin(half) * np.exp(-1j * phase)],
            [-1j * math.sin(half) * np.exp(1j * phase), math.cos(half)],
        ]
    )
    electron = np.eye(3, dtype=np.complex128)
    electron[1:, 1:] = rotation
    return np.kron(electron, np.eye(dimension // 3))


# -- step unitaries ---------------------------------------------------------------------------


def _field_terms(
    template: ClusterHamiltonian,
    geometry: FieldGeometry,
    midpoints: NDArray[np.float64],
) -> NDArray[np.complex128]:
    fields = np.atleast_2d(geometry.field_in_crystal(midpoints))
    pseudo = geometry.omega_rot * geometry.rotation_axis()
    electron = template.constants.gamma_e * fields + pseudo
    nuclear = template.constants.gamma_n * fields + pseudo
    return np.einsum("ta,aij->tij", electron, template.s_ops) + np.einsum("ta,aij->tij", nuclear, template.i_ops)


def _conditional_unitaries(
    energies: NDArray[np.float64],
    vectors: NDArray[np.complex128],
    h: float,
    d_zfs: float,
) -> NDArray[np.complex128]:
    batch, dim = energies.shape
    n_dim = dim // 3
    unitaries = np.zeros((batch, dim, dim), dtype=np.complex128)
    unitaries[:, :n_dim, :n_dim] = np.eye(n_dim)
    for m_s in (0, -1):
        rows = slice(ms_index(m_s) * n_dim, (ms_index(m_s) + 1) * n_dim)
        weights = np.sum(np.abs(vectors[:, rows, :]) ** 2, axis=1)
        columns = np.argsort(-weights, axis=1, kind="stable")[:, :n_dim]
        worst = np.take_along_axis(weights, columns, axis=1).min()
        if worst < ASSIGNMENT_THRESHOLD:
            raise ManifoldAssignmentError(
                f"m_s={m_s} manifold weight {worst:.3f} is below {ASSIGNMENT_THRESHOLD}"
            )
        block = np.take_along_axis(vectors[:, rows, :], columns[:, np.newaxis, :], axis=2)
        left, _, right = np.linalg.svd(block)
        basis = left @ right
        phases = np.exp(-1j * (np.take_along_axis(energies, columns, axis=1) - d_zfs * m_s**2) * h)
        unitaries[:, rows, rows] = (basis * phases[:, np.newaxis, :]) @ basis.conj().swapaxes(-1, -2)
    return unitaries


def _step_unitaries(
    statics: NDArray[np.complex128],
    template: ClusterHamiltonian,
    geometry: FieldGeometry,
    midpoints: NDArray[np.float64],
    h: float,
    engine: str,
) -> NDArray[np.complex128]:
    """Per-step propagators for C clusters of one size; shape (C, K, d, d)."""
    n_clusters, dim, _ = statics.shape
    hamiltonians = statics[:, np.newaxis] + _field_terms(template, geometry, midpoints)[np.newaxis]
    energies, vectors = np.linalg.eigh(hamiltonians.reshape(-1, dim, dim))
    if engine == "full":
        phases = np.exp(-1j * energies * h)
        unitaries = (vectors * phases[:, np.newaxis, :]) @ vectors.conj().swapaxes(-1, -2)
    else:
        unitaries = _conditional_unitaries(energies, vectors, h, template.constants.d_zfs)
    return unitaries.reshape(n_clusters, len(midpoints), dim, dim)


def _accumulate(
    statics: NDArray[np.complex128],
    template: ClusterHamiltonian,
    geometry: FieldGeometry,
    t0: float,
    h: float,
    n_steps: int,
    checkpoints: set[int],
    engine: str,
) -> dict[int, NDArray[np.complex128]]:
    n_clusters, dim, _ = statics.shape
    product = np.broadcast_to(np.eye(dim, dtype=np.complex128), (n_clusters, dim, dim)).copy()
    saved = {0: product.copy()} if 0 in checkpoints else {}
    chunk = max(1, CHUNK_BYTES // (n_clusters * dim * dim * 16 * 6))
    for first in range(0, n_steps, chunk):
        indices = np.arange(first, min(first + chunk, n_steps))
        midpoints = t0 + (indices + 0.5) * h
        steps = _step_unitaries(statics, template, geometry, midpoints, h, engine)
        for local, step in enumerate(indices):
            product = steps[:, local] @ product
            if int(step) + 1 in checkpoints:
                saved[int(step) + 1] = product.copy()
    return saved


def _uniform_plan(half_taus: NDArray[np.float64], dt_max: float) -> tuple[float, NDArray[np.int64]] | None:
    """Step h and per-tau half-step counts when every tau/2 sits on one grid, else None."""
    positive = np.unique(half_taus[half_taus > 0])
    if positive.size == 0:
        return dt_max, np.zeros(half_taus.shape, dtype=np.int64)
    unit = float(np.min(np.diff(np.concatenate([[0.0], positive]))))
    ratios = half_taus / unit
    if np.max(np.abs(ratios - np.round(ratios))) > GRID_TOLERANCE * max(1.0, float(np.max(ratios))):
        return None
    per_unit = int(math.ceil(unit / dt_max - GRID_TOLERANCE))
    h = unit / per_unit
    return h, np.round(ratios).astype(np.int64) * per_unit


def _readout(total: NDArray[np.complex128], n_dim: int) -> NDArray[np.float64]:
    zero = slice(n_dim, 2 * n_dim)
    block = total[:, zero, zero]
    return 2.0 * np.sum(np.abs(block) ** 2, axis=(1, 2)) / n_dim - 1.0


def _coherence_from(
    first_half: NDArray[np.complex128],
    second_half: NDArray[np.complex128],
) -> NDArray[np.complex128]:
    """Electron coherence read out in both quadratures; the real part is the echo signal."""
    dim = first_half.shape[-1]
    n_dim = dim // 3
    core = second_half @ pulse_operator("pi", 0.0, dim) @ first_half @ pulse_operator("pi/2", 0.0, dim)
    in_phase = _readout(pulse_operator("pi/2", 0.0, dim) @ core, n_dim)
    quadrature = _readout(pulse_operator("pi/2", 0.5 * math.pi, dim) @ core, n_dim)
    return in_phase + 1j * quadrature


def _coherences_for_size(
    clusters: Sequence[ClusterHamiltonian],
    geometry: FieldGeometry,
    tau_grid: NDArray[np.float64],
    start_time: float,
    dt_max: float,
    engine: str,
) -> NDArray[np.complex128]:
    statics = np.stack([cluster.static for cluster in clusters])
    template = clusters[0]
    halves = 0.5 * tau_grid
    plan = _uniform_plan(halves, dt_max)
    out = np.empty((len(clusters), tau_grid.size), dtype=np.complex128)
    if plan is not None:
        h, half_steps = plan
        checkpoints = set(int(m) for m in half_steps) | set(int(2 * m) for m in half_steps)
        saved = _accumulate(statics, template, geometry, start_time, h, int(2 * half_steps.max(initial=0)), checkpoints, engine)
        for j, m in enumerate(half_steps):
            first = saved[int(m)]
            second = saved[int(2 * m)] @ first.conj().swapaxes(-1, -2)
            out[:, j] = _coherence_from(first, second)
        return out
    for j, half in enumerate(halves):
        h, half_steps = _uniform_plan(np.array([half]), dt_max)
        m = int(half_steps[0])
        saved = _accumulate(statics, template, geometry, start_time, h, 2 * m, {m, 2 * m}, engine)
        out[:, j] = _coherence_from(saved[m], saved[2 * m] @ saved[m].conj().swapaxes(-1, -2))
    return out


# -- public operations ------------------------------------------------------------------------


def propagate(
    cluster: ClusterHamiltonian,
    geometry: FieldGeometry,
    t0: float,
    t1: float,
    dt_max: float,
    *,
    engine: str = "full",
    tolerance: float | None = None,
    max_refinements: int = 4,
) -> NDArray[np.complex128]:
    if t1 < t0:
        raise EchoError(f"t1 must be >= t0, got t0={t0}, t1={t1}")
    if not dt_max > 0:
        raise EchoError(f"dt_max must be greater than 0 s, got {dt_max}")
    if engine not in ENGINES:
        raise EchoError(f"engine must be one of {ENGINES}, got {engine!r}")
    if t1 == t0:
        return np.eye(cluster.dimension, dtype=np.complex128)

    def run(n_steps: int) -> NDArray[np.complex128]:
        h = (t1 - t0) / n_steps
        saved = _accumulate(cluster.static[np.newaxis], cluster, geometry, t0, h, n_steps, {n_steps}, engine)
        return saved[n_steps][0]

    n_steps = int(math.ceil((t1 - t0) / dt_max - GRID_TOLERANCE))
    current = run(n_steps)
    if tolerance is None:
        return current
    for _ in range(max_refinements):
        n_steps *= 2
        refined = run(n_steps)
        change = float(np.max(np.abs(refined - current)))
        current = refined
        if change <= tolerance:
            return current
    raise ConvergenceError(
        f"propagator did not converge to {tolerance:g} after {max_refinements} refinements"
    )


def cluster_echo_coherence(
    cluster: ClusterHamiltonian,
    geometry: FieldGeometry,
    tau: float,
    start_time: float = 0.0,
    *,
    settings: EngineSettings = EngineSettings(),
) -> complex:
    sequence = PulseSequence(tau=tau, start_time=start_time)
    dt_max = settings.resolve_dt(geometry, cluster.constants)
    coherence = _coherences_for_size(
        [cluster], geometry, np.array([sequence.tau]), sequence.start_time, dt_max, settings.engine
    )
    return complex(coherence[0, 0])


def cluster_echo_signal(
    cluster: ClusterHamiltonian,
    geometry: FieldGeometry,
    tau: float,
    start_time: float = 0.0,
    *,
    settings: EngineSettings = EngineSettings(),
) -> float:
    return cluster_echo_coherence(cluster, geometry, tau, start_time, settings=settings).real


def bath_echo_signal(
    bath: BathConfiguration,
    partition: ClusterPartition,
    geometry: FieldGeometry,
    tau_grid: ArrayLike,
    start_time: float = 0.0,
    *,
    settings: EngineSettings = EngineSettings(),
    include_dipolar: bool = True,
    constants: PhysicalConstants = CONSTANTS,
) -> EchoResult:
    """Bare electron coherence times the nuclear factor of every group, in group-index order.

    Each group's coherence carries the bare electron phase once, so it is divided out of
    every group before the product and applied a single time. An empty bath gives the
    bare electron echo.
    """
    taus = np.asarray(tau_grid, dtype=np.float64).reshape(-1)
    if np.any(taus < 0):
        raise EchoError("tau values must be >= 0 s")
    dt_max = settings.resolve_dt(geometry, constants)
    clusters = [
        build_cluster_hamiltonian(partition.positions(bath, k), include_dipolar=include_dipolar, constants=constants)
        for k in range(len(partition.groups))
    ]
    by_size: dict[int, list[int]] = {}
    for k, cluster in enumerate(clusters):
        by_size.setdefault(cluster.n_spins, []).append(k)

    electron = build_cluster_hamiltonian(np.zeros((0, 3)), constants=constants)
    bare = _coherences_for_size([electron], geometry, taus, start_time, dt_max, settings.engine)[0]
    group_coherences = np.ones((len(clusters), taus.size), dtype=np.complex128)
    for size in sorted(by_size):
        members = by_size[size]
        group_coherences[members] = _coherences_for_size(
            [clusters[k] for k in members], geometry, taus, start_time, dt_max, settings.engine
        )

    resolved = np.abs(bare) > COHERENCE_FLOOR
    safe_bare = np.where(resolved, bare, 1.0)
    product = np.where(resolved, bare, 0.0)
    for k in range(len(clusters)):
        product = product * (group_coherences[k] / safe_bare)
    logger.debug("Bath seed=%d: %d groups, %d tau values", bath.seed, len(clusters), taus.size)
    return EchoResult(
        tau_grid=taus,
        signal=product.real,
        geometry=geometry,
        seeds=(bath.seed,),
        engine=settings.engine,
        dt_max=dt_max,
        start_time=start_time,
        metadata={"n_spins": bath.size, "n_groups": len(clusters), "g_max": partition.g_max},
    )


def echo_trace(
    bath: BathConfiguration,
    partition: ClusterPartition,
    geometry: FieldGeometry,
    tau_stop: float,
    count: int = 201,
    *,
    settings: EngineSettings = EngineSettings(),
    include_dipolar: bool = True,
) -> EchoResult:
    if count < 2:
        raise EchoError("count must be >= 2")
    return bath_echo_signal(
        bath,
        partition,
        geometry,
        np.linspace(0.0, tau_stop, count),
        settings=settings,
        include_dipolar=include_dipolar,
    )


@dataclass(frozen=True, slots=True)
class _SeedTask:
    seed: int
    params: BathParameters
    geometry: FieldGeometry
    tau_grid: tuple[float, ...]
    start_time: float
    settings: EngineSettings


def _run_seed(task: _SeedTask) -> NDArray[np.float64]:
    bath, partition = task.params.realize(task.seed)
    result = bath_echo_signal(
        bath,
        partition,
        task.geometry,
        np.array(task.tau_grid),
        task.start_time,
        settings=task.settings,
        include_dipolar=task.params.include_dipolar,
    )
    return result.signal


def envelope(tau_grid: ArrayLike, t2_phenom: float | None, stretch: float = 1.0) -> NDArray[np.float64]:
    taus = np.asarray(tau_grid, dtype=np.float64)
    if t2_phenom is None or math.isinf(t2_phenom):
        return np.ones_like(taus)
    if not t2_phenom > 0:
        raise EchoError(f"t2_phenom must be greater than 0 s, got {t2_phenom}")
    return np.exp(-((taus / t2_phenom) ** stretch))


def ensemble_average(
    seeds: Sequence[int],
    params: BathParameters,
    geometry: FieldGeometry,
    tau_grid: ArrayLike,
    t2_phenom: float | None = None,
    *,
    start_time: float = 0.0,
    settings: EngineSettings = EngineSettings(),
    stretch: float = 1.0,
    runner: SweepRunner | None = None,
) -> EchoResult:
    seed_list = tuple(int(seed) for seed in seeds)
    if not seed_list:
        raise EchoError("ensemble_average needs at least one seed")
    taus = np.asarray(tau_grid, dtype=np.float64).reshape(-1)
    tasks = [
        _SeedTask(seed, params, geometry, tuple(float(t) for t in taus), start_time, settings)
        for seed in seed_list
    ]
    pool = runner if runner is not None else SweepRunner(workers=1)
    signals = pool.map(_run_seed, tasks, label="ensemble")

    total = np.zeros(taus.size)
    for signal in signals:
        total = total + signal
    mean = total / len(signals)
    deviation = np.zeros(taus.size)
    for signal in signals:
        deviation = deviation + (signal - mean) ** 2
    spread = np.sqrt(deviation / len(signals))

    decay = envelope(taus, t2_phenom, stretch)
    return EchoResult(
        tau_grid=taus,
        signal=mean * decay,
        geometry=geometry,
        seeds=seed_list,
        engine=settings.engine,
        dt_max=settings.resolve_dt(geometry),
        start_time=start_time,
        t2_phenom=t2_phenom,
        spread=spread * decay,
        metadata={"envelope_stretch": stretch, "g_max": params.g_max},
    )


@dataclass(frozen=True, slots=True, eq=False)
class FringeScan:
    theta_grid: NDArray[np.float64]
    signal: NDArray[np.float64]
    tau: NDArray[np.float64]
    b_total: NDArray[np.float64]
    start_phase: NDArray[np.float64]
    revival_order: int
    seeds: tuple[int, ...]


def fringe_revival_order(b_axial: float) -> int:
    return 1 if b_axial < 30.0 else 2


def start_phases(
    theta_grid: ArrayLike,
    f_rot: float = 0.0,
    *,
    schedule: Sequence[float] | None = None,
    phase_start: float = 0.0,
    phase_slope: float = DEFAULT_PHASE_SLOPE,
) -> NDArray[np.float64]:
    """Rotation phase at which each tilt's echo starts.

    Without an explicit schedule the phase grows linearly with the tilt, ``phase_slope``
    radians per radian of tilt for every kHz of rotation.
    """
    thetas = np.asarray(theta_grid, dtype=np.float64).reshape(-1)
    if schedule is not None:
        if len(schedule) != thetas.size:
            raise EchoError(f"phase schedule has {len(schedule)} entries, expected {thetas.size}")
        return np.asarray(schedule, dtype=np.float64)
    return phase_start + phase_slope * (f_rot / 1e3) * thetas


def fringe_scan(
    base: FieldGeometry,
    theta_grid: ArrayLike,
    params: BathParameters,
    seeds: Sequence[int],
    *,
    tau: float | None = None,
    revival_order: int | None = None,
    phase_schedule: Sequence[float] | None = None,
    phase_start: float = 0.0,
    phase_slope: float = DEFAULT_PHASE_SLOPE,
    t2_phenom: float | None = None,
    settings: EngineSettings = EngineSettings(),
    runner: SweepRunner | None = None,
) -> FringeScan:
    """Echo at the tilt-dependent revival time while a transverse field along x grows the tilt.

    The field component along the rotation axis stays at ``base.b_magnitude``; the transverse
    part is B tan(theta), so B_tot = B / cos(theta).
    """
    thetas = np.asarray(theta_grid, dtype=np.float64).reshape(-1)
    if np.any(thetas < 0) or np.any(thetas >= math.pi / 2):
        raise EchoError("fringe tilt angles must lie in [0, 90) degrees")
    seed_list = tuple(int(seed) for seed in seeds)
    if not seed_list:
        raise EchoError("fringe_scan needs at least one seed")
    order = fringe_revival_order(base.b_magnitude) if revival_order is None else revival_order
    phases = start_phases(
        thetas, base.f_rot, schedule=phase_schedule, phase_start=phase_start, phase_slope=phase_slope
    )

    b_totals = base.b_magnitude / np.cos(thetas)
    taus = np.empty(thetas.size)
    tasks: list[_SeedTask] = []
    for k, theta in enumerate(thetas):
        geometry = FieldGeometry(
            b_magnitude=float(b_totals[k]),
            theta_b=float(theta),
            phi_b=0.0,
            omega_rot=base.omega_rot,
            delta_theta=base.delta_theta,
            phi0=base.phi0,
        )
        taus[k] = revival_time(float(b_totals[k]), base.f_rot, order) if tau is None else tau
        start_time = float(phases[k]) / base.omega_rot if base.omega_rot else 0.0
        tasks.extend(
            _SeedTask(seed, params, geometry, (float(taus[k]),), start_time, settings) for seed in seed_list
        )

    pool = runner if runner is not None else SweepRunner(workers=1)
    results = pool.map(_run_seed, tasks, label="fringes")
    signal = np.empty(thetas.size)
    for k in range(thetas.size):
        total = 0.0
        for s in range(len(seed_list)):
            total += float(results[k * len(seed_list) + s][0])
        signal[k] = total / len(seed_list) * float(envelope(taus[k], t2_phenom))
    return FringeScan(
        theta_grid=thetas,
        signal=signal,
        tau=taus,
        b_total=b_totals,
        start_phase=phases,
        revival_order=order,
        seeds=seed_list,
    )


def tilt_sweep(
    seeds: Sequence[int],
    params: BathParameters,
    base: FieldGeometry,
    theta_grid: ArrayLike,
    tau_grid: ArrayLike,
    t2_phenom: float | None = None,
    *,
    settings: EngineSettings = EngineSettings(),
    runner: SweepRunner | None = None,
) -> list[EchoResult]:
    results: list[EchoResult] = []
    for theta in np.asarray(theta_grid, dtype=np.float64).reshape(-1):
        geometry = FieldGeometry(
            b_magnitude=base.b_magnitude,
            theta_b=float(theta),
            phi_b=base.phi_b,
            omega_rot=base.omega_rot,
            delta_theta=base.delta_theta,
            phi0=base.phi0,
        )
        results.append(
            ensemble_average(seeds, params, geometry, tau_grid, t2_phenom, settings=settings, runner=runner)
        )
    return results
