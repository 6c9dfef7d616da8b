from __future__ import annotations

import math

import numpy as np
import pytest

from rotating_spin_bath.bath import BathConfiguration, BathParameters, partition_clusters
from rotating_spin_bath.echo import (
    ConvergenceError,
    EchoError,
    EngineSettings,
    ManifoldAssignmentError,
    bath_echo_signal,
    cluster_echo_coherence,
    cluster_echo_signal,
    default_dt_max,
    echo_trace,
    ensemble_average,
    envelope,
    fringe_revival_order,
    fringe_scan,
    propagate,
    pulse_operator,
    revival_time,
    start_phases,
    tilt_sweep,
)
from rotating_spin_bath.hamiltonian import ClusterHamiltonian, FieldGeometry, build_cluster_hamiltonian
from rotating_spin_bath.runner import SweepRunner
from rotating_spin_bath.spin_core import CONSTANTS


TWO_PI = 2 * math.pi
TILTED = FieldGeometry(b_magnitude=20.0, theta_b=math.radians(20), omega_rot=TWO_PI * 8.33e3)
SMALL_BATH = BathParameters(radius=1.2, abundance=0.05, g_max=2)


def _single(site) -> ClusterHamiltonian:
    return build_cluster_hamiltonian(np.array([site], dtype=float))


def _unitarity_error(u: np.ndarray) -> float:
    return float(np.abs(u.conj().T @ u - np.eye(u.shape[0])).max())


def test_propagate_identity_for_zero_interval() -> None:
    cluster = _single([0.3, 0.2, 0.5])
    u = propagate(cluster, TILTED, 1e-5, 1e-5, 1e-7)
    np.testing.assert_array_equal(u, np.eye(6))


def test_propagate_constant_hamiltonian_matches_closed_form() -> None:
    cluster = _single([0.3, 0.2, 0.5])
    geometry = FieldGeometry(b_magnitude=20.0, theta_b=math.radians(20))
    u = propagate(cluster, geometry, 0.0, 1e-6, 1e-7)
    energies, vectors = np.linalg.eigh(cluster.at(geometry.b_lab()))
    exact = (vectors * np.exp(-1j * energies * 1e-6)) @ vectors.conj().T
    assert np.abs(u - exact).max() <= 1e-10


@pytest.mark.parametrize("engine", ["full", "conditional"])
def test_propagate_is_unitary(engine) -> None:
    cluster = build_cluster_hamiltonian(np.array([[0.3, 0.2, 0.5], [0.45, 0.1, 0.62]]))
    u = propagate(cluster, TILTED, 0.0, 4e-5, default_dt_max(TILTED), engine=engine)
    assert _unitarity_error(u) <= 1e-10


def test_conditional_propagator_converges_under_step_refinement() -> None:
    cluster = _single([0.8, 0.3, 0.9])
    period = TILTED.rotation_period
    coarse = propagate(cluster, TILTED, 0.0, period, 2e-8, engine="conditional")
    fine = propagate(cluster, TILTED, 0.0, period, 2e-9, engine="conditional")
    assert np.abs(coarse - fine).max() <= 1e-6


def test_propagate_reports_non_convergence() -> None:
    cluster = _single([0.3, 0.2, 0.5])
    with pytest.raises(ConvergenceError):
        propagate(cluster, TILTED, 0.0, 2e-5, 1e-6, tolerance=1e-30, max_refinements=1)


def test_propagate_rejects_reversed_interval() -> None:
    with pytest.raises(EchoError):
        propagate(_single([0.3, 0.2, 0.5]), TILTED, 1e-5, 0.0, 1e-7)


def test_pi_pulse_twice_restores_populations() -> None:
    pulse = pulse_operator("pi", 0.0, 6)
    twice = pulse @ pulse
    np.testing.assert_allclose(np.abs(twice) ** 2, np.eye(6), atol=1e-12)


def test_half_pi_pulse_balances_zero_and_minus_one() -> None:
    pulse = pulse_operator("pi/2", 0.7)
    state = pulse @ np.array([0.0, 1.0, 0.0])
    np.testing.assert_allclose(np.abs(state) ** 2, [0.0, 0.5, 0.5], atol=1e-12)


def test_pulse_operator_rejects_unknown_kind() -> None:
    with pytest.raises(EchoError):
        pulse_operator("pi/3")


@pytest.mark.parametrize("engine", ["full", "conditional"])
def test_echo_starts_at_unity(engine) -> None:
    cluster = _single([0.3, 0.2, 0.5])
    value = cluster_echo_signal(cluster, TILTED, 0.0, settings=EngineSettings(engine=engine))
    assert value == pytest.approx(1.0, abs=1e-9)


def test_no_nuclei_along_axis_gives_full_echo() -> None:
    cluster = build_cluster_hamiltonian(np.zeros((0, 3)))
    geometry = FieldGeometry(b_magnitude=20.0)
    for tau in (1e-5, 7.3e-5, 2e-4):
        assert cluster_echo_signal(cluster, geometry, tau) == pytest.approx(1.0, abs=1e-9)


def test_single_spin_revives_at_larmor_multiples() -> None:
    cluster = _single([0.45, -0.3, 0.55])
    geometry = FieldGeometry(b_magnitude=20.0)
    f_larmor = CONSTANTS.gamma_n * geometry.b_magnitude / TWO_PI
    revivals = [cluster_echo_signal(cluster, geometry, 2 * k / f_larmor) for k in (1, 2, 3)]
    np.testing.assert_allclose(revivals, 1.0, atol=1e-3)
    dips = [cluster_echo_signal(cluster, geometry, tau) for tau in np.linspace(5e-6, 9e-5, 12)]
    assert min(dips) < 0.99


def test_engines_agree_for_two_spin_cluster() -> None:
    cluster = build_cluster_hamiltonian(np.array([[0.5, 0.3, 0.4], [0.6, 0.2, 0.65]]))
    geometry = FieldGeometry(b_magnitude=20.0, theta_b=math.radians(20), omega_rot=TWO_PI * 3.33e3)
    for tau in np.linspace(1e-5, 1e-4, 4):
        full = cluster_echo_signal(cluster, geometry, tau, settings=EngineSettings(engine="full"))
        conditional = cluster_echo_signal(cluster, geometry, tau, settings=EngineSettings(engine="conditional"))
        assert abs(full - conditional) <= 1e-3


def test_echo_is_stable_under_step_halving() -> None:
    cluster = _single([1.2, 0.9, 1.1])
    geometry = FieldGeometry(b_magnitude=20.0, theta_b=math.radians(20), omega_rot=TWO_PI * 3.33e3)
    dt = default_dt_max(geometry)
    for tau in (3e-5, 8e-5):
        coarse = cluster_echo_signal(cluster, geometry, tau, settings=EngineSettings(dt_max=dt))
        fine = cluster_echo_signal(cluster, geometry, tau, settings=EngineSettings(dt_max=dt / 2))
        assert abs(coarse - fine) < 1e-4


def test_assignment_fails_near_level_anticrossing() -> None:
    cluster = build_cluster_hamiltonian(np.zeros((0, 3)))
    geometry = FieldGeometry(b_magnitude=1025.0, theta_b=math.radians(45))
    with pytest.raises(ManifoldAssignmentError):
        cluster_echo_signal(cluster, geometry, 1e-5)


def test_pseudo_field_shift_reproduces_rotating_echo() -> None:
    sites = np.array(
        [[0.8, 0.5, 0.7], [1.0, -0.4, 0.6], [-0.7, 0.9, 0.5], [0.2, 1.1, -0.6], [-0.9, -0.6, -0.8]]
    )
    bath = BathConfiguration(seed=1, sites=sites, abundance=1.0, radius=2.0, min_distance=0.0)
    partition = partition_clusters(bath, 2)
    omega = TWO_PI * 5e3
    taus = np.linspace(0.0, 1.5e-4, 7)
    rotating = FieldGeometry(b_magnitude=20.0, omega_rot=omega)
    shifted = FieldGeometry(b_magnitude=20.0 + omega / CONSTANTS.gamma_n)
    settings = EngineSettings(dt_max=1e-6)
    a = bath_echo_signal(bath, partition, rotating, taus, settings=settings).signal
    b = bath_echo_signal(bath, partition, shifted, taus, settings=settings).signal
    np.testing.assert_allclose(a, b, atol=1e-3)


def test_bath_signal_composes_cluster_coherences(random_bath) -> None:
    bath = BathConfiguration(seed=1, sites=random_bath.sites[:6], abundance=1.0, radius=1.3, min_distance=0.0)
    partition = partition_clusters(bath, 2)
    taus = np.array([0.0, 2e-5, 6e-5])
    settings = EngineSettings(dt_max=5e-7)
    result = bath_echo_signal(bath, partition, TILTED, taus, settings=settings)
    electron = build_cluster_hamiltonian(np.zeros((0, 3)))
    bare = np.array([cluster_echo_coherence(electron, TILTED, tau, settings=settings) for tau in taus])
    expected = bare.copy()
    for k in range(len(partition.groups)):
        cluster = build_cluster_hamiltonian(partition.positions(bath, k))
        expected *= np.array([cluster_echo_coherence(cluster, TILTED, tau, settings=settings) for tau in taus]) / bare
    np.testing.assert_allclose(result.signal, expected.real, atol=1e-9)
    assert result.metadata["n_groups"] == len(partition.groups)
    assert result.signal[0] == pytest.approx(1.0, abs=1e-9)


def test_distant_spins_leave_misaligned_echo_unchanged() -> None:
    geometry = FieldGeometry(
        b_magnitude=40.0,
        theta_b=math.radians(5.0),
        omega_rot=TWO_PI * 5.17e3,
        delta_theta=math.radians(0.2),
    )
    directions = np.array([[1.0, 0.0, 0.0], [0.0, 0.6, 0.8], [-0.48, -0.6, 0.64]])
    taus = np.array([1.5e-4])
    signals = []
    for count in range(4):
        sites = 8.5 * directions[:count] if count else np.zeros((0, 3))
        bath = BathConfiguration(seed=0, sites=sites, abundance=1.0, radius=9.0, min_distance=0.0)
        signals.append(bath_echo_signal(bath, partition_clusters(bath, 1), geometry, taus).signal[0])
    assert signals[0] < 0.9
    np.testing.assert_allclose(signals, signals[0], atol=1e-3)


def test_empty_bath_gives_bare_electron_echo() -> None:
    geometry = FieldGeometry(b_magnitude=40.0, theta_b=math.radians(5.0), omega_rot=TWO_PI * 5.17e3, delta_theta=0.0)
    empty = BathConfiguration(seed=0, sites=np.zeros((0, 3)), abundance=0.0, radius=1.0, min_distance=0.0)
    result = bath_echo_signal(empty, partition_clusters(empty, 1), geometry, [5e-5, 1.5e-4])
    np.testing.assert_allclose(result.signal, 1.0, atol=1e-9)


def test_pair_clusters_barely_change_sparse_bath_signal() -> None:
    natural = BathParameters(radius=1.6, g_max=1)
    full_bath, _ = natural.realize(4)
    bath = BathConfiguration(
        seed=4, sites=full_bath.sites[:20], abundance=full_bath.abundance, radius=1.6, min_distance=0.25
    )
    geometry = FieldGeometry(b_magnitude=20.0, theta_b=math.radians(30.0), omega_rot=TWO_PI * 5e3)
    taus = np.linspace(0.0, 1e-4, 6)
    singles = bath_echo_signal(bath, partition_clusters(bath, 1), geometry, taus).signal
    pairs = bath_echo_signal(bath, partition_clusters(bath, 2), geometry, taus).signal
    assert bath.size >= 10
    np.testing.assert_allclose(pairs, singles, atol=0.05)


def test_uneven_tau_grid_matches_per_tau_evaluation(random_bath) -> None:
    bath = BathConfiguration(seed=1, sites=random_bath.sites[:3], abundance=1.0, radius=1.3, min_distance=0.0)
    partition = partition_clusters(bath, 1)
    taus = np.array([1.0e-5, 2.7e-5 * math.pi])
    result = bath_echo_signal(bath, partition, TILTED, taus)
    single = [bath_echo_signal(bath, partition, TILTED, [tau]).signal[0] for tau in taus]
    np.testing.assert_allclose(result.signal, single, atol=1e-12)


def test_signal_shift_by_one_rotation_period(random_bath) -> None:
    bath = BathConfiguration(seed=1, sites=random_bath.sites[:4], abundance=1.0, radius=1.3, min_distance=0.0)
    partition = partition_clusters(bath, 2)
    taus = np.array([2e-5, 5e-5])
    first = bath_echo_signal(bath, partition, TILTED, taus, 1.1e-5).signal
    later = bath_echo_signal(bath, partition, TILTED, taus, 1.1e-5 + TILTED.rotation_period).signal
    np.testing.assert_allclose(first, later, atol=1e-6)


def test_echo_trace_rejects_single_point(random_bath) -> None:
    bath = BathConfiguration(seed=1, sites=random_bath.sites[:2], abundance=1.0, radius=1.3, min_distance=0.0)
    with pytest.raises(EchoError):
        echo_trace(bath, partition_clusters(bath, 1), TILTED, 1e-4, count=1)


def test_revival_time_anchors() -> None:
    assert revival_time(20.0, 0.0) == pytest.approx(93.3e-6, abs=0.1e-6)
    assert revival_time(20.0, 5.17e3) == pytest.approx(75.2e-6, abs=0.1e-6)
    assert revival_time(20.0, 0.0, n=2) == pytest.approx(2 * revival_time(20.0, 0.0))
    with pytest.raises(EchoError):
        revival_time(20.0, 0.0, n=0)


def test_default_step_resolves_fastest_frequency() -> None:
    slow = FieldGeometry(b_magnitude=20.0)
    fast = FieldGeometry(b_magnitude=20.0, omega_rot=TWO_PI * 8.33e3)
    assert default_dt_max(slow) == pytest.approx(1 / (64 * 21.43e3), rel=1e-3)
    assert default_dt_max(fast) < default_dt_max(slow)


def test_envelope_values() -> None:
    np.testing.assert_array_equal(envelope([0.0, 1e-3], None), [1.0, 1.0])
    assert float(envelope(1e-3, 1e-3)) == pytest.approx(math.exp(-1))
    assert float(envelope(2e-3, 1e-3, stretch=2.0)) == pytest.approx(math.exp(-4))
    with pytest.raises(EchoError):
        envelope([1.0], -1.0)


def test_single_seed_ensemble_equals_bath_signal() -> None:
    geometry = FieldGeometry(b_magnitude=20.0, theta_b=math.radians(10), omega_rot=TWO_PI * 3.33e3)
    taus = np.linspace(0.0, 8e-5, 5)
    averaged = ensemble_average([3], SMALL_BATH, geometry, taus)
    bath, partition = SMALL_BATH.realize(3)
    direct = bath_echo_signal(bath, partition, geometry, taus)
    np.testing.assert_array_equal(averaged.signal, direct.signal)
    np.testing.assert_array_equal(averaged.spread, np.zeros(taus.size))

    damped = ensemble_average([3], SMALL_BATH, geometry, taus, t2_phenom=1e-4)
    np.testing.assert_allclose(damped.signal, direct.signal * np.exp(-taus / 1e-4), rtol=1e-12)


def test_ensemble_is_independent_of_worker_count() -> None:
    geometry = FieldGeometry(b_magnitude=20.0, theta_b=math.radians(15), omega_rot=TWO_PI * 5e3)
    taus = np.linspace(0.0, 6e-5, 4)
    serial = ensemble_average([1, 2, 3], SMALL_BATH, geometry, taus, runner=SweepRunner(workers=1))
    parallel = ensemble_average([1, 2, 3], SMALL_BATH, geometry, taus, runner=SweepRunner(workers=2))
    np.testing.assert_array_equal(serial.signal, parallel.signal)
    assert serial.n_configs == 3


def test_ensemble_requires_seeds() -> None:
    with pytest.raises(EchoError):
        ensemble_average([], SMALL_BATH, TILTED, [0.0])


def test_fringe_scan_without_misalignment_shows_no_contrast() -> None:
    base = FieldGeometry(b_magnitude=20.0, omega_rot=TWO_PI * 1e3)
    distant = BathParameters(radius=1.6, abundance=0.02, min_distance=1.2, g_max=1)
    thetas = np.radians([0.0, 5.0, 10.0, 15.0])
    scan = fringe_scan(base, thetas, distant, [5])
    assert scan.revival_order == 1
    np.testing.assert_allclose(scan.b_total, 20.0 / np.cos(thetas))
    assert np.ptp(scan.signal) < 0.05


def test_fringe_scan_with_misalignment_shows_fringes() -> None:
    empty = BathParameters(radius=0.5, abundance=0.0, g_max=1)
    thetas = np.radians([0.0, 5.0, 10.0, 15.0, 20.0])
    tilted_nv = FieldGeometry(b_magnitude=20.0, omega_rot=TWO_PI * 5e3, delta_theta=math.radians(0.2))
    scan = fringe_scan(tilted_nv, thetas, empty, [1])
    assert scan.signal[0] == pytest.approx(1.0, abs=1e-6)
    assert scan.signal[1:].min() < 0.9
    np.testing.assert_allclose(scan.start_phase, 2.0 * 5.0 * thetas)

    stationary = FieldGeometry(b_magnitude=20.0, delta_theta=math.radians(0.2))
    flat = fringe_scan(stationary, thetas, empty, [1])
    np.testing.assert_allclose(flat.signal, 1.0, atol=1e-6)


def test_fringe_revival_order_switches_at_thirty_gauss() -> None:
    assert fringe_revival_order(29.9) == 1
    assert fringe_revival_order(30.0) == 2


def test_start_phases_schedule_and_tilt_ramp() -> None:
    thetas = np.array([0.0, 0.1, 0.2])
    np.testing.assert_allclose(start_phases(thetas, 5e3, phase_start=0.1, phase_slope=0.4), [0.1, 0.3, 0.5])
    np.testing.assert_allclose(start_phases(thetas, 0.0, phase_start=0.1), 0.1)
    faster = start_phases(thetas, 8e3)
    slower = start_phases(thetas, 4e3)
    np.testing.assert_allclose(faster, 2.0 * slower)
    assert faster[-1] > 0
    np.testing.assert_allclose(start_phases(thetas[:2], 5e3, schedule=[1.0, 2.0]), [1.0, 2.0])
    with pytest.raises(EchoError):
        start_phases(thetas, 5e3, schedule=[1.0])


def test_fringe_scan_rejects_right_angle() -> None:
    with pytest.raises(EchoError):
        fringe_scan(TILTED, [math.pi / 2], SMALL_BATH, [1])


def test_tilt_sweep_returns_one_trace_per_angle() -> None:
    base = FieldGeometry(b_magnitude=20.0, omega_rot=TWO_PI * 3.33e3)
    traces = tilt_sweep([1], SMALL_BATH, base, np.radians([0.0, 30.0]), np.linspace(0.0, 4e-5, 3))
    assert len(traces) == 2
    assert traces[1].geometry.theta_b == pytest.approx(math.radians(30.0))
    for trace in traces:
        assert trace.signal[0] == pytest.approx(1.0, abs=1e-9)
