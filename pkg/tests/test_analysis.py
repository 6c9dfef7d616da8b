from __future__ import annotations

import math

import numpy as np
import pytest
from scipy.signal import find_peaks

from rotating_spin_bath.analysis import (
    FIT_DEGENERATE,
    FIT_OK,
    MAGIC_ANGLE,
    AnalysisError,
    DegenerateFitError,
    build_t2_map,
    detect_revivals,
    dipolar_scaling_factor,
    fit_damped_sinusoid,
    fit_stretched_exponential,
    magic_angle_hop_average,
    sample_revivals,
    upper_envelope,
)
from rotating_spin_bath.bath import BathParameters
from rotating_spin_bath.echo import EchoResult, revival_time
from rotating_spin_bath.hamiltonian import FieldGeometry


TWO_PI = 2 * math.pi


def _decay(tau: np.ndarray, t2: float, n: float, amplitude: float = 1.0) -> np.ndarray:
    return amplitude * np.exp(-((tau / t2) ** n))


def _result(tau: np.ndarray, signal: np.ndarray) -> EchoResult:
    return EchoResult(
        tau_grid=tau,
        signal=signal,
        geometry=FieldGeometry(b_magnitude=20.0),
        seeds=(1,),
        engine="conditional",
        dt_max=1e-7,
    )


def test_stretched_exponential_recovers_exact_parameters() -> None:
    tau = np.linspace(20e-6, 200e-6, 10)
    fit = fit_stretched_exponential(np.column_stack([tau, _decay(tau, 100e-6, 2.0)]))
    assert fit.status == FIT_OK
    assert fit.converged
    assert fit.t2_eff == pytest.approx(100e-6, rel=1e-2)
    assert fit.stretch_n == pytest.approx(2.0, rel=1e-2)
    assert fit.residual_rms < 1e-6


def test_stretched_exponential_tolerates_noise() -> None:
    rng = np.random.Generator(np.random.Philox(key=7))
    tau = np.linspace(5e-6, 250e-6, 50)
    clean = _decay(tau, 100e-6, 2.0)
    errors = []
    for _ in range(100):
        noisy = clean + 0.01 * rng.standard_normal(tau.size)
        fit = fit_stretched_exponential(np.column_stack([tau, noisy]))
        errors.append(abs(fit.t2_eff - 100e-6) / 100e-6)
    assert float(np.median(errors)) < 0.05


def test_stretched_exponential_is_scale_equivariant() -> None:
    tau = np.linspace(10e-6, 300e-6, 12)
    signal = _decay(tau, 80e-6, 1.4, amplitude=0.9)
    base = fit_stretched_exponential(np.column_stack([tau, signal]))
    scaled = fit_stretched_exponential(np.column_stack([4.0 * tau, signal]))
    assert scaled.t2_eff == 4.0 * base.t2_eff
    assert scaled.stretch_n == base.stretch_n


def test_stretched_exponential_rejects_constant_signal() -> None:
    tau = np.linspace(10e-6, 100e-6, 8)
    with pytest.raises(DegenerateFitError):
        fit_stretched_exponential(np.column_stack([tau, np.ones(tau.size)]))


@pytest.mark.parametrize(
    "samples",
    [
        [[1e-6, 1.0], [2e-6, 0.9], [3e-6, 0.8]],
        [[0.0, 1.0], [1e-6, 0.9], [2e-6, 0.8], [3e-6, 0.7]],
        [[1e-6, 1.0], [1e-6, 0.9], [2e-6, 0.8], [3e-6, 0.7]],
    ],
)
def test_stretched_exponential_validates_samples(samples) -> None:
    with pytest.raises(AnalysisError):
        fit_stretched_exponential(samples)


def test_damped_sinusoid_undamped_cosine() -> None:
    theta = np.radians(np.linspace(0.0, 40.0, 41))
    k = TWO_PI / math.radians(10.0)
    signal = 0.5 + 0.3 * np.cos(k * theta + 0.4)
    fit = fit_damped_sinusoid(np.column_stack([theta, signal]))
    assert fit.status == FIT_OK
    assert fit.decay_angle >= 10 * (theta[-1] - theta[0])
    assert fit.amplitude == pytest.approx(0.3, rel=1e-2)
    assert fit.frequency == pytest.approx(k, rel=1e-3)


def test_damped_sinusoid_recovers_decay_angle() -> None:
    theta = np.radians(np.linspace(0.0, 40.0, 81))
    decay = math.radians(10.0)
    k = TWO_PI / math.radians(8.0)
    signal = 0.2 + 0.6 * np.exp(-theta / decay) * np.cos(k * theta)
    fit = fit_damped_sinusoid(np.column_stack([theta, signal]))
    assert fit.decay_angle == pytest.approx(decay, rel=0.05)
    np.testing.assert_allclose(fit.evaluate(theta), signal, atol=1e-6)


def test_damped_sinusoid_on_noise_is_flagged() -> None:
    rng = np.random.Generator(np.random.Philox(key=11))
    theta = np.radians(np.linspace(0.0, 40.0, 41))
    fit = fit_damped_sinusoid(np.column_stack([theta, rng.standard_normal(theta.size)]))
    assert fit.status != FIT_OK or fit.amplitude <= 3 * fit.amplitude_stderr


def test_damped_sinusoid_needs_eight_samples() -> None:
    theta = np.linspace(0.0, 0.5, 7)
    with pytest.raises(AnalysisError):
        fit_damped_sinusoid(np.column_stack([theta, np.cos(theta)]))


def test_detect_revivals_on_constructed_signal() -> None:
    f_rot = 8.33e3
    tau = np.linspace(0.0, 1e-3, 2001)
    signal = np.exp(-tau / 0.1) * np.cos(math.pi * f_rot * tau / 2) ** 2
    revivals = detect_revivals((tau, signal), f_rot)
    step = tau[1] - tau[0]
    assert [r.multiple for r in revivals] == [1, 2, 3, 4]
    for revival in revivals:
        assert abs(revival.offset) <= step


def test_detect_revivals_sees_through_larmor_structure() -> None:
    f_rot = 8e3
    tau = np.linspace(0.0, 1e-3, 2001)
    rotation = np.cos(math.pi * f_rot * tau / 2) ** 2
    larmor = 0.5 + 0.5 * np.cos(TWO_PI * 2.5 * f_rot * tau)
    signal = rotation * larmor
    raw_peaks, _ = find_peaks(signal, prominence=0.05)
    assert raw_peaks.size > 3
    revivals = detect_revivals((tau, signal), f_rot)
    step = tau[1] - tau[0]
    assert [r.multiple for r in revivals] == [1, 2, 3]
    for revival in revivals:
        assert abs(revival.offset) <= step / 2


def test_upper_envelope_bridges_only_short_gaps() -> None:
    tau = np.linspace(0.0, 1.0, 1001)
    signal = np.cos(TWO_PI * 10 * tau) ** 2
    bridged = upper_envelope(tau, signal, 0.2)
    np.testing.assert_allclose(bridged[100:901], 1.0, atol=1e-9)
    np.testing.assert_array_equal(upper_envelope(tau, signal, 0.04), signal)
    assert np.all(bridged >= signal)


def test_detect_revivals_is_scale_invariant() -> None:
    f_rot = 8.33e3
    tau = np.linspace(0.0, 1e-3, 501)
    signal = np.exp(-tau / 2e-3) * (0.6 + 0.4 * np.cos(math.pi * f_rot * tau / 2) ** 2)
    plain = detect_revivals(_result(tau, signal), f_rot)
    scaled = detect_revivals(_result(tau, 0.3 * signal), f_rot)
    assert [r.time for r in plain] == [r.time for r in scaled]


def test_detect_revivals_ignores_monotone_decay() -> None:
    tau = np.linspace(0.0, 1e-3, 501)
    assert detect_revivals((tau, np.exp(-tau / 3e-4)), 8.33e3) == []


def test_detect_revivals_requires_three_periods() -> None:
    tau = np.linspace(0.0, 1e-4, 51)
    with pytest.raises(AnalysisError):
        detect_revivals((tau, np.ones(tau.size)), 8.33e3)


def test_sample_revivals_stops_below_floor() -> None:
    tau = np.arange(1, 13) * 75e-6
    signal = np.array([0.9, 0.5, 0.1, 0.01, 0.005, 0.001, 0, 0, 0, 0, 0, 0], dtype=float)
    kept_tau, kept = sample_revivals(_result(tau, signal))
    np.testing.assert_array_equal(kept, signal[:4])
    assert kept_tau.size == 4

    early = np.array([0.01] + [0.0] * 11)
    assert sample_revivals(_result(tau, early))[1].size == 4

    slow = np.linspace(0.9, 0.5, 12)
    assert sample_revivals(_result(tau, slow))[1].size == 12


def test_dipolar_scaling_factor_values() -> None:
    assert dipolar_scaling_factor(MAGIC_ANGLE) == pytest.approx(0.0, abs=1e-6)
    assert math.degrees(MAGIC_ANGLE) == pytest.approx(54.7356, abs=1e-4)
    assert dipolar_scaling_factor(0.0) == pytest.approx(1.0)
    assert dipolar_scaling_factor(math.pi / 2) == pytest.approx(-0.5)


def test_hop_average_vanishes_without_hyperfine() -> None:
    hop = magic_angle_hop_average([0.0, 0.0, 1e6], 40.0)
    assert abs(hop.mean_shift) <= 1e-12
    assert abs(hop.exact_mean_shift) <= 1e-12


def test_hop_average_cancels_azimuthal_part_at_first_order() -> None:
    hop = magic_angle_hop_average([0.6, -0.3, 0.74], 40.0, MAGIC_ANGLE, -1)
    assert hop.max_abs_shift > 0
    assert hop.mean_shift == pytest.approx(hop.isotropic_shift, abs=1e-9 * hop.max_abs_shift)
    assert hop.first_order_suppression <= 1e-2
    assert len(hop.azimuths) == 3


def test_hop_shifts_linearize_the_effective_field() -> None:
    hop = magic_angle_hop_average([0.0, 0.9, 2.4], 40.0, MAGIC_ANGLE, 0)
    np.testing.assert_allclose(hop.exact_shifts, hop.shifts, atol=1e-2 * hop.max_abs_shift)


def test_frozen_axis_leaves_isotropic_shift_at_magic_angle() -> None:
    hop = magic_angle_hop_average([0.6, -0.3, 0.74], 40.0, MAGIC_ANGLE, 0)
    assert abs(hop.exact_mean_shift) > 0.05 * hop.max_abs_shift


@pytest.mark.parametrize("m_s, radii", [(0, (1.0, 1.5, 2.0, 3.0)), (-1, (2.0, 3.0, 4.0, 6.0))])
def test_hop_residual_is_second_order_over_site_sweep(m_s, radii) -> None:
    direction = np.array([0.4, 0.5, 0.77]) / np.linalg.norm([0.4, 0.5, 0.77])
    ratios = [magic_angle_hop_average(r * direction, 40.0, MAGIC_ANGLE, m_s).suppression for r in radii]
    assert all(later < earlier for earlier, later in zip(ratios, ratios[1:]))
    assert ratios[-1] <= ratios[0] / 5


def test_hop_average_at_pole_equals_single_angle() -> None:
    hop = magic_angle_hop_average([0.6, -0.3, 0.74], 40.0, 0.0, -1)
    assert hop.mean_shift == pytest.approx(hop.shifts[0], rel=1e-12)
    np.testing.assert_allclose(hop.shifts, hop.shifts[0], rtol=1e-12)
    assert hop.suppression == pytest.approx(0.0, abs=1e-9)


def test_t2_map_cells_and_rows() -> None:
    params = BathParameters(radius=1.0, abundance=0.03, g_max=1)
    t2_map = build_t2_map(
        np.radians([0.0, 20.0]),
        [0.0, TWO_PI * 3.33e3],
        20.0,
        params,
        [1, 2],
        n_revivals=5,
    )
    assert t2_map.t2_values.shape == (2, 2)
    rows = t2_map.rows()
    assert len(rows) == 4
    assert rows[0][0] == 0.0 and rows[1][1] == pytest.approx(3.33e3)
    for status in np.ravel(t2_map.statuses):
        assert status in {FIT_OK, "max_iterations", FIT_DEGENERATE, "failed"}
    stationary = t2_map.cells[0][0]
    assert stationary.status == FIT_OK
    assert stationary.t2_eff == pytest.approx(150e-6, rel=0.1)


def test_t2_map_without_envelope_marks_flat_cells() -> None:
    params = BathParameters(radius=0.8, abundance=0.0, g_max=1)
    t2_map = build_t2_map([0.0], [0.0], 20.0, params, [1], t2_phenom=None, n_revivals=4)
    assert t2_map.statuses == ((FIT_DEGENERATE,),)
    assert math.isnan(t2_map.t2_values[0, 0])


def test_t2_map_rejects_empty_grid() -> None:
    with pytest.raises(AnalysisError):
        build_t2_map([], [0.0], 20.0, BathParameters(), [1])


def test_revival_grid_matches_revival_time() -> None:
    assert revival_time(20.0, 3.33e3) == pytest.approx(2 / (1071.5 * 20 + 3.33e3))
