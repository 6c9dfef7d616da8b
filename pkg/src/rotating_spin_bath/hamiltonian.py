"""Cluster Hamiltonians in the laboratory and rotating frames, plus effective-field diagnostics.

The Hilbert space of a cluster of g nuclei is the electron spin-1 factor (basis order
m_s = +1, 0, -1) followed by the g nuclear spin-1/2 factors, dimension 3 * 2**g.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass
from functools import reduce
import logging
import math

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .bath import BathConfiguration
from .spin_core import (
    CONSTANTS,
    PhysicalConstants,
    Tensor3,
    Vector3,
    hyperfine_tensor,
    nuclear_dipolar_tensor,
    rotation_y,
    rotation_z,
    spherical_vector,
    spin_operators,
)


logger = logging.getLogger(__name__)

MS_VALUES = (1, 0, -1)
AMBIGUITY_THRESHOLD = 0.7
Z_AXIS = np.array([0.0, 0.0, 1.0])


class HamiltonianError(ValueError):
    """Raised for invalid cluster or field geometry input."""

    code = "hamiltonian.invalid_input"


def ms_index(m_s: int) -> int:
    try:
        return MS_VALUES.index(int(m_s))
    except ValueError:
        raise HamiltonianError(f"m_s must be one of {MS_VALUES}, got {m_s}") from None


@dataclass(frozen=True, slots=True)
class FieldGeometry:
    """Applied field and rotation; angles in radians, field in gauss, omega_rot in rad/s."""

    b_magnitude: float
    theta_b: float = 0.0
    phi_b: float = 0.0
    omega_rot: float = 0.0
    delta_theta: float = 0.0
    phi0: float = 0.0

    def __post_init__(self) -> None:
        if self.b_magnitude < 0:
            raise HamiltonianError(f"b_magnitude must be >= 0 G, got {self.b_magnitude}")
        for name in ("theta_b", "phi_b", "omega_rot", "delta_theta", "phi0"):
            if not math.isfinite(getattr(self, name)):
                raise HamiltonianError(f"{name} must be finite")

    @property
    def f_rot(self) -> float:
        return self.omega_rot / (2.0 * math.pi)

    @property
    def rotation_period(self) -> float:
        return math.inf if self.omega_rot == 0 else 2.0 * math.pi / abs(self.omega_rot)

    def b_lab(self) -> Vector3:
        return spherical_vector(self.b_magnitude, self.theta_b, self.phi_b)

    def orientation(self) -> NDArray[np.float64]:
        """Crystal-to-lab rotation at t = 0; the NV axis sits delta_theta off the rotation axis."""
        return rotation_z(self.phi0) @ rotation_y(self.delta_theta)

    def rotation_axis(self) -> Vector3:
        """Rotation axis expressed in the crystal frame."""
        return self.orientation().T @ Z_AXIS

    def field_in_crystal(self, t: ArrayLike) -> NDArray[np.float64]:
        """Applied field seen in the co-rotating crystal frame; shape (3,) or (T, 3)."""
        times = np.asarray(t, dtype=np.float64)
        angles = -self.omega_rot * times.reshape(-1)
        c, s = np.cos(angles), np.sin(angles)
        b = self.b_lab()
        rotated = np.stack([c * b[0] - s * b[1], s * b[0] + c * b[1], np.full_like(c, b[2])], axis=1)
        fields = rotated @ self.orientation()
        return fields[0] if times.ndim == 0 else fields


@dataclass(frozen=True, slots=True, eq=False)
class ClusterHamiltonian:
    positions: NDArray[np.float64]
    static: NDArray[np.complex128]
    s_ops: NDArray[np.complex128]
    i_ops: NDArray[np.complex128]
    constants: PhysicalConstants

    @property
    def dimension(self) -> int:
        return int(self.static.shape[0])

    @property
    def n_spins(self) -> int:
        return int(self.positions.shape[0])

    def at_many(
        self,
        fields: NDArray[np.float64],
        omega_rot: float = 0.0,
        axis: Vector3 = Z_AXIS,
    ) -> NDArray[np.complex128]:
        """Stack of Hamiltonians for crystal-frame fields of shape (T, 3)."""
        fields = np.atleast_2d(np.asarray(fields, dtype=np.float64))
        pseudo = omega_rot * np.asarray(axis, dtype=np.float64)
        electron = self.constants.gamma_e * fields + pseudo
        nuclear = self.constants.gamma_n * fields + pseudo
        return (
            self.static[np.newaxis]
            + np.einsum("ta,aij->tij", electron, self.s_ops)
            + np.einsum("ta,aij->tij", nuclear, self.i_ops)
        )

    def at(self, field: Vector3, omega_rot: float = 0.0, axis: Vector3 = Z_AXIS) -> NDArray[np.complex128]:
        return self.at_many(np.asarray(field)[np.newaxis], omega_rot, axis)[0]


def _embed(factors: Sequence[NDArray[np.complex128]]) -> NDArray[np.complex128]:
    return reduce(np.kron, factors)


def _secular(tensor: Tensor3) -> Tensor3:
    zz = tensor[2, 2]
    return np.diag([-0.5 * zz, -0.5 * zz, zz])


def build_cluster_hamiltonian(
    positions: ArrayLike,
    *,
    include_dipolar: bool = True,
    secular_dipolar: bool = False,
    constants: PhysicalConstants = CONSTANTS,
) -> ClusterHamiltonian:
    sites = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    g = sites.shape[0]
    electron = spin_operators(1)
    nucleus = spin_operators(0.5)
    eye_e = np.eye(3, dtype=np.complex128)
    eye_n = np.eye(2, dtype=np.complex128)
    n_dim = 2**g

    s_ops = np.stack([np.kron(op, np.eye(n_dim)) for op in (electron.sx, electron.sy, electron.sz)])
    # single[i, a]: component a of nucleus i on the full space.
    single = np.empty((g, 3, 3 * n_dim, 3 * n_dim), dtype=np.complex128)
    for i in range(g):
        for a, op in enumerate((nucleus.sx, nucleus.sy, nucleus.sz)):
            factors = [eye_e] + [op if k == i else eye_n for k in range(g)]
            single[i, a] = _embed(factors)

    static = constants.d_zfs * (s_ops[2] @ s_ops[2])
    for i in range(g):
        a_tensor = hyperfine_tensor(sites[i], constants)
        static = static + np.einsum("ab,aij,bjk->ik", a_tensor, s_ops, single[i])
    if include_dipolar:
        for i in range(g):
            for j in range(i + 1, g):
                d_tensor = nuclear_dipolar_tensor(sites[i], sites[j], constants)
                if secular_dipolar:
                    d_tensor = _secular(d_tensor)
                static = static + np.einsum("ab,aij,bjk->ik", d_tensor, single[i], single[j])

    static = 0.5 * (static + static.conj().T)
    i_ops = single.sum(axis=0) if g else np.zeros_like(s_ops)
    positions_copy = sites.copy()
    positions_copy.setflags(write=False)
    return ClusterHamiltonian(
        positions=positions_copy,
        static=static,
        s_ops=s_ops,
        i_ops=i_ops,
        constants=constants,
    )


def lab_hamiltonian(
    positions: ArrayLike,
    b_vector: Vector3,
    *,
    include_dipolar: bool = True,
    constants: PhysicalConstants = CONSTANTS,
) -> NDArray[np.complex128]:
    cluster = build_cluster_hamiltonian(positions, include_dipolar=include_dipolar, constants=constants)
    return cluster.at(np.asarray(b_vector, dtype=np.float64))


def rotating_frame_hamiltonian(
    cluster: ClusterHamiltonian,
    geometry: FieldGeometry,
    t: ArrayLike,
) -> NDArray[np.complex128]:
    times = np.asarray(t, dtype=np.float64)
    stack = cluster.at_many(
        np.atleast_2d(geometry.field_in_crystal(times.reshape(-1))),
        geometry.omega_rot,
        geometry.rotation_axis(),
    )
    return stack[0] if times.ndim == 0 else stack


def electron_reference_states(
    fields: NDArray[np.float64],
    constants: PhysicalConstants = CONSTANTS,
) -> NDArray[np.complex128]:
    ops = spin_operators(1)
    stack = np.stack([ops.sx, ops.sy, ops.sz])
    fields = np.atleast_2d(fields)
    h_e = constants.d_zfs * (ops.sz @ ops.sz)[np.newaxis] + np.einsum(
        "ta,aij->tij", constants.gamma_e * fields, stack
    )
    _, vectors = np.linalg.eigh(h_e)
    # Column k of the result is the eigenvector with the largest overlap on |m_s = MS_VALUES[k]>.
    label = np.argmax(np.abs(vectors) ** 2, axis=1)
    order = np.argsort(label, axis=1)
    return np.take_along_axis(vectors, order[:, np.newaxis, :], axis=2)


def manifold_weights(
    eigenvectors: NDArray[np.complex128],
    electron_states: NDArray[np.complex128],
    m_s: int,
) -> NDArray[np.float64]:
    t_count, dim, _ = eigenvectors.shape
    n_dim = dim // 3
    reference = electron_states[:, :, ms_index(m_s)]
    blocks = eigenvectors.reshape(t_count, 3, n_dim, dim)
    amplitudes = np.einsum("ta,tanK->tnK", reference.conj(), blocks)
    return np.sum(np.abs(amplitudes) ** 2, axis=1)


def effective_g_tensor(a_tensor: Tensor3, m_s: int, constants: PhysicalConstants = CONSTANTS) -> Tensor3:
    ms_index(m_s)
    factor = (constants.gamma_e / (constants.gamma_n * constants.d_zfs)) * (2 - 3 * abs(m_s))
    return np.eye(3) - factor * np.asarray(a_tensor, dtype=np.float64)


@dataclass(frozen=True, slots=True, eq=False)
class EffectiveField:
    vector: Vector3
    m_s: int

    @property
    def magnitude(self) -> float:
        return float(np.linalg.norm(self.vector))

    def precession_frequency(self, constants: PhysicalConstants = CONSTANTS) -> float:
        return constants.gamma_n * self.magnitude


def effective_field(
    b_vector: Vector3,
    site: Vector3,
    m_s: int,
    *,
    omega_rot: float = 0.0,
    rotation_axis: Vector3 = Z_AXIS,
    constants: PhysicalConstants = CONSTANTS,
) -> EffectiveField:
    """m_s B_dip + B.g, with the g correction contracted with the field transverse to the NV axis."""
    b = np.asarray(b_vector, dtype=np.float64)
    a_tensor = hyperfine_tensor(site, constants)
    g_tensor = effective_g_tensor(a_tensor, m_s, constants)
    b_dip = a_tensor @ Z_AXIS / constants.gamma_n
    transverse = np.array([b[0], b[1], 0.0])
    vector = m_s * b_dip + b + transverse @ (g_tensor - np.eye(3))
    if omega_rot:
        vector = vector + (omega_rot / constants.gamma_n) * np.asarray(rotation_axis, dtype=np.float64)
    return EffectiveField(vector=vector, m_s=int(m_s))


@dataclass(frozen=True, slots=True)
class LarmorFrequency:
    omega: float
    ambiguous: bool
    weight: float

    @property
    def hz(self) -> float:
        return self.omega / (2.0 * math.pi)


def _larmor_batch(
    cluster: ClusterHamiltonian,
    geometry: FieldGeometry,
    times: NDArray[np.float64],
    m_s: int,
) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    fields = np.atleast_2d(geometry.field_in_crystal(times))
    hamiltonians = cluster.at_many(fields, geometry.omega_rot, geometry.rotation_axis())
    energies, vectors = np.linalg.eigh(hamiltonians)
    weights = manifold_weights(vectors, electron_reference_states(fields, cluster.constants), m_s)
    top = np.argsort(-weights, axis=1, kind="stable")[:, :2]
    pair_energies = np.take_along_axis(energies, top, axis=1)
    pair_weights = np.take_along_axis(weights, top, axis=1)
    return np.abs(pair_energies[:, 0] - pair_energies[:, 1]), pair_weights.min(axis=1)


def larmor_frequency(
    cluster: ClusterHamiltonian,
    geometry: FieldGeometry,
    t: float,
    m_s: int,
) -> LarmorFrequency:
    if cluster.n_spins != 1:
        raise HamiltonianError(f"larmor_frequency needs a single-nucleus cluster, got {cluster.n_spins}")
    omega, weight = _larmor_batch(cluster, geometry, np.array([t], dtype=np.float64), m_s)
    ambiguous = bool(weight[0] < AMBIGUITY_THRESHOLD)
    if ambiguous:
        logger.warning("Ambiguous m_s=%d level assignment at t=%.3e s (weight %.3f)", m_s, t, weight[0])
    return LarmorFrequency(omega=float(omega[0]), ambiguous=ambiguous, weight=float(weight[0]))


@dataclass(frozen=True, slots=True, eq=False)
class FrequencyTrace:
    times: NDArray[np.float64]
    m_s: int
    r_nm: NDArray[np.float64]
    frequencies_hz: NDArray[np.float64]
    ambiguous: NDArray[np.bool_]

    def rows(self) -> list[tuple[int, float, float, int, float]]:
        """(spin_index, r_nm, time_s, m_s, frequency_hz) in spin-major order."""
        out: list[tuple[int, float, float, int, float]] = []
        for spin, r in enumerate(self.r_nm):
            for k, t in enumerate(self.times):
                out.append((spin, float(r), float(t), self.m_s, float(self.frequencies_hz[spin, k])))
        return out


def frequency_trace(
    bath: BathConfiguration,
    geometry: FieldGeometry,
    times: ArrayLike,
    m_s: int,
    *,
    constants: PhysicalConstants = CONSTANTS,
) -> FrequencyTrace:
    grid = np.asarray(times, dtype=np.float64).reshape(-1)
    frequencies = np.empty((bath.size, grid.size))
    ambiguous = np.zeros((bath.size, grid.size), dtype=bool)
    for spin, site in enumerate(bath.sites):
        cluster = build_cluster_hamiltonian(site[np.newaxis], constants=constants)
        omega, weight = _larmor_batch(cluster, geometry, grid, m_s)
        frequencies[spin] = omega / (2.0 * math.pi)
        ambiguous[spin] = weight < AMBIGUITY_THRESHOLD
    if ambiguous.any():
        logger.warning("%d of %d trace samples have ambiguous level assignment", int(ambiguous.sum()), ambiguous.size)
    return FrequencyTrace(
        times=grid,
        m_s=int(m_s),
        r_nm=bath.distances(),
        frequencies_hz=frequencies,
        ambiguous=ambiguous,
    )


def tilt_spectrum(
    bath: BathConfiguration,
    b_magnitude: float,
    theta_grid: ArrayLike,
    omega_rot: float,
    m_s: int,
    *,
    constants: PhysicalConstants = CONSTANTS,
) -> NDArray[np.float64]:
    thetas = np.asarray(theta_grid, dtype=np.float64).reshape(-1)
    out = np.empty((bath.size, thetas.size))
    for k, theta in enumerate(thetas):
        geometry = FieldGeometry(b_magnitude=b_magnitude, theta_b=float(theta), omega_rot=omega_rot)
        trace = frequency_trace(bath, geometry, [0.0], m_s, constants=constants)
        out[:, k] = trace.frequencies_hz[:, 0]
    return out
