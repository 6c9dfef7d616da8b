"""Physical constants, spin operators and point-dipole interaction tensors.

Units used throughout the package:

- energies and couplings: angular frequency (rad/s)
- fields: gauss
- positions: nanometres
- times: seconds
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
import math

import numpy as np
from numpy.typing import NDArray
from scipy import constants as codata


Vector3 = NDArray[np.float64]
Tensor3 = NDArray[np.float64]

TWO_PI = 2.0 * math.pi
GAUSS_PER_TESLA = 1.0e4
NM3_PER_M3 = 1.0e27


class SpinCoreError(ValueError):
    """Raised for unsupported spins or degenerate geometry."""

    code = "spin_core.invalid_input"


@dataclass(frozen=True, slots=True)
class PhysicalConstants:
    gamma_e: float
    gamma_n: float
    d_zfs: float
    mu0_hbar_factor: float
    nuclear_dipolar_factor: float
    a0: float

    @classmethod
    def from_codata(
        cls,
        *,
        gamma_e_hz_per_gauss: float = 2.8e6,
        gamma_n_hz_per_gauss: float = 1071.5,
        d_zfs_hz: float = 2.870e9,
        a0_nm: float = 0.154,
    ) -> "PhysicalConstants":
        gamma_e = TWO_PI * gamma_e_hz_per_gauss
        gamma_n = TWO_PI * gamma_n_hz_per_gauss
        # mu0/(4 pi) * gamma_e * gamma_n * hbar with gammas in rad/s/T gives rad/s * m^3.
        gamma_e_si = gamma_e * GAUSS_PER_TESLA
        gamma_n_si = gamma_n * GAUSS_PER_TESLA
        prefactor = codata.mu_0 / (4.0 * math.pi) * codata.hbar
        constants = cls(
            gamma_e=gamma_e,
            gamma_n=gamma_n,
            d_zfs=TWO_PI * d_zfs_hz,
            mu0_hbar_factor=prefactor * gamma_e_si * gamma_n_si * NM3_PER_M3,
            nuclear_dipolar_factor=prefactor * gamma_n_si * gamma_n_si * NM3_PER_M3,
            a0=a0_nm,
        )
        for name in ("gamma_e", "gamma_n", "d_zfs", "mu0_hbar_factor", "nuclear_dipolar_factor", "a0"):
            if getattr(constants, name) <= 0:
                raise SpinCoreError(f"Physical constant {name} must be positive")
        return constants


CONSTANTS = PhysicalConstants.from_codata()


@dataclass(frozen=True, slots=True, eq=False)
class SpinOperatorSet:
    spin: Fraction
    sx: NDArray[np.complex128]
    sy: NDArray[np.complex128]
    sz: NDArray[np.complex128]

    @property
    def dimension(self) -> int:
        return int(self.sz.shape[0])

    def as_stack(self) -> NDArray[np.complex128]:
        return np.stack([self.sx, self.sy, self.sz])


def spin_operators(spin: float | Fraction) -> SpinOperatorSet:
    """Angular momentum matrices in the Zeeman basis, ordered by descending m."""
    value = Fraction(spin).limit_denominator(2)
    if value not in (Fraction(1, 2), Fraction(1)):
        raise SpinCoreError(f"Unsupported spin quantum number: {spin} (expected 1/2 or 1)")
    s = float(value)
    m = np.arange(s, -s - 1.0, -1.0)
    dim = m.size
    # <m+1|S+|m> = sqrt(s(s+1) - m(m+1)) sits on the superdiagonal for descending m.
    raising = np.zeros((dim, dim), dtype=np.complex128)
    for col in range(1, dim):
        raising[col - 1, col] = math.sqrt(s * (s + 1.0) - m[col] * (m[col] + 1.0))
    lowering = raising.conj().T
    sx = 0.5 * (raising + lowering)
    sy = -0.5j * (raising - lowering)
    sz = np.diag(m).astype(np.complex128)
    for matrix in (sx, sy, sz):
        matrix.setflags(write=False)
    return SpinOperatorSet(spin=value, sx=sx, sy=sy, sz=sz)


def vector3(x: float, y: float, z: float) -> Vector3:
    return np.array([x, y, z], dtype=np.float64)


def spherical_vector(magnitude: float, theta: float, phi: float) -> Vector3:
    return magnitude * np.array(
        [math.sin(theta) * math.cos(phi), math.sin(theta) * math.sin(phi), math.cos(theta)],
        dtype=np.float64,
    )


def rotation_z(angle: float) -> NDArray[np.float64]:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rotation_y(angle: float) -> NDArray[np.float64]:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _dipolar_shape(r: Vector3, *, what: str) -> tuple[float, Tensor3]:
    vec = np.asarray(r, dtype=np.float64)
    if vec.shape != (3,):
        raise SpinCoreError(f"{what} must be a 3-vector, got shape {vec.shape}")
    norm = float(np.linalg.norm(vec))
    if norm == 0.0:
        raise SpinCoreError(f"{what} has zero length")
    unit = vec / norm
    return norm, np.eye(3) - 3.0 * np.outer(unit, unit)


def hyperfine_tensor(r: Vector3, constants: PhysicalConstants = CONSTANTS) -> Tensor3:
    """Point-dipole NV-13C hyperfine tensor (rad/s) for a nucleus at ``r`` nm."""
    norm, shape = _dipolar_shape(r, what="Nuclear position")
    return (constants.mu0_hbar_factor / norm**3) * shape


def nuclear_dipolar_tensor(r_i: Vector3, r_j: Vector3, constants: PhysicalConstants = CONSTANTS) -> Tensor3:
    """Full (non-secular) 13C-13C dipolar tensor D_ij in rad/s; H = I_i . D_ij . I_j."""
    separation = np.asarray(r_i, dtype=np.float64) - np.asarray(r_j, dtype=np.float64)
    try:
        norm, shape = _dipolar_shape(separation, what="Nuclear pair separation")
    except SpinCoreError as exc:
        raise SpinCoreError("Coincident nuclear positions") from exc
    return (constants.nuclear_dipolar_factor / norm**3) * shape


def pseudo_field(omega_rot: float, constants: PhysicalConstants = CONSTANTS) -> float:
    """Rotation pseudo-field omega/gamma_n in gauss."""
    return omega_rot / constants.gamma_n
