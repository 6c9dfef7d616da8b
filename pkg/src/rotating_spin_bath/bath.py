"""Seeded 13C bath configurations on the diamond lattice and their cluster partition."""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
import json
import logging
import math

import numpy as np
from numpy.typing import NDArray

from .spin_core import CONSTANTS, PhysicalConstants


logger = logging.getLogger(__name__)

BATH_FILE_FORMAT = "rotating-spin-bath/bath"
BATH_FILE_VERSION = 1
RNG_NAME = "philox"
MAX_SEED = 2**64 - 1
DEFAULT_MIN_DISTANCE_NM = 0.25
DEFAULT_RADIUS_NM = 2.48
NATURAL_ABUNDANCE = 0.011

# Crystal [111] (the NV axis) becomes +z; rows are the new x, y, z axes.
_NV_FRAME = np.array(
    [
        [1.0 / math.sqrt(2.0), -1.0 / math.sqrt(2.0), 0.0],
        [1.0 / math.sqrt(6.0), 1.0 / math.sqrt(6.0), -2.0 / math.sqrt(6.0)],
        [1.0 / math.sqrt(3.0), 1.0 / math.sqrt(3.0), 1.0 / math.sqrt(3.0)],
    ]
)


class BathError(ValueError):
    """Raised for invalid bath generation or partition parameters."""

    code = "bath.invalid_input"


class BathFileError(ValueError):
    """Raised when a bath file is missing, malformed or of the wrong format."""

    code = "bath.file"


@dataclass(frozen=True, slots=True, eq=False)
class LatticeSite:
    index: tuple[int, int, int]
    position: NDArray[np.float64]


@dataclass(frozen=True, slots=True, eq=False)
class BathConfiguration:
    seed: int
    sites: NDArray[np.float64]
    abundance: float
    radius: float
    min_distance: float

    @property
    def size(self) -> int:
        return int(self.sites.shape[0])

    def distances(self) -> NDArray[np.float64]:
        return np.linalg.norm(self.sites, axis=1)


@dataclass(frozen=True, slots=True)
class ClusterPartition:
    groups: tuple[tuple[int, ...], ...]
    g_max: int

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(len(group) for group in self.groups)

    def positions(self, bath: BathConfiguration, group_index: int) -> NDArray[np.float64]:
        return bath.sites[list(self.groups[group_index])]


def _cell_unit(constants: PhysicalConstants) -> float:
    # Nearest-neighbour distance a0 = sqrt(3) a / 4; integer coordinates count a / 4.
    return constants.a0 / math.sqrt(3.0)


def generate_lattice(radius: float, constants: PhysicalConstants = CONSTANTS) -> list[LatticeSite]:
    """All carbon sites within ``radius`` nm of the vacancy, origin excluded, NV axis along +z."""
    if not radius > 0:
        raise BathError(f"radius must be greater than 0 nm, got {radius}")
    unit = _cell_unit(constants)
    n_max = int(math.ceil(radius / unit))
    axis = np.arange(-n_max, n_max + 1)
    grid = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), axis=-1).reshape(-1, 3)

    parity = grid % 2
    total = grid.sum(axis=1) % 4
    fcc = np.all(parity == 0, axis=1) & (total == 0)
    basis = np.all(parity == 1, axis=1) & (total == 3)
    grid = grid[fcc | basis]
    grid = grid[np.any(grid != 0, axis=1)]

    positions = (grid * unit) @ _NV_FRAME.T
    inside = np.linalg.norm(positions, axis=1) <= radius
    grid, positions = grid[inside], positions[inside]
    logger.debug("Generated %d lattice sites within %.3f nm", len(grid), radius)
    return [
        LatticeSite(index=(int(i), int(j), int(k)), position=position)
        for (i, j, k), position in zip(grid, positions)
    ]


def make_rng(seed: int) -> np.random.Generator:
    if not 0 <= seed <= MAX_SEED:
        raise BathError(f"seed must be between 0 and 2**64 - 1, got {seed}")
    return np.random.Generator(np.random.Philox(key=seed))


def sample_bath(
    sites: Sequence[LatticeSite],
    abundance: float,
    seed: int,
    *,
    min_distance: float = DEFAULT_MIN_DISTANCE_NM,
    radius: float | None = None,
) -> BathConfiguration:
    if not 0.0 <= abundance <= 1.0:
        raise BathError(f"abundance must be between 0 and 1, got {abundance}")
    if min_distance < 0:
        raise BathError(f"min_distance must be >= 0 nm, got {min_distance}")
    positions = np.array([site.position for site in sites], dtype=np.float64).reshape(-1, 3)
    distances = np.linalg.norm(positions, axis=1)
    rng = make_rng(seed)
    # One draw per site for every abundance so the stream is indexed by site.
    occupied = rng.random(len(positions)) < abundance
    occupied &= distances >= min_distance
    chosen = positions[occupied]
    chosen.setflags(write=False)
    if radius is None:
        radius = float(distances.max()) if len(distances) else 0.0
    return BathConfiguration(
        seed=seed,
        sites=chosen,
        abundance=abundance,
        radius=radius,
        min_distance=min_distance,
    )


def generate_bath(
    radius: float = DEFAULT_RADIUS_NM,
    abundance: float = NATURAL_ABUNDANCE,
    seed: int = 1,
    *,
    min_distance: float = DEFAULT_MIN_DISTANCE_NM,
    lattice: Sequence[LatticeSite] | None = None,
) -> BathConfiguration:
    sites = generate_lattice(radius) if lattice is None else lattice
    bath = sample_bath(sites, abundance, seed, min_distance=min_distance, radius=radius)
    logger.debug("Bath seed=%d holds %d spins", seed, bath.size)
    return bath


def cluster_coupling(r_i: NDArray[np.float64], r_j: NDArray[np.float64]) -> float:
    """Secular dipolar amplitude |1 - 3cos^2(theta)| / r^3 about z, in nm^-3."""
    separation = np.asarray(r_i, dtype=np.float64) - np.asarray(r_j, dtype=np.float64)
    norm = float(np.linalg.norm(separation))
    if norm == 0.0:
        raise BathError("Coincident sites have no defined coupling")
    cos_theta = separation[2] / norm
    return abs(1.0 - 3.0 * cos_theta**2) / norm**3


def _pair_couplings(sites: NDArray[np.float64]) -> tuple[NDArray[np.intp], NDArray[np.intp], NDArray[np.float64]]:
    i, j = np.triu_indices(len(sites), k=1)
    separation = sites[i] - sites[j]
    norm = np.linalg.norm(separation, axis=1)
    cos_theta = separation[:, 2] / norm
    return i, j, np.abs(1.0 - 3.0 * cos_theta**2) / norm**3


def partition_clusters(bath: BathConfiguration, g_max: int) -> ClusterPartition:
    """Greedy merge over pairs by descending coupling, capped at ``g_max`` spins per group."""
    if g_max < 1:
        raise BathError(f"g_max must be >= 1, got {g_max}")
    n = bath.size
    parent = list(range(n))
    size = [1] * n

    def find(node: int) -> int:
        while parent[node] != node:
            parent[node] = parent[parent[node]]
            node = parent[node]
        return node

    if n > 1 and g_max > 1:
        i, j, coupling = _pair_couplings(bath.sites)
        order = np.lexsort((j, i, -coupling))
        for k in order:
            root_i, root_j = find(int(i[k])), find(int(j[k]))
            if root_i == root_j or size[root_i] + size[root_j] > g_max:
                continue
            if root_j < root_i:
                root_i, root_j = root_j, root_i
            parent[root_j] = root_i
            size[root_i] += size[root_j]

    members: dict[int, list[int]] = {}
    for node in range(n):
        members.setdefault(find(node), []).append(node)
    groups = tuple(sorted((tuple(group) for group in members.values()), key=lambda group: group[0]))
    logger.debug("Partitioned %d spins into %d groups (g_max=%d)", n, len(groups), g_max)
    return ClusterPartition(groups=groups, g_max=g_max)


@lru_cache(maxsize=8)
def _cached_lattice(radius: float) -> tuple[LatticeSite, ...]:
    return tuple(generate_lattice(radius))


@dataclass(frozen=True, slots=True)
class BathParameters:
    radius: float = DEFAULT_RADIUS_NM
    abundance: float = NATURAL_ABUNDANCE
    min_distance: float = DEFAULT_MIN_DISTANCE_NM
    g_max: int = 3
    include_dipolar: bool = True

    def __post_init__(self) -> None:
        if not self.radius > 0:
            raise BathError(f"radius must be greater than 0 nm, got {self.radius}")
        if not 0.0 <= self.abundance <= 1.0:
            raise BathError(f"abundance must be between 0 and 1, got {self.abundance}")
        if self.min_distance < 0:
            raise BathError(f"min_distance must be >= 0 nm, got {self.min_distance}")
        if self.g_max < 1:
            raise BathError(f"g_max must be >= 1, got {self.g_max}")

    def realize(self, seed: int) -> tuple[BathConfiguration, ClusterPartition]:
        bath = generate_bath(
            self.radius,
            self.abundance,
            seed,
            min_distance=self.min_distance,
            lattice=_cached_lattice(self.radius),
        )
        return bath, partition_clusters(bath, self.g_max)


def save_bath(bath: BathConfiguration, path: Path) -> None:
    payload = {
        "format": BATH_FILE_FORMAT,
        "version": BATH_FILE_VERSION,
        "seed": bath.seed,
        "abundance": bath.abundance,
        "radius_nm": bath.radius,
        "min_distance_nm": bath.min_distance,
        "rng": RNG_NAME,
        "positions_nm": [[float(x) for x in site] for site in bath.sites],
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def load_bath(path: Path) -> BathConfiguration:
    path = Path(path)
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise BathFileError(f"Bath file does not exist: {path}") from None
    except json.JSONDecodeError as exc:
        raise BathFileError(f"Bath file is not valid JSON: {path} (line {exc.lineno})") from exc

    if not isinstance(payload, dict):
        raise BathFileError("Bath file must hold a JSON object")
    if payload.get("format") != BATH_FILE_FORMAT:
        raise BathFileError(f"Unexpected bath file format: {payload.get('format')!r}")
    if payload.get("version") != BATH_FILE_VERSION:
        raise BathFileError(f"Unsupported bath file version: {payload.get('version')!r}")
    if payload.get("rng", RNG_NAME) != RNG_NAME:
        raise BathFileError(f"Unsupported generator: {payload.get('rng')!r}")
    try:
        raw_positions = payload["positions_nm"]
        sites = np.array(raw_positions, dtype=np.float64).reshape(-1, 3)
        bath = BathConfiguration(
            seed=int(payload["seed"]),
            sites=sites,
            abundance=float(payload["abundance"]),
            radius=float(payload["radius_nm"]),
            min_distance=float(payload["min_distance_nm"]),
        )
    except KeyError as exc:
        raise BathFileError(f"Bath file missing required key: {exc.args[0]}") from exc
    except (TypeError, ValueError) as exc:
        raise BathFileError(f"Bath file has malformed values: {exc}") from exc
    if len(raw_positions) != bath.size:
        raise BathFileError("positions_nm must be a list of [x, y, z] triples")
    sites.setflags(write=False)
    return bath
