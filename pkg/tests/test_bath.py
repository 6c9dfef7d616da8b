from __future__ import annotations

import itertools
import json
import math
from pathlib import Path

import numpy as np
import pytest

from rotating_spin_bath.bath import (
    BathConfiguration,
    BathError,
    BathFileError,
    cluster_coupling,
    generate_bath,
    generate_lattice,
    load_bath,
    partition_clusters,
    sample_bath,
    save_bath,
)
from rotating_spin_bath.spin_core import CONSTANTS


def _brute_force_count(radius: float) -> int:
    unit = CONSTANTS.a0 / math.sqrt(3.0)
    basis = [(0, 0, 0), (0, 2, 2), (2, 0, 2), (2, 2, 0)]
    basis += [(x + 1, y + 1, z + 1) for x, y, z in basis]
    cells = int(math.ceil(radius / (4 * unit))) + 1
    count = 0
    for i, j, k in itertools.product(range(-cells, cells + 1), repeat=3):
        for bx, by, bz in basis:
            point = np.array([4 * i + bx, 4 * j + by, 4 * k + bz])
            if not point.any():
                continue
            if np.linalg.norm(point) * unit <= radius:
                count += 1
    return count


def _bath_from(positions: list[list[float]], seed: int = 0) -> BathConfiguration:
    return BathConfiguration(
        seed=seed,
        sites=np.array(positions, dtype=np.float64),
        abundance=1.0,
        radius=10.0,
        min_distance=0.0,
    )


def test_generate_lattice_nearest_neighbours() -> None:
    sites = generate_lattice(0.16)
    assert len(sites) == 4
    for site in sites:
        assert np.linalg.norm(site.position) == pytest.approx(CONSTANTS.a0, rel=1e-12)
    axial = [site for site in sites if site.position[2] > 0.15]
    assert len(axial) == 1
    np.testing.assert_allclose(axial[0].position, [0.0, 0.0, CONSTANTS.a0], atol=1e-12)


def test_generate_lattice_matches_brute_force_enumeration() -> None:
    sites = generate_lattice(2.0)
    assert len(sites) == _brute_force_count(2.0)
    indices = [site.index for site in sites]
    assert indices == sorted(indices)
    assert len(set(indices)) == len(indices)


def test_generate_lattice_volume_scaling() -> None:
    small = len(generate_lattice(1.2))
    large = len(generate_lattice(2.4))
    assert large / small == pytest.approx(8.0, rel=0.1)


def test_generate_lattice_below_nearest_neighbour_is_empty() -> None:
    assert generate_lattice(0.1) == []


def test_generate_lattice_rejects_non_positive_radius() -> None:
    with pytest.raises(BathError):
        generate_lattice(0.0)


def test_sample_bath_extremes(lattice_small) -> None:
    assert sample_bath(lattice_small, 0.0, seed=3, min_distance=0.0).size == 0
    assert sample_bath(lattice_small, 1.0, seed=3, min_distance=0.0).size == len(lattice_small)


def test_sample_bath_mean_occupancy() -> None:
    sites = generate_lattice(2.4)[:10_000]
    assert len(sites) == 10_000
    counts = [sample_bath(sites, 0.011, seed=seed, min_distance=0.0).size for seed in range(100)]
    assert float(np.mean(counts)) == pytest.approx(110.0, abs=10.0)


def test_sample_bath_is_bit_identical_for_a_seed(lattice_small) -> None:
    first = sample_bath(lattice_small, 0.2, seed=42)
    second = sample_bath(lattice_small, 0.2, seed=42)
    other = sample_bath(lattice_small, 0.2, seed=43)
    assert first.sites.tobytes() == second.sites.tobytes()
    assert first.sites.tobytes() != other.sites.tobytes()


def test_sample_bath_respects_min_distance_and_radius(lattice_small) -> None:
    bath = sample_bath(lattice_small, 1.0, seed=1, min_distance=0.3, radius=1.0)
    distances = bath.distances()
    assert distances.min() >= 0.3
    assert distances.max() <= 1.0


def test_sample_bath_rejects_bad_abundance(lattice_small) -> None:
    with pytest.raises(BathError):
        sample_bath(lattice_small, 1.5, seed=1)


def test_generate_bath_default_size_targets_natural_abundance() -> None:
    sizes = [generate_bath(seed=seed).size for seed in range(10)]
    assert 95 <= float(np.mean(sizes)) <= 155


def test_partition_singletons_for_g_max_one(random_bath) -> None:
    partition = partition_clusters(random_bath, 1)
    assert partition.groups == tuple((i,) for i in range(random_bath.size))


def test_partition_pairs_strongly_coupled_spins() -> None:
    bath = _bath_from([[0.0, 0.0, 0.0], [0.0, 0.0, 0.154], [5.0, 0.0, 0.0]])
    partition = partition_clusters(bath, 2)
    assert partition.groups == ((0, 1), (2,))


def test_partition_covers_every_spin_once(random_bath) -> None:
    for g_max in (1, 2, 3, 4):
        partition = partition_clusters(random_bath, g_max)
        flat = sorted(index for group in partition.groups for index in group)
        assert flat == list(range(random_bath.size))
        assert max(partition.sizes) <= g_max


def test_partition_leaves_no_mergeable_pair(random_bath) -> None:
    g_max = 3
    partition = partition_clusters(random_bath, g_max)
    owner = {index: k for k, group in enumerate(partition.groups) for index in group}
    for i, j in itertools.combinations(range(random_bath.size), 2):
        if owner[i] != owner[j]:
            assert len(partition.groups[owner[i]]) + len(partition.groups[owner[j]]) > g_max


def test_partition_groups_the_strongest_pair(random_bath) -> None:
    best = max(
        itertools.combinations(range(random_bath.size), 2),
        key=lambda pair: cluster_coupling(random_bath.sites[pair[0]], random_bath.sites[pair[1]]),
    )
    for g_max in (2, 3):
        partition = partition_clusters(random_bath, g_max)
        assert any(best[0] in group and best[1] in group for group in partition.groups)


def test_partition_group_count_non_increasing(random_bath) -> None:
    counts = [len(partition_clusters(random_bath, g).groups) for g in (1, 2, 3, 4)]
    assert counts == sorted(counts, reverse=True)


def test_partition_is_deterministic(random_bath) -> None:
    assert partition_clusters(random_bath, 3) == partition_clusters(random_bath, 3)


def test_partition_rejects_zero_g_max(random_bath) -> None:
    with pytest.raises(BathError):
        partition_clusters(random_bath, 0)


def test_bath_file_round_trip(tmp_path: Path, random_bath) -> None:
    path = tmp_path / "baths" / "bath.json"
    save_bath(random_bath, path)
    loaded = load_bath(path)
    assert loaded.seed == random_bath.seed
    assert loaded.sites.tobytes() == random_bath.sites.tobytes()
    assert loaded.min_distance == random_bath.min_distance


def test_load_bath_rejects_foreign_format(tmp_path: Path) -> None:
    path = tmp_path / "bath.json"
    path.write_text(json.dumps({"format": "something-else", "version": 1}), encoding="utf-8")
    with pytest.raises(BathFileError):
        load_bath(path)


def test_load_bath_reports_missing_file(tmp_path: Path) -> None:
    with pytest.raises(BathFileError):
        load_bath(tmp_path / "missing.json")
