from __future__ import annotations

from collections.abc import Iterator
from pathlib import Path

import numpy as np
import pytest

from rotating_spin_bath.bath import BathConfiguration, LatticeSite, generate_lattice
from rotating_spin_bath.store import RunStore


@pytest.fixture(scope="session")
def lattice_small() -> list[LatticeSite]:
    return generate_lattice(1.0)


@pytest.fixture(scope="session")
def random_bath() -> BathConfiguration:
    """Twenty spins drawn without replacement from a 1.3 nm lattice ball."""
    sites = generate_lattice(1.3)
    rng = np.random.Generator(np.random.Philox(key=2024))
    chosen = np.sort(rng.choice(len(sites), size=20, replace=False))
    positions = np.array([sites[i].position for i in chosen])
    positions.setflags(write=False)
    return BathConfiguration(seed=2024, sites=positions, abundance=1.0, radius=1.3, min_distance=0.0)


@pytest.fixture
def store(tmp_path: Path) -> Iterator[RunStore]:
    ledger = tmp_path / ".ledger"
    instance = RunStore(ledger / "runs.db", ledger / "audit.jsonl")
    instance.initialize()
    yield instance
    instance.close()
