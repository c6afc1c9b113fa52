from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest

# Ensure `simulator/` is on sys.path so imports like `from app...` work
# even when pytest chooses the repository root as its rootdir.
SIMULATOR_DIR = Path(__file__).resolve().parents[1]
simulator_dir_str = str(SIMULATOR_DIR)
if simulator_dir_str not in sys.path:
    sys.path.insert(0, simulator_dir_str)

PROJECT_ROOT = SIMULATOR_DIR.parent
CRYSTALS_DIR = PROJECT_ROOT / "docs" / "crystals"


@pytest.fixture(scope="session")
def toy_definition():
    from app.schemas.crystal import load_crystal_file

    return load_crystal_file(CRYSTALS_DIR / "toy_cubic.yaml")


@pytest.fixture(scope="session")
def yso_definition():
    from app.schemas.crystal import load_crystal_file

    return load_crystal_file(CRYSTALS_DIR / "yso.yaml")


@pytest.fixture
def g_default():
    from app.services.hamiltonian import GTensor

    return GTensor.default()


@pytest.fixture
def field_z():
    from app.services.hamiltonian import MagneticField

    return MagneticField(0.097, np.array([0.0, 0.0, 1.0]))


@pytest.fixture
def make_spin():
    """Factory for standalone bath spins at explicit defect-relative positions."""
    from app.schemas.crystal import SpinSpecies
    from app.services.lattice import BathSpin

    species = {
        "Y": SpinSpecies(label="Y", gamma_mhz_per_t=-2.0886, spin=0.5, abundance=1.0),
        "Si": SpinSpecies(label="Si", gamma_mhz_per_t=-8.465, spin=0.5, abundance=0.047),
    }

    def _make(index: int, position, label: str = "Y") -> BathSpin:
        return BathSpin(
            index=index,
            species=species[label],
            position=np.asarray(position, dtype=float),
            cell=(0, 0, 0),
            basis_index=-1,
            active=True,
        )

    return _make


@pytest.fixture
def random_spins(make_spin):
    """Spins at seeded random positions in a shell 3–9 Å around the defect."""

    def _make(n: int, seed: int = 7, label: str = "Y", min_separation: float = 1.5):
        rng = np.random.default_rng(seed)
        spins = []
        while len(spins) < n:
            direction = rng.normal(size=3)
            direction /= np.linalg.norm(direction)
            pos = direction * rng.uniform(3.0, 9.0)
            if all(np.linalg.norm(pos - s.position) > min_separation for s in spins):
                spins.append(make_spin(len(spins), pos, label))
        return spins

    return _make
