#!/usr/bin/env python3
"""
Print the expanded basis of a crystal definition and the spin-bearing shells
around the defect site.
Usage: uv run python scripts/show_crystal.py [docs/crystals/yso.yaml] [radius_angstrom]
"""
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "simulator"))

from app.schemas.crystal import load_crystal_file
from app.services.lattice import build_supercell, probability_any, sites_within


def main() -> None:
    path = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("docs/crystals/yso.yaml")
    radius = float(sys.argv[2]) if len(sys.argv) > 2 else 6.0
    definition = load_crystal_file(path)
    print(f"{definition.name}: {len(definition.basis_sites)} basis sites, V = {definition.cell_volume:.2f} Å³")
    side = 2 * radius / 10 + 0.4
    lat = build_supercell(definition, (side, side, side), 0, seed=0)
    for label, species in definition.species_table.items():
        if not species.is_spin_active:
            continue
        shell = sites_within(lat, radius, label, active_only=False)
        distances = ", ".join(f"{s.distance:.3f}" for s in shell)
        print(f"{label}: {len(shell)} sites within {radius} Å [{distances}]")
        print(f"  P(any occupied) = {probability_any(len(shell), species.abundance):.3f}")


if __name__ == "__main__":
    main()
