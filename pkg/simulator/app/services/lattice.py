"""
Lattice builder: crystal definition -> supercell around the defect -> isotope assignment.

Positions are stored relative to the defect (Å). Every lattice site is kept,
spinless ones included, so site indexing does not depend on isotope draws;
`BathLattice.spins` returns the spin-active subset.
"""
import logging
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy import stats
from scipy.spatial import cKDTree

from app.schemas.crystal import CrystalDefinition, SpinSpecies

logger = logging.getLogger(__name__)

MIN_SITE_SEPARATION = 0.1  # Å
DEFAULT_DEFECT_LABEL = "Y"


class LatticeError(ValueError):
    """Raised for invalid supercell requests (extent, defect site, overrides)."""


@dataclass(frozen=True)
class BathSpin:
    """One lattice site of the bath. `active` marks a spin-carrying isotope."""

    index: int
    species: SpinSpecies
    position: np.ndarray = field(compare=False)
    cell: tuple[int, int, int]
    basis_index: int
    active: bool

    @property
    def label(self) -> str:
        return self.species.label

    @property
    def distance(self) -> float:
        return float(np.linalg.norm(self.position))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, BathSpin):
            return NotImplemented
        return (
            self.index == other.index
            and self.species == other.species
            and self.cell == other.cell
            and self.basis_index == other.basis_index
            and self.active == other.active
            and np.array_equal(self.position, other.position)
        )

    def __hash__(self) -> int:
        return hash((self.index, self.cell, self.basis_index, self.active))


@dataclass(frozen=True, eq=False)
class BathLattice:
    """Immutable supercell centred on the defect; safe to share between readers."""

    definition: CrystalDefinition
    sites: tuple[BathSpin, ...]
    defect_position: np.ndarray
    defect_site_index: int
    box_extent: tuple[float, float, float]
    seed: int

    @cached_property
    def spins(self) -> tuple[BathSpin, ...]:
        """Spin-active sites only, in site order."""
        return tuple(s for s in self.sites if s.active)

    @cached_property
    def positions(self) -> np.ndarray:
        out = np.array([s.position for s in self.sites], dtype=float).reshape(-1, 3)
        out.setflags(write=False)
        return out

    def count(self, label: str, active_only: bool = True) -> int:
        pool = self.spins if active_only else self.sites
        return sum(1 for s in pool if s.label == label)

    def same_contents(self, other: "BathLattice") -> bool:
        """Bit-level comparison of every site (positions, isotopes, indexing)."""
        return (
            self.defect_site_index == other.defect_site_index
            and self.box_extent == other.box_extent
            and self.seed == other.seed
            and np.array_equal(self.defect_position, other.defect_position)
            and self.sites == other.sites
        )


def _zigzag(n: int) -> int:
    return 2 * n if n >= 0 else -2 * n - 1


def site_uniform(seed: int, cell: tuple[int, int, int], basis_index: int) -> float:
    """
    One uniform draw for a lattice site from a counter-based generator keyed by
    the seed; the counter is the site's (cell, basis) key, so growing the box
    never changes the draw of an existing site.
    """
    counter = [_zigzag(cell[0]), _zigzag(cell[1]), _zigzag(cell[2]), basis_index]
    bitgen = np.random.Philox(key=seed & 0xFFFFFFFFFFFFFFFF, counter=counter)
    return float(np.random.Generator(bitgen).random())


def build_supercell(
    definition: CrystalDefinition,
    extent: Sequence[float],
    defect_site_index: int,
    seed: int,
    defect_label: str = DEFAULT_DEFECT_LABEL,
) -> BathLattice:
    """
    Replicate the basis over an axis-aligned box (extent in nm) centred on the
    defect, drop the defect's own nucleus and assign isotopes per site.
    Species with abundance 1 are always active, 0 never, otherwise one seeded draw.
    """
    extent_arr = np.asarray(extent, dtype=float)
    if extent_arr.shape != (3,) or not np.all(np.isfinite(extent_arr)) or np.any(extent_arr <= 0):
        raise LatticeError(f"box extent must be three positive lengths in nm, got {extent!r}")
    n_basis = len(definition.basis_sites)
    if not 0 <= defect_site_index < n_basis:
        raise LatticeError(f"defect site index {defect_site_index} out of range (basis has {n_basis} sites)")
    if definition.basis_sites[defect_site_index].label != defect_label:
        raise LatticeError(
            f"defect site {defect_site_index} is {definition.basis_sites[defect_site_index].label}, "
            f"not a {defect_label} site"
        )

    lattice = definition.lattice_matrix
    fracs = np.array([s.frac for s in definition.basis_sites], dtype=float)
    defect_abs = fracs[defect_site_index] @ lattice
    half = extent_arr * 10.0 / 2.0

    signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], dtype=float)
    corner_fracs = (defect_abs + signs * half) @ np.linalg.inv(lattice)
    lo = np.floor(corner_fracs.min(axis=0)).astype(int) - 1
    hi = np.ceil(corner_fracs.max(axis=0)).astype(int) + 1

    sites: list[BathSpin] = []
    for i in range(lo[0], hi[0] + 1):
        for j in range(lo[1], hi[1] + 1):
            for k in range(lo[2], hi[2] + 1):
                cell = (i, j, k)
                origin = np.array(cell, dtype=float) @ lattice
                for b, basis_site in enumerate(definition.basis_sites):
                    if cell == (0, 0, 0) and b == defect_site_index:
                        continue
                    rel = origin + fracs[b] @ lattice - defect_abs
                    if np.any(np.abs(rel) > half + 1e-9):
                        continue
                    species = definition.species_table[basis_site.label]
                    sites.append(
                        BathSpin(
                            index=len(sites),
                            species=species,
                            position=rel,
                            cell=cell,
                            basis_index=b,
                            active=_is_active(species, seed, cell, b),
                        )
                    )

    _check_separation(sites)
    lat = BathLattice(
        definition=definition,
        sites=tuple(sites),
        defect_position=defect_abs,
        defect_site_index=defect_site_index,
        box_extent=tuple(float(x) for x in extent_arr),
        seed=seed,
    )
    logger.info(
        f"Built supercell {tuple(extent_arr)} nm: {len(lat.sites)} sites, {len(lat.spins)} active spins (seed={seed})"
    )
    return lat


def _is_active(species: SpinSpecies, seed: int, cell: tuple[int, int, int], basis_index: int) -> bool:
    if not species.is_spin_active:
        return False
    if species.abundance >= 1.0:
        return True
    return site_uniform(seed, cell, basis_index) < species.abundance


def _check_separation(sites: Sequence[BathSpin]) -> None:
    if len(sites) < 2:
        return
    positions = np.array([s.position for s in sites])
    close = cKDTree(positions).query_pairs(MIN_SITE_SEPARATION)
    if close:
        i, j = sorted(close)[0]
        raise LatticeError(
            f"sites {sites[i].label}{sites[i].cell} and {sites[j].label}{sites[j].cell} closer than {MIN_SITE_SEPARATION} Å"
        )
    if np.any(np.linalg.norm(positions, axis=1) <= MIN_SITE_SEPARATION):
        raise LatticeError("a bath site coincides with the defect")


def _distance_key(spin: BathSpin) -> tuple[float, float, float, float]:
    x, y, z = (float(c) for c in spin.position)
    return round(spin.distance, 9), x, y, z


def sites_within(
    lat: BathLattice,
    radius: float,
    species_filter: Optional[str] = None,
    active_only: bool = True,
) -> list[BathSpin]:
    """
    Bath sites with |position| <= radius (Å), nearest first; ties broken
    lexicographically by position. `active_only=False` includes sites that
    did not draw a spin-carrying isotope.
    """
    if radius < 0:
        raise LatticeError(f"radius must be non-negative, got {radius}")
    pool: Iterable[BathSpin] = lat.spins if active_only else lat.sites
    hits = [
        s for s in pool
        if (species_filter is None or s.label == species_filter) and s.distance <= radius
    ]
    return sorted(hits, key=_distance_key)


def occupancy_distribution(n_sites: int, abundance: float) -> list[float]:
    """Binomial P(k occupied) for k = 0..n_sites."""
    if n_sites < 0:
        raise LatticeError(f"n_sites must be >= 0, got {n_sites}")
    if not 0.0 <= abundance <= 1.0:
        raise LatticeError(f"abundance must be in [0, 1], got {abundance}")
    pmf = stats.binom.pmf(np.arange(n_sites + 1), n_sites, abundance)
    return [float(p) for p in pmf]


def probability_any(n_sites: int, abundance: float) -> float:
    """P(at least one of n_sites occupied)."""
    return 1.0 - occupancy_distribution(n_sites, abundance)[0]


# ─── Proximal-spin overrides ─────────────────────────────────────────────


def _with_sites(lat: BathLattice, sites: list[BathSpin]) -> BathLattice:
    reindexed = tuple(replace(s, index=i) for i, s in enumerate(sites))
    return replace(lat, sites=reindexed)


def force_spin_at_distance(
    lat: BathLattice, label: str, distance: float, tolerance: float = 0.5
) -> tuple[BathLattice, BathSpin]:
    """Activate the `label` lattice site whose distance to the defect is closest to `distance` (Å)."""
    candidates = [s for s in lat.sites if s.label == label]
    if not candidates:
        raise LatticeError(f"no {label} sites in lattice")
    best = min(candidates, key=lambda s: (abs(s.distance - distance), _distance_key(s)))
    if abs(best.distance - distance) > tolerance:
        raise LatticeError(
            f"closest {label} site is at {best.distance:.3f} Å, more than {tolerance} Å from {distance} Å"
        )
    species = lat.definition.species_table[label]
    if species.spin != 0.5:
        raise LatticeError(f"species {label} carries no nuclear spin")
    sites = list(lat.sites)
    sites[best.index] = replace(best, active=True)
    logger.info(f"Forced {label} spin at {best.distance:.3f} Å (site {best.index})")
    return _with_sites(lat, sites), sites[best.index]


def place_spin(lat: BathLattice, label: str, position: Sequence[float]) -> tuple[BathLattice, BathSpin]:
    """Put an active spin at an explicit defect-relative position, replacing any site within 0.1 Å."""
    pos = np.asarray(position, dtype=float)
    if pos.shape != (3,) or np.linalg.norm(pos) <= MIN_SITE_SEPARATION:
        raise LatticeError(f"invalid spin position {position!r}")
    if label not in lat.definition.species_table:
        raise LatticeError(f"unknown species {label!r}")
    species = lat.definition.species_table[label]
    if species.spin != 0.5:
        raise LatticeError(f"species {label} carries no nuclear spin")
    kept = [s for s in lat.sites if np.linalg.norm(s.position - pos) > MIN_SITE_SEPARATION]
    new = BathSpin(index=len(kept), species=species, position=pos, cell=(0, 0, 0), basis_index=-1, active=True)
    updated = _with_sites(lat, kept + [new])
    return updated, updated.sites[-1]


def clear_spins_within(lat: BathLattice, label: str, radius: float) -> BathLattice:
    """Deactivate every `label` spin closer than `radius` (Å) to the defect."""
    sites = [
        replace(s, active=False) if (s.label == label and s.active and s.distance < radius) else s
        for s in lat.sites
    ]
    cleared = sum(1 for a, b in zip(lat.sites, sites) if a.active != b.active)
    if cleared:
        logger.info(f"Cleared {cleared} {label} spins within {radius} Å")
    return _with_sites(lat, sites)
