"""
Crystal definition documents (YAML).

Schema (see docs/crystal_format.md):
    name: free text
    lattice_vectors: [[ax, ay, az], [bx, by, bz], [cx, cy, cz]]   # Å
      or cell: {a, b, c, alpha, beta, gamma}                       # Å, degrees
    symmetry: ["x,y,z", "-x,y,-z+1/2", ...]    # optional, default identity
    centering: [[0,0,0], [0.5,0.5,0]]           # optional
    basis: [[label, fx, fy, fz], ...]           # asymmetric unit when symmetry is given
    species: [{label, gamma_mhz_per_t | magnetic_moment_nm, spin, abundance}, ...]
"""
import math
import re
from fractions import Fraction
from pathlib import Path
from typing import Any, Optional

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from app.models.constants import gamma_from_moment
from app.schemas.documents import DocumentError, compose_yaml, locate_line, validate_document

Vector3 = tuple[float, float, float]

# Periodic tolerance (fractional units) for merging symmetry images
_MERGE_TOL = 1e-4

_TERM = re.compile(r"([+-]?)(\d+(?:\.\d+)?(?:/\d+)?)?\*?([xyz])?")


class CrystalDefinitionError(DocumentError):
    """Malformed crystal document, unknown element label or unsupported species."""


class SpinSpecies(BaseModel):
    """Isotope entry of the species table."""

    model_config = ConfigDict(frozen=True)

    label: str
    gamma_mhz_per_t: float = 0.0
    spin: float = 0.5
    abundance: float = Field(ge=0.0, le=1.0)

    @model_validator(mode="before")
    @classmethod
    def from_row_or_moment(cls, data: Any) -> Any:
        """Accept table rows [label, gamma, spin, abundance] and magnetic moments in μ_N."""
        if isinstance(data, (list, tuple)):
            if len(data) != 4:
                raise ValueError("species row must be [label, gamma_mhz_per_t, spin, abundance]")
            label, gamma, spin, abundance = data
            return {"label": label, "gamma_mhz_per_t": gamma, "spin": spin, "abundance": abundance}
        if isinstance(data, dict) and "magnetic_moment_nm" in data:
            data = dict(data)
            moment = data.pop("magnetic_moment_nm")
            spin = float(data.get("spin", 0.5))
            if spin > 0:
                data.setdefault("gamma_mhz_per_t", gamma_from_moment(float(moment), spin))
        return data

    @model_validator(mode="after")
    def check_spin(self) -> "SpinSpecies":
        if self.spin not in (0.0, 0.5):
            raise ValueError(f"species {self.label}: only spin-1/2 nuclei are supported (got I={self.spin})")
        if self.spin == 0.0 and self.abundance > 0.0:
            raise ValueError(f"species {self.label}: spinless species must have abundance 0")
        return self

    @property
    def is_spin_active(self) -> bool:
        return self.spin == 0.5 and self.abundance > 0.0


class BasisSite(BaseModel):
    """One basis atom: element label plus fractional coordinate in [0, 1)."""

    model_config = ConfigDict(frozen=True)

    label: str
    frac: Vector3

    @model_validator(mode="before")
    @classmethod
    def from_row(cls, data: Any) -> Any:
        if isinstance(data, (list, tuple)):
            if len(data) != 4:
                raise ValueError("basis row must be [label, fx, fy, fz]")
            return {"label": data[0], "frac": tuple(data[1:])}
        return data


class CrystalDefinition(BaseModel):
    """Validated crystal: lattice vectors (Å, rows), full basis, species table."""

    model_config = ConfigDict(frozen=True)

    name: str = ""
    lattice_vectors: tuple[Vector3, Vector3, Vector3]
    basis_sites: tuple[BasisSite, ...]
    species_table: dict[str, SpinSpecies]

    @field_validator("lattice_vectors")
    @classmethod
    def check_volume(cls, v):
        volume = float(np.linalg.det(np.asarray(v, dtype=float)))
        if not math.isfinite(volume) or abs(volume) < 1e-9:
            raise ValueError("lattice vectors are linearly dependent (cell volume is zero)")
        return v

    @field_validator("basis_sites")
    @classmethod
    def check_fractions(cls, v):
        if not v:
            raise ValueError("basis must contain at least one site")
        for site in v:
            if any(not (0.0 <= f < 1.0) for f in site.frac):
                raise ValueError(f"fractional coordinate {site.frac} of {site.label} outside [0, 1)")
        return v

    @model_validator(mode="after")
    def check_labels(self) -> "CrystalDefinition":
        for site in self.basis_sites:
            if site.label not in self.species_table:
                raise ValueError(f"unknown element label {site.label!r} (not in species table)")
        for key, species in self.species_table.items():
            if key != species.label:
                raise ValueError(f"species table key {key!r} does not match label {species.label!r}")
        return self

    @property
    def lattice_matrix(self) -> np.ndarray:
        """3×3 array whose rows are the lattice vectors in Å."""
        return np.asarray(self.lattice_vectors, dtype=float)

    @property
    def cell_volume(self) -> float:
        return abs(float(np.linalg.det(self.lattice_matrix)))

    def sites_of(self, label: str) -> list[int]:
        return [i for i, s in enumerate(self.basis_sites) if s.label == label]

    def with_species_overrides(self, overrides: dict[str, dict[str, Any]]) -> "CrystalDefinition":
        """Copy with some species fields replaced, e.g. {"Si": {"abundance": 0.0}}."""
        if not overrides:
            return self
        table = dict(self.species_table)
        for label, fields in overrides.items():
            if label not in table:
                raise CrystalDefinitionError(f"species override for unknown label {label!r}")
            table[label] = SpinSpecies.model_validate({**table[label].model_dump(), **fields})
        return self.model_copy(update={"species_table": table})


class CellParameters(BaseModel):
    a: float = Field(gt=0)
    b: float = Field(gt=0)
    c: float = Field(gt=0)
    alpha: float = 90.0
    beta: float = 90.0
    gamma: float = 90.0

    def lattice_vectors(self) -> tuple[Vector3, Vector3, Vector3]:
        """Standard setting: a along x, b in the xy plane."""
        al, be, ga = (math.radians(x) for x in (self.alpha, self.beta, self.gamma))
        ax = (self.a, 0.0, 0.0)
        bx = (self.b * math.cos(ga), self.b * math.sin(ga), 0.0)
        cx_ = self.c * math.cos(be)
        cy_ = self.c * (math.cos(al) - math.cos(be) * math.cos(ga)) / math.sin(ga)
        cz_sq = self.c**2 - cx_**2 - cy_**2
        if cz_sq <= 0:
            raise ValueError("cell angles do not describe a valid cell")
        return ax, bx, (cx_, cy_, math.sqrt(cz_sq))


class CrystalDocument(BaseModel):
    """File-level schema; `to_definition()` expands symmetry into the full basis."""

    model_config = ConfigDict(extra="forbid")

    name: str = ""
    lattice_vectors: Optional[tuple[Vector3, Vector3, Vector3]] = None
    cell: Optional[CellParameters] = None
    symmetry: list[str] = ["x,y,z"]
    centering: list[Vector3] = [(0.0, 0.0, 0.0)]
    basis: list[BasisSite]
    species: list[SpinSpecies]

    @model_validator(mode="after")
    def one_cell_source(self) -> "CrystalDocument":
        if (self.lattice_vectors is None) == (self.cell is None):
            raise ValueError("give exactly one of lattice_vectors or cell")
        return self

    @field_validator("symmetry")
    @classmethod
    def check_symmetry(cls, v):
        for op in v:
            parse_symmetry_operation(op)
        return v


def parse_symmetry_operation(text: str) -> tuple[np.ndarray, np.ndarray]:
    """Parse an operation like "-x+1/2, y, -z" into (rotation 3×3, translation 3)."""
    parts = text.replace(" ", "").lower().split(",")
    if len(parts) != 3:
        raise ValueError(f"symmetry operation {text!r} must have three components")
    rotation = np.zeros((3, 3))
    translation = np.zeros(3)
    for row, expr in enumerate(parts):
        consumed = ""
        for m in _TERM.finditer(expr):
            token = m.group(0)
            if not token:
                continue
            sign_str, number, var = m.groups()
            if number is None and var is None:
                raise ValueError(f"dangling sign in symmetry operation {text!r}")
            sign = -1.0 if sign_str == "-" else 1.0
            coef = float(Fraction(number)) if number else 1.0
            if var:
                rotation[row, "xyz".index(var)] += sign * coef
            else:
                translation[row] += sign * coef
            consumed += token
        if not expr or consumed != expr:
            raise ValueError(f"cannot parse symmetry component {expr!r} in {text!r}")
    return rotation, translation


def _wrap(frac: np.ndarray) -> np.ndarray:
    wrapped = np.mod(frac, 1.0)
    wrapped[np.isclose(wrapped, 1.0, atol=1e-9)] = 0.0
    return wrapped


def expand_basis(
    asymmetric: list[BasisSite], symmetry: list[str], centering: list[Vector3]
) -> tuple[BasisSite, ...]:
    """Apply symmetry operations and centring translations; merge coincident images."""
    ops = [parse_symmetry_operation(op) for op in symmetry]
    shifts = [np.asarray(c, dtype=float) for c in centering]
    sites: list[BasisSite] = []
    placed: list[tuple[str, np.ndarray]] = []
    for site in asymmetric:
        base = np.asarray(site.frac, dtype=float)
        for rotation, translation in ops:
            for shift in shifts:
                frac = _wrap(rotation @ base + translation + shift)
                duplicate = False
                for label, other in placed:
                    delta = frac - other
                    delta -= np.round(delta)
                    if np.all(np.abs(delta) < _MERGE_TOL):
                        if label != site.label:
                            raise CrystalDefinitionError(
                                f"sites {label} and {site.label} coincide at {tuple(frac)}"
                            )
                        duplicate = True
                        break
                if duplicate:
                    continue
                placed.append((site.label, frac))
                sites.append(BasisSite(label=site.label, frac=tuple(float(x) for x in frac)))
    return tuple(sites)


def _definition_from_document(doc: CrystalDocument, root: yaml.Node | None) -> CrystalDefinition:
    table: dict[str, SpinSpecies] = {}
    for i, species in enumerate(doc.species):
        if species.label in table:
            raise CrystalDefinitionError(
                f"duplicate species label {species.label!r}",
                line=locate_line(root, ("species", i)),
                field_path=f"species.{i}",
            )
        table[species.label] = species
    for i, site in enumerate(doc.basis):
        if site.label not in table:
            raise CrystalDefinitionError(
                f"unknown element label {site.label!r}",
                line=locate_line(root, ("basis", i)),
                field_path=f"basis.{i}",
            )
    vectors = doc.lattice_vectors if doc.lattice_vectors is not None else doc.cell.lattice_vectors()
    basis = expand_basis(doc.basis, doc.symmetry, doc.centering)
    try:
        return CrystalDefinition(
            name=doc.name, lattice_vectors=vectors, basis_sites=basis, species_table=table
        )
    except ValueError as e:
        raise CrystalDefinitionError(str(e)) from e


def load_crystal_definition(source: str) -> CrystalDefinition:
    """
    Parse and validate a crystal definition document (YAML text).
    Raises CrystalDefinitionError with the offending line on malformed input,
    unknown element labels or non-spin-1/2 species.
    """
    data, root = compose_yaml(source, CrystalDefinitionError)
    doc = validate_document(data, root, CrystalDocument, CrystalDefinitionError)
    return _definition_from_document(doc, root)


def load_crystal_file(path: Path | str) -> CrystalDefinition:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise CrystalDefinitionError(f"cannot read crystal file {path}: {e}") from e
    return load_crystal_definition(text)


def dump_crystal_definition(definition: CrystalDefinition) -> str:
    """Serialize a definition as an already-expanded document (identity symmetry)."""
    doc = {
        "name": definition.name,
        "lattice_vectors": [list(v) for v in definition.lattice_vectors],
        "basis": [[s.label, *s.frac] for s in definition.basis_sites],
        "species": [s.model_dump() for s in definition.species_table.values()],
    }
    return yaml.safe_dump(doc, sort_keys=False)
