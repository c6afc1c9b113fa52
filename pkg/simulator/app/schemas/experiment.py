"""
Experiment configuration documents (YAML).

Every field has a default so an empty document is a valid run of the
reference setup: Ce3+ in Y2SiO5 at 0.097 T, 13x5x6 nm box, CCE-2 Hahn echo.
"""
import hashlib
import json
from pathlib import Path
from typing import Any, Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from app.config import PROJECT_ROOT
from app.schemas.documents import DocumentError, compose_yaml, validate_document
from app.services.hamiltonian import DEFAULT_G_MATRIX

Vector3 = tuple[float, float, float]
Matrix3 = tuple[Vector3, Vector3, Vector3]

DEFAULT_CRYSTAL = Path("docs/crystals/yso.yaml")
EXPERIMENTS = ("hahn_echo", "cpmg_scan", "fid", "spectrum", "occupancy", "estimate_t2n")


class ConfigError(DocumentError):
    """Invalid experiment configuration; `field_path` names the offending field."""


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class FieldConfig(_Section):
    magnitude_t: float = Field(default=0.097, ge=0.0)
    direction: Vector3 = (0.0, 0.0, 1.0)

    @field_validator("direction")
    @classmethod
    def non_zero(cls, v):
        if np.linalg.norm(v) == 0:
            raise ValueError("field direction must be non-zero")
        return v


class TauGrid(_Section):
    """τ grid in µs: explicit `values`, or `num` points from `start` to `stop` inclusive."""

    start: float = Field(default=0.0, ge=0.0)
    stop: float = Field(default=40.0, gt=0.0)
    num: int = Field(default=401, ge=2)
    values: Optional[list[float]] = None

    @model_validator(mode="after")
    def check_grid(self) -> "TauGrid":
        if self.values is not None:
            v = np.asarray(self.values, dtype=float)
            if len(v) == 0 or np.any(v < 0) or np.any(np.diff(v) <= 0):
                raise ValueError("τ values must be non-negative and strictly increasing")
        elif self.stop <= self.start:
            raise ValueError("τ stop must exceed start")
        return self

    def array(self) -> np.ndarray:
        if self.values is not None:
            return np.asarray(self.values, dtype=float)
        return np.linspace(self.start, self.stop, self.num)


class SequenceConfig(_Section):
    kind: Literal["FID", "HAHN", "CPMG"] = "HAHN"
    n_pulses: int = Field(default=1, ge=0)
    tau: TauGrid = TauGrid()
    readout_phase: Literal["pi/2", "3pi/2"] = "3pi/2"

    @model_validator(mode="after")
    def consistent(self) -> "SequenceConfig":
        if self.kind == "FID" and self.n_pulses != 0:
            raise ValueError("FID takes n_pulses: 0")
        if self.kind == "HAHN" and self.n_pulses != 1:
            raise ValueError("HAHN takes n_pulses: 1")
        if self.kind == "CPMG" and self.n_pulses < 1:
            raise ValueError("CPMG needs n_pulses >= 1")
        return self


class CpmgScanConfig(_Section):
    n_values: list[int] = [1, 2, 5]
    tau: TauGrid = TauGrid(start=0.3, stop=0.9, num=301)
    reference: bool = True  # also run without the proximal spins and write the difference

    @field_validator("n_values")
    @classmethod
    def positive(cls, v):
        if not v or any(n < 1 for n in v):
            raise ValueError("n_values must be a non-empty list of N >= 1")
        return v


class CCEConfig(_Section):
    order: int = 2
    distance_cutoff: Optional[float] = Field(default=8.0, ge=0.0)  # Å
    coupling_cutoff_hz: Optional[float] = Field(default=None, ge=0.0)
    bath_radius_nm: Optional[float] = Field(default=6.5, gt=0.0)
    interacting: bool = True

    @field_validator("order")
    @classmethod
    def supported(cls, v):
        if v not in (1, 2, 3, 4):
            raise ValueError("CCE order must be 1, 2, 3 or 4")
        return v


class LindbladConfig(_Section):
    """Dissipative channel on the first forced proximal spin."""

    enabled: bool = False
    gamma1_khz: float = Field(default=64.0, ge=0.0)
    gamma2_khz: float = Field(default=64.0, ge=0.0)


class ProximalSpin(_Section):
    """Force a spin at a distance (nearest matching lattice site) or at an explicit position (Å)."""

    species: str
    distance: Optional[float] = Field(default=None, gt=0.0)
    position: Optional[Vector3] = None
    tolerance: float = Field(default=0.5, gt=0.0)

    @model_validator(mode="after")
    def one_target(self) -> "ProximalSpin":
        if (self.distance is None) == (self.position is None):
            raise ValueError("give exactly one of distance or position")
        return self


class ClearSpins(_Section):
    """Remove every spin of `species` closer than `radius` Å."""

    species: str
    radius: float = Field(gt=0.0)


class EnsembleMember(_Section):
    weight: float = Field(gt=0.0)
    proximal: list[ProximalSpin] = []
    clear: list[ClearSpins] = []


class EnsembleConfig(_Section):
    """Co-located ions sharing the yttrium bath but with their own 29Si environment."""

    members: list[EnsembleMember] = []

    @model_validator(mode="after")
    def weights_sum(self) -> "EnsembleConfig":
        if self.members and abs(sum(m.weight for m in self.members) - 1.0) > 1e-9:
            raise ValueError("ensemble weights must sum to 1")
        return self


class ReadoutConfig(_Section):
    fidelity: float = Field(default=0.10, ge=0.0, le=1.0)
    background: float = Field(default=0.0, ge=0.0)


class AnalysisConfig(_Section):
    echo_exponent: float = Field(default=3.0, gt=0.0)
    free_exponent: bool = False
    fft_window: Literal["rect", "hann"] = "rect"
    fft_axis: Literal["tau", "time"] = "tau"
    zero_pad_factor: int = Field(default=4, ge=1)
    peak_prominence: Optional[float] = None
    dip_threshold: float = 0.9
    dip_window: Optional[tuple[float, float]] = None  # µs


class OccupancyConfig(_Section):
    species: str = "Si"
    radius: float = Field(default=6.0, gt=0.0)  # Å
    nearest_radius: float = Field(default=4.5, gt=0.0)  # Å, first coordination shells
    seeds: int = Field(default=1000, ge=1)


class T2nConfig(_Section):
    species: list[str] = ["Y", "Si"]
    seeds: int = Field(default=10, ge=1)
    box_nm: Optional[Vector3] = None


class OutputConfig(_Section):
    directory: Optional[Path] = None
    format: Literal["csv", "json"] = "csv"
    plots: bool = True


class ExperimentConfig(_Section):
    crystal: Path = DEFAULT_CRYSTAL
    defect_site_index: int = Field(default=0, ge=0)
    box_nm: Vector3 = (13.0, 5.0, 6.0)
    seed: int = Field(default=0, ge=0, lt=2**64)
    field: FieldConfig = FieldConfig()
    g_tensor: Matrix3 = DEFAULT_G_MATRIX
    electron_splitting_mhz: Optional[float] = Field(default=None, gt=0.0)
    sequence: SequenceConfig = SequenceConfig()
    cpmg_scan: CpmgScanConfig = CpmgScanConfig()
    cce: CCEConfig = CCEConfig()
    lindblad: LindbladConfig = LindbladConfig()
    species_overrides: dict[str, dict[str, Any]] = {}
    proximal: list[ProximalSpin] = []
    clear: list[ClearSpins] = []
    ensemble: EnsembleConfig = EnsembleConfig()
    readout: ReadoutConfig = ReadoutConfig()
    t1_envelope_us: Optional[float] = Field(default=None, gt=0.0)
    analysis: AnalysisConfig = AnalysisConfig()
    occupancy: OccupancyConfig = OccupancyConfig()
    t2n: T2nConfig = T2nConfig()
    output: OutputConfig = OutputConfig()

    @field_validator("box_nm")
    @classmethod
    def positive_box(cls, v):
        if any(x <= 0 for x in v):
            raise ValueError("box extent must be positive in every direction")
        return v

    @field_validator("g_tensor")
    @classmethod
    def finite_g(cls, v):
        if not np.all(np.isfinite(np.asarray(v, dtype=float))):
            raise ValueError("g-tensor entries must be finite")
        return v

    @property
    def crystal_path(self) -> Path:
        """Crystal file, relative paths resolved against the project root."""
        return self.crystal if self.crystal.is_absolute() else (PROJECT_ROOT / self.crystal).resolve()

    def config_hash(self) -> str:
        """First 16 hex chars of SHA-256 over the canonical JSON dump."""
        canonical = json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]

    def with_updates(self, **changes: Any) -> "ExperimentConfig":
        """Re-validated copy with top-level fields replaced (CLI overrides)."""
        data = self.model_dump()
        data.update({k: v for k, v in changes.items() if v is not None})
        return validate_document(data, None, ExperimentConfig, ConfigError)


def load_experiment_config(text: str) -> ExperimentConfig:
    data, root = compose_yaml(text, ConfigError)
    return validate_document(data, root, ExperimentConfig, ConfigError)


def load_experiment_file(path: Path | str) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from e
    return load_experiment_config(text)
