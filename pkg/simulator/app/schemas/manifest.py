"""
Run manifest: the completion marker of a run directory.

Written last and atomically; a directory without a manifest is an
incomplete run.
"""
from typing import Optional

from pydantic import BaseModel, ConfigDict, Field

MANIFEST_NAME = "manifest.json"


class OutputEntry(BaseModel):
    model_config = ConfigDict(frozen=True)

    sha256: str
    kind: str  # curve, spectrum, readout, table, fit, plot, config, report


class RunManifest(BaseModel):
    model_config = ConfigDict(frozen=True)

    experiment: str
    config_hash: str
    seed: int
    tool_version: str
    wall_time_s: float
    files: dict[str, OutputEntry] = Field(default_factory=dict)
    # output file -> total times (µs) of grid points with a vanishing sub-cluster coherence
    nonconverged: dict[str, list[float]] = Field(default_factory=dict)
    unconverged_fits: list[str] = Field(default_factory=list)
    notes: list[str] = Field(default_factory=list)

    @property
    def has_nonconvergence(self) -> bool:
        return bool(self.nonconverged) or bool(self.unconverged_fits)

    def checksum(self, name: str) -> Optional[str]:
        entry = self.files.get(name)
        return entry.sha256 if entry else None
