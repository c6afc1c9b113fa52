"""
Coherence value types shared by the engine, dynamics, analysis and runner.
"""
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

BOUND_TOLERANCE = 1e-9


def _readonly(values, dtype) -> np.ndarray:
    arr = np.array(values, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class ClusterCoherence:
    """L_C on a shared τ grid for one bath cluster (sorted site indices)."""

    cluster: tuple[int, ...]
    values: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "cluster", tuple(int(i) for i in self.cluster))
        object.__setattr__(self, "values", _readonly(self.values, complex))


@dataclass(frozen=True, eq=False)
class CoherenceCurve:
    """
    Electron coherence L on a τ grid.

    `taus` is the pulse interval grid (µs), `times` the total evolution time
    (2Nτ, or τ for FID). `nonconverged` flags grid points where the cluster
    expansion hit a vanishing sub-cluster coherence.
    """

    taus: np.ndarray
    times: np.ndarray
    values: np.ndarray
    sequence_kind: str = "HAHN"
    n_pulses: int = 1
    seed: Optional[int] = None
    config_hash: Optional[str] = None
    nonconverged: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        taus = _readonly(self.taus, float)
        times = _readonly(self.times, float)
        values = _readonly(self.values, complex)
        if not (taus.shape == times.shape == values.shape) or taus.ndim != 1:
            raise ValueError(
                f"curve arrays must be 1-D with equal length (taus {taus.shape}, times {times.shape}, values {values.shape})"
            )
        if len(times) > 1 and np.any(np.diff(times) <= 0):
            raise ValueError("curve times must be strictly increasing")
        flags = np.zeros(len(taus), dtype=bool) if self.nonconverged is None else self.nonconverged
        flags = _readonly(flags, bool)
        if flags.shape != taus.shape:
            raise ValueError("nonconverged mask must match the grid")
        object.__setattr__(self, "taus", taus)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "nonconverged", flags)

    @property
    def label(self) -> str:
        if self.sequence_kind == "FID":
            return "FID"
        return f"{self.sequence_kind}-{self.n_pulses}" if self.sequence_kind == "CPMG" else self.sequence_kind

    @property
    def has_nonconverged(self) -> bool:
        return bool(np.any(self.nonconverged))

    def within_bounds(self, tolerance: float = BOUND_TOLERANCE) -> bool:
        return bool(np.all(np.abs(self.values) <= 1.0 + tolerance))

    def same_grid(self, other: "CoherenceCurve") -> bool:
        return (
            self.sequence_kind == other.sequence_kind
            and self.n_pulses == other.n_pulses
            and np.array_equal(self.taus, other.taus)
        )

    def with_values(self, values: np.ndarray, **changes) -> "CoherenceCurve":
        return replace(self, values=values, **changes)
