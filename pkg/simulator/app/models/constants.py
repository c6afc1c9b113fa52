"""
Physical constants (CODATA, via scipy.constants) and unit conventions.

Units used across the package:
- frequency: kHz (cycles, not radians)
- time: µs
- distance: Å
- field: T
- gyromagnetic ratio: γ/2π in MHz/T (signed)
"""
import math
from dataclasses import dataclass

import numpy as np
from scipy import constants as _codata


@dataclass(frozen=True)
class PhysicalConstants:
    """Read-only CODATA table. SI units."""

    mu_B: float
    mu_N: float
    mu_0: float
    hbar: float
    h: float

    @property
    def mu_B_over_h_mhz_per_t(self) -> float:
        return self.mu_B / self.h * 1e-6

    @property
    def mu_N_over_h_mhz_per_t(self) -> float:
        return self.mu_N / self.h * 1e-6


CONSTANTS = PhysicalConstants(
    mu_B=_codata.physical_constants["Bohr magneton"][0],
    mu_N=_codata.physical_constants["nuclear magneton"][0],
    mu_0=_codata.mu_0,
    hbar=_codata.hbar,
    h=_codata.h,
)

ANGSTROM = 1e-10
KHZ_PER_MHZ = 1e3
HZ_PER_KHZ = 1e3


def angular(frequency_khz):
    """
    kHz -> rad/µs. The only place the 2π factor enters; every propagator and
    phase in the package goes through here.
    """
    return np.asarray(frequency_khz) * (2.0 * math.pi * 1e-3)


def gamma_from_moment(moment_nm: float, spin: float) -> float:
    """γ/2π in MHz/T from a nuclear magnetic moment in nuclear magnetons."""
    return moment_nm * CONSTANTS.mu_N_over_h_mhz_per_t / spin
