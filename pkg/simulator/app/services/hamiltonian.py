"""
Spin Hamiltonian ingredients for the Ce3+ central spin and its nuclear bath.

All public frequencies are kHz (cycles), fields Tesla, distances Å. Operators
are returned in kHz; propagators convert through `app.models.constants.angular`.

Sign conventions follow the displayed model literally:
    H± = Σ γ B·I  +  Σ I_i·D_ij·I_j  ±  ½ Σ A_i·I_i
with A_i = (μ_B μ0 γ_i / 4π r_i³) n_B·g·(3 n_i n_i − 1) and
D_ij = (μ0 γ_i γ_j h / 4π r_ij³)(3 n_ij n_ij − 1).
"""
import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np
from scipy import sparse

from app.models.constants import ANGSTROM, CONSTANTS, HZ_PER_KHZ, KHZ_PER_MHZ, PhysicalConstants
from app.schemas.crystal import SpinSpecies
from app.services.lattice import BathSpin

logger = logging.getLogger(__name__)

__all__ = [
    "PhysicalConstants",
    "CONSTANTS",
    "DEFAULT_G_MATRIX",
    "GTensor",
    "MagneticField",
    "HyperfineVector",
    "BathCoupling",
    "HamiltonianError",
    "electron_zeeman",
    "electron_splitting",
    "electron_quantization_axis",
    "effective_g_along",
    "nuclear_larmor",
    "nuclear_zeeman_vector",
    "hyperfine_vector",
    "hyperfine_vectors",
    "bath_coupling",
    "coupling_tensors",
    "conditional_hamiltonians",
    "conditional_hamiltonian_stack",
    "joint_conditional_hamiltonians",
]

DEFAULT_G_MATRIX = (
    (0.6514, 0.2629, 0.3004),
    (0.2629, 0.6799, -0.0858),
    (0.3004, -0.0858, 0.9098),
)
MIN_DISTANCE = 0.5  # Å, contact regime excluded
DEFAULT_MAX_ORDER = 4
MAX_DENSE_SPINS = 6

PAULI = {
    "x": np.array([[0, 1], [1, 0]], dtype=complex),
    "y": np.array([[0, -1j], [1j, 0]], dtype=complex),
    "z": np.array([[1, 0], [0, -1]], dtype=complex),
}
_SPIN_HALF = np.stack([PAULI["x"], PAULI["y"], PAULI["z"]]) / 2.0


class HamiltonianError(ValueError):
    """Raised for invalid Hamiltonian inputs (geometry, cluster size, axes)."""


def _frozen_array(values, shape: tuple[int, ...], name: str) -> np.ndarray:
    arr = np.array(values, dtype=float)
    if arr.shape != shape:
        raise HamiltonianError(f"{name} must have shape {shape}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise HamiltonianError(f"{name} has non-finite entries")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class GTensor:
    """Effective g-tensor of the lowest Kramers doublet (dimensionless 3x3)."""

    matrix: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "matrix", _frozen_array(self.matrix, (3, 3), "g-tensor"))

    @classmethod
    def default(cls) -> "GTensor":
        return cls(np.array(DEFAULT_G_MATRIX))

    @classmethod
    def isotropic(cls, g: float) -> "GTensor":
        return cls(g * np.eye(3))


@dataclass(frozen=True, eq=False)
class MagneticField:
    """Static field: magnitude (T) along a unit direction. Any non-zero direction is normalised."""

    magnitude: float
    direction: np.ndarray

    def __post_init__(self) -> None:
        if not np.isfinite(self.magnitude) or self.magnitude < 0:
            raise HamiltonianError(f"field magnitude must be >= 0, got {self.magnitude}")
        d = _frozen_array(self.direction, (3,), "field direction")
        norm = float(np.linalg.norm(d))
        if norm == 0.0:
            raise HamiltonianError("field direction must be non-zero")
        unit = d / norm
        unit.setflags(write=False)
        object.__setattr__(self, "magnitude", float(self.magnitude))
        object.__setattr__(self, "direction", unit)

    @property
    def vector(self) -> np.ndarray:
        return self.magnitude * self.direction


@dataclass(frozen=True, eq=False)
class HyperfineVector:
    spin_index: int
    vector: np.ndarray  # kHz

    @property
    def magnitude(self) -> float:
        return float(np.linalg.norm(self.vector))


@dataclass(frozen=True, eq=False)
class BathCoupling:
    pair: tuple[int, int]
    coupling_tensor: np.ndarray  # Hz

    @property
    def magnitude(self) -> float:
        """Prefactor |μ0 γi γj h / 4π r³| in Hz."""
        return float(np.linalg.norm(self.coupling_tensor) / np.sqrt(6.0))


# ─── Electron ────────────────────────────────────────────────────────────


def _electron_field_vector(g: GTensor, B: MagneticField) -> np.ndarray:
    """h_b = (μ_B/h) Σ_a B_a g_ab, in kHz."""
    return CONSTANTS.mu_B_over_h_mhz_per_t * KHZ_PER_MHZ * (B.vector @ g.matrix)


def electron_zeeman(g: GTensor, B: MagneticField) -> np.ndarray:
    """(μ_B/h) B·g·S with S = σ/2, as a 2x2 operator in kHz."""
    h = _electron_field_vector(g, B)
    op = np.einsum("a,aij->ij", h, _SPIN_HALF)
    return (op + op.conj().T) / 2.0


def electron_splitting(g: GTensor, B: MagneticField, override_mhz: Optional[float] = None) -> float:
    """Electron Zeeman splitting in kHz; `override_mhz` replaces the computed value (calibration)."""
    if override_mhz is not None:
        return float(override_mhz) * KHZ_PER_MHZ
    return float(np.linalg.norm(_electron_field_vector(g, B)))


def electron_quantization_axis(g: GTensor, B: MagneticField) -> np.ndarray:
    """Unit vector of the electron eigenbasis of H_Ce (direction of Bᵀg)."""
    v = B.direction @ g.matrix
    norm = np.linalg.norm(v)
    if norm == 0.0:
        raise HamiltonianError("g-tensor annihilates the field direction")
    return v / norm


def effective_g_along(g: GTensor, n: Sequence[float]) -> float:
    n_arr = np.asarray(n, dtype=float)
    if n_arr.shape != (3,) or abs(np.linalg.norm(n_arr) - 1.0) > 1e-9:
        raise HamiltonianError(f"direction must be a unit 3-vector, got {n!r}")
    return float(np.sqrt(n_arr @ g.matrix @ g.matrix.T @ n_arr))


# ─── Nuclei ──────────────────────────────────────────────────────────────


def nuclear_larmor(species: SpinSpecies, B: MagneticField) -> float:
    """|γ/2π|·B in kHz."""
    return abs(species.gamma_mhz_per_t) * B.magnitude * KHZ_PER_MHZ


def nuclear_zeeman_vector(species: SpinSpecies, B: MagneticField) -> np.ndarray:
    """Signed γ B⃗ in kHz (coefficient of I in the Zeeman term)."""
    return species.gamma_mhz_per_t * KHZ_PER_MHZ * B.vector


def _dipolar_shape(unit: np.ndarray) -> np.ndarray:
    """3 n nᵀ − 1 for a stack of unit vectors (..., 3)."""
    return 3.0 * unit[..., :, None] * unit[..., None, :] - np.eye(3)


def hyperfine_vectors(
    positions: np.ndarray, gammas: np.ndarray, g: GTensor, B: MagneticField
) -> np.ndarray:
    """
    Vectorised hyperfine vectors (M, 3) in kHz for defect-relative positions (M, 3) Å
    and signed γ/2π (M,) MHz/T.
    """
    positions = np.asarray(positions, dtype=float).reshape(-1, 3)
    gammas = np.asarray(gammas, dtype=float).reshape(-1)
    if len(positions) == 0:
        return np.zeros((0, 3))
    r = np.linalg.norm(positions, axis=1)
    if np.any(r <= MIN_DISTANCE):
        raise HamiltonianError(f"nuclear spin within {MIN_DISTANCE} Å of the defect (contact regime)")
    unit = positions / r[:, None]
    # μ0 μ_B / (4π r³): dipole field in T; × γ/2π (Hz/T) → Hz; → kHz
    field_t = CONSTANTS.mu_0 * CONSTANTS.mu_B / (4.0 * np.pi * (r * ANGSTROM) ** 3)
    prefactor = gammas * KHZ_PER_MHZ * field_t  # kHz
    row = B.direction @ g.matrix
    return prefactor[:, None] * np.einsum("a,mab->mb", row, _dipolar_shape(unit))


def hyperfine_vector(spin: BathSpin, g: GTensor, B: MagneticField) -> HyperfineVector:
    vec = hyperfine_vectors(spin.position[None, :], np.array([spin.species.gamma_mhz_per_t]), g, B)[0]
    return HyperfineVector(spin_index=spin.index, vector=vec)


def coupling_tensors(
    pos_a: np.ndarray, pos_b: np.ndarray, gamma_a: np.ndarray, gamma_b: np.ndarray
) -> np.ndarray:
    """Vectorised intra-bath dipolar tensors (n, 3, 3) in Hz."""
    diff = np.asarray(pos_b, dtype=float) - np.asarray(pos_a, dtype=float)
    r = np.asarray(np.linalg.norm(diff, axis=-1))
    if np.any(r <= MIN_DISTANCE):
        raise HamiltonianError(f"nuclear spins closer than {MIN_DISTANCE} Å")
    unit = diff / r[..., None]
    ga = np.asarray(gamma_a, dtype=float) * 1e6
    gb = np.asarray(gamma_b, dtype=float) * 1e6
    prefactor = CONSTANTS.mu_0 / (4.0 * np.pi) * ga * gb * CONSTANTS.h / (r * ANGSTROM) ** 3
    return np.asarray(prefactor)[..., None, None] * _dipolar_shape(unit)


def bath_coupling(i: BathSpin, j: BathSpin) -> BathCoupling:
    if i.index == j.index:
        raise HamiltonianError("bath coupling needs two distinct spins")
    tensor = coupling_tensors(
        i.position, j.position, np.array(i.species.gamma_mhz_per_t), np.array(j.species.gamma_mhz_per_t)
    )
    return BathCoupling(pair=(min(i.index, j.index), max(i.index, j.index)), coupling_tensor=tensor)


# ─── Conditional Hamiltonians ────────────────────────────────────────────


@lru_cache(maxsize=8)
def spin_operators(k: int) -> np.ndarray:
    """I_a for each of k spin-1/2 sites embedded in 2^k dims: shape (k, 3, d, d)."""
    d = 2**k
    ops = np.zeros((k, 3, d, d), dtype=complex)
    for site in range(k):
        left = np.eye(2**site)
        right = np.eye(2 ** (k - site - 1))
        for a in range(3):
            ops[site, a] = np.kron(np.kron(left, _SPIN_HALF[a]), right)
    ops.setflags(write=False)
    return ops


@lru_cache(maxsize=8)
def _pair_operators(k: int) -> tuple[tuple[tuple[int, int], ...], np.ndarray]:
    """I_{i,a} I_{j,b} for i < j: shape (n_pairs, 3, 3, d, d)."""
    ops = spin_operators(k)
    pairs = tuple((i, j) for i in range(k) for j in range(i + 1, k))
    if not pairs:
        return pairs, np.zeros((0, 3, 3, 2**k, 2**k), dtype=complex)
    out = np.einsum("paij,pbjk->pabik", ops[[p[0] for p in pairs]], ops[[p[1] for p in pairs]])
    out.setflags(write=False)
    return pairs, out


def conditional_hamiltonian_stack(
    zeeman: np.ndarray,
    hyperfine: np.ndarray,
    couplings: Optional[np.ndarray] = None,
) -> tuple[np.ndarray, np.ndarray]:
    """
    Batched H± for n clusters of k spins, in kHz.

    zeeman, hyperfine: (n, k, 3) kHz. couplings: (n, n_pairs, 3, 3) kHz in the
    i < j pair order of `_pair_operators(k)`, or None for a non-interacting bath.
    Returns two (n, 2^k, 2^k) stacks.
    """
    zeeman = np.asarray(zeeman, dtype=float)
    hyperfine = np.asarray(hyperfine, dtype=float)
    n, k, _ = zeeman.shape
    if k > MAX_DENSE_SPINS:
        raise HamiltonianError(f"cluster of {k} spins exceeds the dense operator limit ({MAX_DENSE_SPINS})")
    ops = spin_operators(k)
    base = np.einsum("nka,kaij->nij", zeeman, ops)
    if couplings is not None and k > 1:
        _, pair_ops = _pair_operators(k)
        base = base + np.einsum("npab,pabij->nij", couplings, pair_ops)
    half_hf = 0.5 * np.einsum("nka,kaij->nij", hyperfine, ops)
    h_plus = base + half_hf
    h_minus = base - half_hf
    # Symmetrise away rounding so downstream eigh sees exactly Hermitian input
    h_plus = (h_plus + np.conj(np.swapaxes(h_plus, -1, -2))) / 2.0
    h_minus = (h_minus + np.conj(np.swapaxes(h_minus, -1, -2))) / 2.0
    return h_plus, h_minus


def pair_couplings_khz(positions: np.ndarray, gammas: np.ndarray) -> np.ndarray:
    """(n, n_pairs, 3, 3) kHz coupling tensors for clusters given as (n, k, 3) positions and (n, k) γ."""
    positions = np.asarray(positions, dtype=float)
    gammas = np.asarray(gammas, dtype=float)
    k = positions.shape[1]
    pairs, _ = _pair_operators(k)
    if not pairs:
        return np.zeros((positions.shape[0], 0, 3, 3))
    ia = [p[0] for p in pairs]
    ib = [p[1] for p in pairs]
    hz = coupling_tensors(positions[:, ia], positions[:, ib], gammas[:, ia], gammas[:, ib])
    return hz / HZ_PER_KHZ


def conditional_hamiltonians(
    cluster: Sequence[BathSpin],
    g: GTensor,
    B: MagneticField,
    max_order: int = DEFAULT_MAX_ORDER,
    interacting: bool = True,
    hyperfine: Optional[np.ndarray] = None,
) -> tuple[np.ndarray, np.ndarray]:
    """
    H± restricted to `cluster`: nuclear Zeeman (bare field) plus intra-cluster
    dipolar terms, ± half the hyperfine terms. `hyperfine` (k, 3) kHz replaces
    the computed vectors; `interacting=False` drops the intra-bath couplings.
    """
    k = len(cluster)
    if not 1 <= k <= max_order:
        raise HamiltonianError(f"cluster size {k} outside 1..{max_order}")
    positions = np.array([s.position for s in cluster], dtype=float)
    gammas = np.array([s.species.gamma_mhz_per_t for s in cluster], dtype=float)
    zeeman = gammas[:, None] * KHZ_PER_MHZ * B.vector[None, :]
    if hyperfine is None:
        hyperfine = hyperfine_vectors(positions, gammas, g, B)
    hyperfine = np.asarray(hyperfine, dtype=float).reshape(k, 3)
    couplings = pair_couplings_khz(positions[None], gammas[None]) if interacting else None
    h_plus, h_minus = conditional_hamiltonian_stack(zeeman[None], hyperfine[None], couplings)
    return h_plus[0], h_minus[0]


def _embedded(op: np.ndarray, site: int, k: int) -> sparse.csr_matrix:
    return sparse.kron(
        sparse.kron(sparse.identity(2**site, format="csr"), sparse.csr_matrix(op)),
        sparse.identity(2 ** (k - site - 1), format="csr"),
        format="csr",
    )


def joint_conditional_hamiltonians(
    spins: Sequence[BathSpin],
    g: GTensor,
    B: MagneticField,
    interacting: bool = True,
    hyperfine: Optional[np.ndarray] = None,
) -> tuple[np.ndarray, np.ndarray]:
    """
    H± on the full joint Hilbert space of `spins` (no cluster limit), built
    term by term from sparse Kronecker products. Dense (2^k, 2^k) outputs in kHz.
    """
    k = len(spins)
    if k == 0:
        return np.zeros((1, 1), dtype=complex), np.zeros((1, 1), dtype=complex)
    positions = np.array([s.position for s in spins], dtype=float)
    gammas = np.array([s.species.gamma_mhz_per_t for s in spins], dtype=float)
    if hyperfine is None:
        hyperfine = hyperfine_vectors(positions, gammas, g, B)
    hyperfine = np.asarray(hyperfine, dtype=float).reshape(k, 3)
    single = [[_embedded(_SPIN_HALF[a], i, k) for a in range(3)] for i in range(k)]
    d = 2**k
    base = sparse.csr_matrix((d, d), dtype=complex)
    half_hf = sparse.csr_matrix((d, d), dtype=complex)
    for i in range(k):
        zeeman = gammas[i] * KHZ_PER_MHZ * B.vector
        for a in range(3):
            base = base + zeeman[a] * single[i][a]
            half_hf = half_hf + 0.5 * hyperfine[i, a] * single[i][a]
    if interacting and k > 1:
        for i in range(k):
            for j in range(i + 1, k):
                tensor = coupling_tensors(positions[i], positions[j], gammas[i], gammas[j]) / HZ_PER_KHZ
                for a in range(3):
                    for b in range(3):
                        if tensor[a, b] != 0.0:
                            base = base + tensor[a, b] * (single[i][a] @ single[j][b])
    h_plus = (base + half_hf).toarray()
    h_minus = (base - half_hf).toarray()
    return (h_plus + h_plus.conj().T) / 2.0, (h_minus + h_minus.conj().T) / 2.0
