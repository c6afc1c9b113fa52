"""
Pulse sequences, balanced readout and dissipative propagation of a noisy target nucleus.

Pulses are ideal and instantaneous; the dissipative channel acts only during
free evolution. Lindblad rates are plain decay rates in kHz (1 kHz = 1e-3 /µs).
"""
import logging
from dataclasses import dataclass, replace
from enum import Enum
from typing import Literal, Optional, Sequence

import numpy as np
from scipy import linalg

from app.models.constants import KHZ_PER_MHZ, angular
from app.models.curve import ClusterCoherence, CoherenceCurve
from app.services.hamiltonian import PAULI, GTensor, MagneticField, conditional_hamiltonians
from app.services.lattice import BathSpin

logger = logging.getLogger(__name__)

EXPM_MAX_DIM = 16
RK4_STEPS_PER_RATE = 50
DENSITY_TOLERANCE = 1e-9


class SequenceError(ValueError):
    """Raised for inconsistent sequence descriptors."""


class DensityMatrixError(ValueError):
    """Raised when an input is not a density operator (Hermitian, unit trace, PSD)."""


class SequenceKind(str, Enum):
    FID = "FID"
    HAHN = "HAHN"
    CPMG = "CPMG"


class ReadoutPhase(str, Enum):
    PI_HALF = "pi/2"
    THREE_PI_HALF = "3pi/2"


@dataclass(frozen=True)
class PulseSequence:
    """
    Ideal decoupling sequence. `tau` is the pulse interval in µs; it may be left
    unset for a sequence used as a template over a τ grid.
    """

    kind: SequenceKind
    n_pulses: int
    tau: Optional[float] = None
    readout_phase: ReadoutPhase = ReadoutPhase.THREE_PI_HALF

    @property
    def segment_multiples(self) -> tuple[int, ...]:
        """Free-evolution segments in units of τ: (1,) for FID, (1, 2, ..., 2, 1) otherwise."""
        if self.kind is SequenceKind.FID:
            return (1,)
        return (1,) + (2,) * (self.n_pulses - 1) + (1,)

    @property
    def segments(self) -> tuple[float, ...]:
        if self.tau is None:
            raise SequenceError("sequence has no τ set")
        return tuple(m * self.tau for m in self.segment_multiples)

    def total_time(self, tau: Optional[float] = None) -> float:
        t = self.tau if tau is None else tau
        if t is None:
            raise SequenceError("sequence has no τ set")
        return float(sum(self.segment_multiples) * t)

    def total_times(self, taus: np.ndarray) -> np.ndarray:
        return sum(self.segment_multiples) * np.asarray(taus, dtype=float)

    def with_tau(self, tau: float) -> "PulseSequence":
        return make_sequence(self.kind, self.n_pulses, tau, self.readout_phase)

    @property
    def label(self) -> str:
        return f"CPMG-{self.n_pulses}" if self.kind is SequenceKind.CPMG else self.kind.value


def make_sequence(
    kind: SequenceKind | str,
    n_pulses: int,
    tau: Optional[float] = None,
    readout_phase: ReadoutPhase | str = ReadoutPhase.THREE_PI_HALF,
) -> PulseSequence:
    """Validated sequence descriptor. HAHN is CPMG with one π pulse; FID has none."""
    try:
        kind = SequenceKind(kind.upper() if isinstance(kind, str) else kind)
        readout_phase = ReadoutPhase(readout_phase)
    except ValueError as e:
        raise SequenceError(str(e)) from e
    if kind is SequenceKind.FID and n_pulses != 0:
        raise SequenceError(f"FID takes no π pulses, got N={n_pulses}")
    if kind is SequenceKind.HAHN and n_pulses != 1:
        raise SequenceError(f"Hahn echo has exactly one π pulse, got N={n_pulses}")
    if kind is SequenceKind.CPMG and n_pulses < 1:
        raise SequenceError(f"CPMG needs N >= 1, got N={n_pulses}")
    if tau is not None and (not np.isfinite(tau) or tau < 0):
        raise SequenceError(f"τ must be >= 0, got {tau}")
    return PulseSequence(kind=kind, n_pulses=n_pulses, tau=tau, readout_phase=readout_phase)


def filter_center_frequency(seq: PulseSequence) -> float:
    """Decoupling filter centre f = 1/(2τ), in kHz."""
    if seq.kind is SequenceKind.FID:
        raise SequenceError("FID has no decoupling filter")
    if not seq.tau:
        raise SequenceError("filter frequency needs τ > 0")
    return KHZ_PER_MHZ / (2.0 * seq.tau)


# ─── Lindblad channel ────────────────────────────────────────────────────


@dataclass(frozen=True)
class LindbladParams:
    """Relaxation (γ₁) and dephasing (γ₂) rates in kHz on one target nucleus."""

    gamma1: float
    gamma2: float
    target_spin_index: int = 0

    def __post_init__(self) -> None:
        if self.gamma1 < 0 or self.gamma2 < 0:
            raise ValueError(f"Lindblad rates must be >= 0, got γ1={self.gamma1}, γ2={self.gamma2}")

    @property
    def is_noiseless(self) -> bool:
        return self.gamma1 == 0.0 and self.gamma2 == 0.0

    @property
    def max_rate_per_us(self) -> float:
        return max(self.gamma1, self.gamma2) * 1e-3


def _embed_pauli(name: str, site: int, k: int) -> np.ndarray:
    return np.kron(np.kron(np.eye(2**site), PAULI[name]), np.eye(2 ** (k - site - 1)))


def lindblad_generator(
    h_left: np.ndarray, h_right: np.ndarray, target_site: int, n_spins: int, params: LindbladParams
) -> np.ndarray:
    """
    Row-major vectorised generator (rad/µs) for X -> e^{-iH_L t} X e^{iH_R t}
    plus the dephasing/relaxation channel on `target_site`.
    """
    d = h_left.shape[0]
    eye = np.eye(d)
    gen = -1j * (np.kron(angular(h_left), eye) - np.kron(eye, angular(h_right).T))
    if not params.is_noiseless:
        identity = np.eye(d * d)
        sx, sy, sz = (_embed_pauli(n, target_site, n_spins) for n in ("x", "y", "z"))
        g1 = params.gamma1 * 1e-3
        g2 = params.gamma2 * 1e-3
        gen = gen + g2 * (np.kron(sz, sz.T) - identity)
        gen = gen + 0.5 * g1 * (np.kron(sx, sx.T) - identity)
        gen = gen + 0.5 * g1 * (np.kron(sy, sy.T) - identity)
    return gen


def _rk4_propagate(gen: np.ndarray, vec: np.ndarray, t: float, rate_per_us: float) -> np.ndarray:
    scale = max(rate_per_us, float(np.linalg.norm(gen, ord=2)), 1e-12)
    n_steps = max(1, int(np.ceil(t * RK4_STEPS_PER_RATE * scale)))
    h = t / n_steps
    y = vec.astype(complex)
    for _ in range(n_steps):
        k1 = gen @ y
        k2 = gen @ (y + 0.5 * h * k1)
        k3 = gen @ (y + 0.5 * h * k2)
        k4 = gen @ (y + h * k3)
        y = y + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    return y


def _check_density(rho: np.ndarray) -> None:
    if rho.ndim != 2 or rho.shape[0] != rho.shape[1]:
        raise DensityMatrixError(f"density operator must be square, got {rho.shape}")
    d = rho.shape[0]
    if d & (d - 1):
        raise DensityMatrixError(f"dimension {d} is not a power of two")
    if np.linalg.norm(rho - rho.conj().T) > DENSITY_TOLERANCE:
        raise DensityMatrixError("density operator is not Hermitian")
    if abs(np.trace(rho) - 1.0) > DENSITY_TOLERANCE:
        raise DensityMatrixError(f"density operator trace {np.trace(rho).real:.12g} != 1")
    if np.linalg.eigvalsh((rho + rho.conj().T) / 2).min() < -DENSITY_TOLERANCE:
        raise DensityMatrixError("density operator is not positive semidefinite")


def lindblad_propagate(
    rho: np.ndarray,
    H: np.ndarray,
    params: LindbladParams,
    t: float,
    method: Literal["auto", "expm", "rk4"] = "auto",
) -> np.ndarray:
    """
    Evolve ρ for t µs under H (kHz) and the channel on spin `params.target_spin_index`
    (site position within ρ's spin register). Matrix exponential of the
    superoperator up to dimension 16, fixed-step RK4 above.
    """
    rho = np.asarray(rho, dtype=complex)
    _check_density(rho)
    d = rho.shape[0]
    n_spins = int(np.log2(d))
    if not 0 <= params.target_spin_index < n_spins:
        raise DensityMatrixError(f"target spin {params.target_spin_index} outside a {n_spins}-spin register")
    if t < 0:
        raise DensityMatrixError(f"propagation time must be >= 0, got {t}")
    H = np.asarray(H, dtype=complex)
    gen = lindblad_generator(H, H, params.target_spin_index, n_spins, params)
    vec = rho.reshape(-1)
    if method == "expm" or (method == "auto" and d <= EXPM_MAX_DIM):
        out = linalg.expm(gen * t) @ vec
    else:
        out = _rk4_propagate(gen, vec, t, params.max_rate_per_us)
    out = out.reshape(d, d)
    return (out + out.conj().T) / 2.0


def noisy_coherence_values(
    h_plus: np.ndarray,
    h_minus: np.ndarray,
    target_site: int,
    multiples: Sequence[int],
    taus: np.ndarray,
    params: LindbladParams,
) -> np.ndarray:
    """
    Electron coherence of one cluster with the channel on `target_site`.

    The electron-conditioned operator X = ρ₋₊ starts at 1/d and evolves with
    H₋ on the left and H₊ on the right, swapping at every π pulse; L = Tr X.
    """
    d = h_plus.shape[0]
    n_spins = int(np.log2(d))
    gens = (
        lindblad_generator(h_minus, h_plus, target_site, n_spins, params),
        lindblad_generator(h_plus, h_minus, target_site, n_spins, params),
    )
    x0 = (np.eye(d, dtype=complex) / d).reshape(-1)
    trace_row = np.eye(d).reshape(-1)
    use_expm = d <= EXPM_MAX_DIM
    values = np.ones(len(taus), dtype=complex)
    for ti, tau in enumerate(np.asarray(taus, dtype=float)):
        if tau == 0.0:
            continue
        if use_expm:
            step = [linalg.expm(g * tau) for g in gens]
            cache: dict[tuple[int, int], np.ndarray] = {}
            x = x0
            for s, m in enumerate(multiples):
                key = (s % 2, m)
                if key not in cache:
                    cache[key] = np.linalg.matrix_power(step[s % 2], m)
                x = cache[key] @ x
        else:
            x = x0
            for s, m in enumerate(multiples):
                x = _rk4_propagate(gens[s % 2], x, m * tau, params.max_rate_per_us)
        values[ti] = trace_row @ x
    return values


def noisy_cluster_coherence(
    cluster: Sequence[BathSpin],
    sequence: PulseSequence,
    taus: np.ndarray,
    params: LindbladParams,
    g: GTensor,
    B: MagneticField,
    interacting: bool = True,
) -> ClusterCoherence:
    """Cluster coherence with the dissipative channel on the bath spin `params.target_spin_index`."""
    indices = [s.index for s in cluster]
    if params.target_spin_index not in indices:
        raise SequenceError(f"target spin {params.target_spin_index} is not in cluster {tuple(indices)}")
    order = sorted(range(len(cluster)), key=lambda i: indices[i])
    ordered = [cluster[i] for i in order]
    h_plus, h_minus = conditional_hamiltonians(ordered, g, B, max_order=len(ordered), interacting=interacting)
    target_site = [s.index for s in ordered].index(params.target_spin_index)
    values = noisy_coherence_values(h_plus, h_minus, target_site, sequence.segment_multiples, taus, params)
    return ClusterCoherence(cluster=tuple(s.index for s in ordered), values=values)


# ─── Readout ─────────────────────────────────────────────────────────────


@dataclass(frozen=True, eq=False)
class ReadoutPair:
    """Fluorescence-proportional traces after 3π/2 and π/2 projection pulses."""

    times: np.ndarray
    signal_3pi2: np.ndarray
    signal_pi2: np.ndarray

    @property
    def difference(self) -> np.ndarray:
        return self.signal_3pi2 - self.signal_pi2


def balanced_readout(
    curve: CoherenceCurve, initialization_fidelity: float, background: float = 0.0
) -> ReadoutPair:
    """Map L to the two projected signals; their difference is fidelity × Re L."""
    if not 0.0 <= initialization_fidelity <= 1.0:
        raise ValueError(f"initialization fidelity must be in [0, 1], got {initialization_fidelity}")
    contrast = initialization_fidelity * curve.values.real
    return ReadoutPair(
        times=np.array(curve.times),
        signal_3pi2=background + 0.5 * (1.0 + contrast),
        signal_pi2=background + 0.5 * (1.0 - contrast),
    )


def apply_t1_envelope(curve: CoherenceCurve, t1_us: float) -> CoherenceCurve:
    """Multiply L by exp(-t/T₁) over the total evolution time."""
    if t1_us <= 0:
        raise ValueError(f"T1 must be > 0, got {t1_us}")
    return replace(curve, values=curve.values * np.exp(-curve.times / t1_us))
