"""
Cluster-correlation expansion of the central-spin coherence.

Clusters are cliques of the bath "pair graph" (distance below the pair cutoff,
or dipolar coupling above the coupling threshold). Each cluster's coherence is
evaluated from exact eigendecompositions of its conditional Hamiltonians and
combined as L = Π_C L̃_C with L̃_C = L_C / Π_{C'⊊C} L̃_{C'}.

Work is split into fixed-size chunks per order; chunks are mapped over a
process pool and reduced in chunk order, so results do not depend on the
number of workers.
"""
import itertools
import logging
import time
from collections import deque
from concurrent.futures import ProcessPoolExecutor
from contextlib import nullcontext
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from app.config import get_settings
from app.models.constants import CONSTANTS, KHZ_PER_MHZ, angular
from app.models.curve import ClusterCoherence, CoherenceCurve
from app.services.dynamics import LindbladParams, PulseSequence, noisy_coherence_values
from app.services.hamiltonian import (
    GTensor,
    MagneticField,
    conditional_hamiltonian_stack,
    conditional_hamiltonians,
    hyperfine_vectors,
    joint_conditional_hamiltonians,
    pair_couplings_khz,
)
from app.services.lattice import BathLattice, BathSpin

logger = logging.getLogger(__name__)

SUPPORTED_ORDERS = (1, 2, 3, 4)
VANISHING_COHERENCE = 1e-12
EXACT_MAX_SPINS = 12
DEFAULT_DISTANCE_CUTOFF = 8.0  # Å
DEFAULT_BATH_RADIUS = 65.0  # Å
_BLOCK_ELEMENTS = 2**20

ProgressCallback = Callable[[int, int], None]


class ClusterError(ValueError):
    """Raised for unsupported cluster requests (order, bath size, grid mismatch)."""


# ─── Cluster enumeration ─────────────────────────────────────────────────


@dataclass(frozen=True, eq=False)
class ClusterSet:
    """
    Clusters keyed by order: `clusters[k]` is an (m, k) array of sorted bath
    site indices, rows in lexicographic order.
    """

    clusters: dict[int, np.ndarray]
    max_order: int
    distance_cutoff: Optional[float]
    coupling_cutoff: Optional[float]
    spin_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    def __len__(self) -> int:
        return sum(len(v) for v in self.clusters.values())

    def count(self, order: int) -> int:
        return len(self.clusters.get(order, ()))

    def tuples(self, order: Optional[int] = None) -> list[tuple[int, ...]]:
        """Clusters as tuples: ascending order, then lexicographic."""
        orders = [order] if order is not None else sorted(self.clusters)
        return [tuple(int(i) for i in row) for k in orders for row in self.clusters.get(k, ())]


def _pair_prefactor_hz(gamma_a: np.ndarray, gamma_b: np.ndarray, r_angstrom: np.ndarray) -> np.ndarray:
    """|μ0 γi γj h / 4π r³| in Hz."""
    return np.abs(
        CONSTANTS.mu_0 / (4.0 * np.pi) * (gamma_a * 1e6) * (gamma_b * 1e6) * CONSTANTS.h / (r_angstrom * 1e-10) ** 3
    )


def _admitted_pairs(
    positions: np.ndarray,
    gammas: np.ndarray,
    distance_cutoff: Optional[float],
    coupling_cutoff: Optional[float],
) -> np.ndarray:
    """(p, 2) row-index pairs i < j meeting either criterion, sorted lexicographically."""
    n = len(positions)
    if n < 2:
        return np.zeros((0, 2), dtype=int)
    if coupling_cutoff is not None and coupling_cutoff <= 0.0:
        i, j = np.triu_indices(n, k=1)
        return np.stack([i, j], axis=1)

    tree = cKDTree(positions)
    found = [np.zeros((0, 2), dtype=int)]
    if distance_cutoff is not None and distance_cutoff > 0:
        pairs = tree.query_pairs(distance_cutoff, output_type="ndarray")
        if len(pairs):
            d = np.linalg.norm(positions[pairs[:, 1]] - positions[pairs[:, 0]], axis=1)
            found.append(pairs[d < distance_cutoff])
    if coupling_cutoff is not None:
        g_max = float(np.max(np.abs(gammas))) if n else 0.0
        if g_max > 0:
            # largest separation at which any pair can still exceed the threshold
            r_max = (_pair_prefactor_hz(np.array(g_max), np.array(g_max), np.array(1.0)) / coupling_cutoff) ** (1 / 3)
            pairs = tree.query_pairs(float(r_max), output_type="ndarray")
            if len(pairs):
                d = np.linalg.norm(positions[pairs[:, 1]] - positions[pairs[:, 0]], axis=1)
                strength = _pair_prefactor_hz(gammas[pairs[:, 0]], gammas[pairs[:, 1]], d)
                found.append(pairs[strength > coupling_cutoff])
    pairs = np.concatenate(found)
    pairs = np.sort(pairs, axis=1)
    pairs = np.unique(pairs, axis=0)
    return pairs


def _extend_cliques(cliques: np.ndarray, neighbours: list[np.ndarray]) -> np.ndarray:
    """All (k+1)-cliques obtained by appending a larger, fully connected index."""
    k = cliques.shape[1]
    out: list[tuple[int, ...]] = []
    for row in cliques:
        candidates = neighbours[row[-1]]
        for member in row[:-1]:
            candidates = np.intersect1d(candidates, neighbours[member], assume_unique=True)
        for c in candidates:
            out.append(tuple(row) + (int(c),))
    if not out:
        return np.zeros((0, k + 1), dtype=int)
    return np.array(out, dtype=int)


def enumerate_clusters(
    lat: BathLattice,
    max_order: int,
    distance_cutoff: Optional[float] = DEFAULT_DISTANCE_CUTOFF,
    coupling_cutoff: Optional[float] = None,
    bath_radius: Optional[float] = DEFAULT_BATH_RADIUS,
) -> ClusterSet:
    """
    Enumerate clusters of active bath spins within `bath_radius` (Å).

    Order 1 is every spin; order k holds the k-tuples whose members are
    pairwise connected. A pair is connected when its separation is below
    `distance_cutoff` (Å) or its dipolar prefactor exceeds `coupling_cutoff`
    (Hz); a coupling cutoff of 0 connects every pair.
    """
    if max_order not in SUPPORTED_ORDERS:
        raise ClusterError(f"CCE order must be one of {SUPPORTED_ORDERS}, got {max_order}")
    bath = [s for s in lat.spins if bath_radius is None or s.distance <= bath_radius]
    spin_indices = np.array([s.index for s in bath], dtype=int)
    positions = np.array([s.position for s in bath], dtype=float).reshape(-1, 3)
    gammas = np.array([s.species.gamma_mhz_per_t for s in bath], dtype=float)

    rows: dict[int, np.ndarray] = {1: np.arange(len(bath), dtype=int)[:, None]}
    if max_order >= 2:
        pairs = _admitted_pairs(positions, gammas, distance_cutoff, coupling_cutoff)
        rows[2] = pairs
        if max_order >= 3:
            neighbours: list[list[int]] = [[] for _ in range(len(bath))]
            for i, j in pairs:
                neighbours[i].append(int(j))
            neighbour_arrays = [np.array(sorted(n), dtype=int) for n in neighbours]
            for k in range(3, max_order + 1):
                rows[k] = _extend_cliques(rows[k - 1], neighbour_arrays)

    clusters = {k: spin_indices[r] if len(r) else np.zeros((0, k), dtype=int) for k, r in rows.items()}
    result = ClusterSet(
        clusters=clusters,
        max_order=max_order,
        distance_cutoff=distance_cutoff,
        coupling_cutoff=coupling_cutoff,
        spin_indices=spin_indices,
    )
    counts = ", ".join(f"{k}:{result.count(k)}" for k in sorted(clusters))
    logger.info(f"Enumerated clusters (order {max_order}) over {len(bath)} spins: {counts}")
    return result


# ─── Coherence kernels ───────────────────────────────────────────────────


def sequence_coherence(
    h_plus: np.ndarray,
    h_minus: np.ndarray,
    multiples: Sequence[int],
    taus: np.ndarray,
) -> np.ndarray:
    """
    Batched L_C(τ) = Tr[U₋ U₊†]/d for stacks of conditional Hamiltonians (n, d, d) in kHz.

    U₊ is the propagator string starting with H₊ and alternating at every π
    pulse; U₋ starts with H₋. Segment lengths are `multiples` × τ.
    """
    taus = np.asarray(taus, dtype=float)
    wp, vp = np.linalg.eigh(h_plus)
    wm, vm = np.linalg.eigh(h_minus)
    n, d = wp.shape
    out = np.ones((n, len(taus)), dtype=complex)
    if n == 0 or len(taus) == 0:
        return out
    eig = ((angular(wp), vp, np.conj(np.swapaxes(vp, -1, -2))), (angular(wm), vm, np.conj(np.swapaxes(vm, -1, -2))))
    distinct = sorted(set(multiples))
    block = max(1, _BLOCK_ELEMENTS // (n * d * d))
    for start in range(0, len(taus), block):
        tb = taus[start : start + block]
        props: dict[tuple[int, int], np.ndarray] = {}
        for branch, (w, v, vh) in enumerate(eig):
            for m in distinct:
                phases = np.exp(-1j * w[:, None, :] * (m * tb)[None, :, None])
                props[(branch, m)] = (v[:, None, :, :] * phases[:, :, None, :]) @ vh[:, None, :, :]
        u_plus = u_minus = None
        for s, m in enumerate(multiples):
            a = props[(s % 2, m)]
            b = props[((s + 1) % 2, m)]
            u_plus = a if u_plus is None else a @ u_plus
            u_minus = b if u_minus is None else b @ u_minus
        out[:, start : start + block] = np.einsum("ntij,ntij->nt", u_minus, np.conj(u_plus)) / d
    out[:, taus == 0.0] = 1.0
    return out


def cluster_coherence(
    cluster: Sequence[BathSpin],
    sequence: PulseSequence,
    taus: np.ndarray,
    g: GTensor,
    B: MagneticField,
    interacting: bool = True,
    max_order: int = max(SUPPORTED_ORDERS),
) -> ClusterCoherence:
    """Coherence of one cluster under `sequence` on the τ grid (µs)."""
    _check_grid(taus)
    ordered = sorted(cluster, key=lambda s: s.index)
    h_plus, h_minus = conditional_hamiltonians(ordered, g, B, max_order=max_order, interacting=interacting)
    values = sequence_coherence(h_plus[None], h_minus[None], sequence.segment_multiples, taus)[0]
    return ClusterCoherence(cluster=tuple(s.index for s in ordered), values=values)


def _check_grid(taus: np.ndarray) -> None:
    taus = np.asarray(taus, dtype=float)
    if taus.ndim != 1 or len(taus) == 0:
        raise ClusterError("τ grid must be a non-empty 1-D array")
    if np.any(taus < 0) or np.any(np.diff(taus) <= 0):
        raise ClusterError("τ grid must be non-negative and strictly increasing")


def _correlated_factor(values: np.ndarray, denominator: np.ndarray, vanishing: np.ndarray) -> np.ndarray:
    """L̃ = L / Π L̃_sub, left at 1 where a sub-cluster coherence vanished."""
    safe = np.where(vanishing, 1.0, denominator)
    return np.where(vanishing, 1.0 + 0j, values / safe)


def cce_combine(
    coherences: Sequence[ClusterCoherence],
    cluster_set: ClusterSet,
    sequence: PulseSequence,
    taus: np.ndarray,
) -> CoherenceCurve:
    """
    Combine per-cluster coherences into the CCE product. Every cluster of
    `cluster_set` must be present in `coherences`.
    """
    taus = np.asarray(taus, dtype=float)
    by_cluster = {c.cluster: c.values for c in coherences}
    tildes: dict[tuple[int, ...], np.ndarray] = {}
    total = np.ones(len(taus), dtype=complex)
    flags = np.zeros(len(taus), dtype=bool)
    for cluster in cluster_set.tuples():
        if cluster not in by_cluster:
            raise ClusterError(f"missing coherence for cluster {cluster}")
        denominator = np.ones(len(taus), dtype=complex)
        vanishing = np.zeros(len(taus), dtype=bool)
        for r in range(1, len(cluster)):
            for sub in itertools.combinations(cluster, r):
                if sub in tildes:
                    denominator = denominator * tildes[sub]
                    vanishing |= np.abs(tildes[sub]) < VANISHING_COHERENCE
        tilde = _correlated_factor(by_cluster[cluster], denominator, vanishing)
        tildes[cluster] = tilde
        total = total * tilde
        flags |= vanishing
    return CoherenceCurve(
        taus=taus,
        times=sequence.total_times(taus),
        values=total,
        sequence_kind=sequence.kind.value,
        n_pulses=sequence.n_pulses,
        nonconverged=flags,
    )


def exact_coherence(
    spins: Sequence[BathSpin],
    sequence: PulseSequence,
    taus: np.ndarray,
    g: GTensor,
    B: MagneticField,
    interacting: bool = True,
) -> CoherenceCurve:
    """Coherence on the full joint Hilbert space of up to 12 bath spins, no factorisation."""
    if len(spins) > EXACT_MAX_SPINS:
        raise ClusterError(f"exact evaluation supports at most {EXACT_MAX_SPINS} spins, got {len(spins)}")
    _check_grid(taus)
    taus = np.asarray(taus, dtype=float)
    if spins:
        ordered = sorted(spins, key=lambda s: s.index)
        h_plus, h_minus = joint_conditional_hamiltonians(ordered, g, B, interacting=interacting)
        values = sequence_coherence(h_plus[None], h_minus[None], sequence.segment_multiples, taus)[0]
    else:
        values = np.ones(len(taus), dtype=complex)
    return CoherenceCurve(
        taus=taus,
        times=sequence.total_times(taus),
        values=values,
        sequence_kind=sequence.kind.value,
        n_pulses=sequence.n_pulses,
    )


def ensemble_average(curves: Sequence[CoherenceCurve], weights: Optional[Sequence[float]] = None) -> CoherenceCurve:
    """Pointwise weighted mean of curves on identical grids (equal weights by default)."""
    if not curves:
        raise ClusterError("ensemble needs at least one curve")
    w = np.full(len(curves), 1.0 / len(curves)) if weights is None else np.asarray(weights, dtype=float)
    if w.shape != (len(curves),) or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
        raise ClusterError(f"weights must be {len(curves)} non-negative values summing to 1")
    first = curves[0]
    for c in curves[1:]:
        if not first.same_grid(c):
            raise ClusterError("ensemble curves have different grids or sequences")
    values = sum(wi * c.values for wi, c in zip(w, curves))
    flags = np.logical_or.reduce([c.nonconverged for c in curves])
    return first.with_values(values, nonconverged=flags)


# ─── Chunked, parallel evaluation ────────────────────────────────────────


@dataclass
class ChunkTask:
    """One fixed-size slice of same-order clusters, with everything a worker needs."""

    order: int
    zeeman: np.ndarray  # (n, k, 3) kHz
    hyperfine: np.ndarray  # (n, k, 3) kHz
    couplings: Optional[np.ndarray]  # (n, pairs, 3, 3) kHz
    denominator: np.ndarray  # (n, T)
    vanishing: np.ndarray  # (n, T) bool
    multiples: tuple[int, ...]
    taus: np.ndarray
    keep_factors: bool
    lindblad: Optional[LindbladParams] = None
    target_sites: Optional[np.ndarray] = None  # (n,) position of the noisy spin, -1 if absent


@dataclass
class ChunkResult:
    product: np.ndarray
    vanishing: np.ndarray
    factors: Optional[np.ndarray] = None


def evaluate_chunk(task: ChunkTask) -> ChunkResult:
    """Worker entry point: L_C for every cluster of the chunk, then the correlated factors."""
    h_plus, h_minus = conditional_hamiltonian_stack(task.zeeman, task.hyperfine, task.couplings)
    values = sequence_coherence(h_plus, h_minus, task.multiples, task.taus)
    if task.lindblad is not None and task.target_sites is not None:
        for row in np.flatnonzero(task.target_sites >= 0):
            values[row] = noisy_coherence_values(
                h_plus[row], h_minus[row], int(task.target_sites[row]), task.multiples, task.taus, task.lindblad
            )
    factors = _correlated_factor(values, task.denominator, task.vanishing)
    product = np.ones(len(task.taus), dtype=complex)
    for row in factors:
        product = product * row
    return ChunkResult(
        product=product,
        vanishing=np.any(task.vanishing, axis=0),
        factors=factors if task.keep_factors else None,
    )


class CCEEngine:
    """
    Cluster-correlation expansion over a bath lattice.

    Orders are evaluated in ascending order; factors of lower orders are kept
    for the division of higher ones, the top order is streamed into the product.
    """

    def __init__(
        self,
        g: GTensor,
        B: MagneticField,
        max_order: int = 2,
        distance_cutoff: Optional[float] = DEFAULT_DISTANCE_CUTOFF,
        coupling_cutoff: Optional[float] = None,
        bath_radius: Optional[float] = DEFAULT_BATH_RADIUS,
        interacting: bool = True,
        workers: Optional[int] = None,
        chunk_size: Optional[int] = None,
        lindblad: Optional[LindbladParams] = None,
        progress: Optional[ProgressCallback] = None,
    ):
        if max_order not in SUPPORTED_ORDERS:
            raise ClusterError(f"CCE order must be one of {SUPPORTED_ORDERS}, got {max_order}")
        settings = get_settings()
        self.logger = logging.getLogger(self.__class__.__name__)
        self.g = g
        self.B = B
        self.max_order = max_order
        self.distance_cutoff = distance_cutoff
        self.coupling_cutoff = coupling_cutoff
        self.bath_radius = bath_radius
        self.interacting = interacting
        self.workers = workers if workers and workers > 0 else settings.effective_workers()
        self.chunk_size = chunk_size or settings.cluster_chunk_size
        self.lindblad = lindblad
        self.progress = progress

    def clusters(self, lat: BathLattice) -> ClusterSet:
        return enumerate_clusters(lat, self.max_order, self.distance_cutoff, self.coupling_cutoff, self.bath_radius)

    def _executor(self) -> ProcessPoolExecutor | nullcontext:
        """Process pool for several workers; a single worker evaluates chunks in this process."""
        if self.workers <= 1:
            return nullcontext()
        return ProcessPoolExecutor(max_workers=self.workers)

    def run(
        self,
        lat: BathLattice,
        sequence: PulseSequence,
        taus: np.ndarray,
        config_hash: Optional[str] = None,
    ) -> CoherenceCurve:
        _check_grid(taus)
        taus = np.asarray(taus, dtype=float)
        cluster_set = self.clusters(lat)
        spin_by_index = {s.index: s for s in lat.spins}
        bath = [spin_by_index[int(i)] for i in cluster_set.spin_indices]
        positions = np.array([s.position for s in bath], dtype=float).reshape(-1, 3)
        gammas = np.array([s.species.gamma_mhz_per_t for s in bath], dtype=float)
        hyperfine = hyperfine_vectors(positions, gammas, self.g, self.B)
        zeeman = gammas[:, None] * KHZ_PER_MHZ * self.B.vector[None, :]

        target_row = -1
        if self.lindblad is not None:
            hits = np.flatnonzero(cluster_set.spin_indices == self.lindblad.target_spin_index)
            if len(hits) == 0:
                raise ClusterError(f"noisy target spin {self.lindblad.target_spin_index} is not in the bath")
            target_row = int(hits[0])

        total_clusters = len(cluster_set)
        self.logger.info(
            f"CCE-{self.max_order} {sequence.label}: {len(bath)} spins, {total_clusters} clusters, "
            f"{len(taus)} grid points, {self.workers} workers"
        )
        start = time.monotonic()
        total = np.ones(len(taus), dtype=complex)
        flags = np.zeros(len(taus), dtype=bool)
        store: dict[tuple[int, ...], np.ndarray] = {}
        done = 0

        with self._executor() as pool:
            for order in sorted(cluster_set.clusters):
                site_rows = cluster_set.clusters[order]
                if len(site_rows) == 0:
                    continue
                rows = np.searchsorted(cluster_set.spin_indices, site_rows)
                keep = order < self.max_order
                tasks = self._tasks(
                    rows, order, zeeman, hyperfine, positions, gammas, store, sequence, taus, keep, target_row
                )
                for chunk_rows, result in self._map_ordered(pool, tasks):
                    total = total * result.product
                    flags |= result.vanishing
                    if keep and result.factors is not None:
                        for r, factor in zip(chunk_rows, result.factors):
                            store[tuple(int(x) for x in r)] = factor
                    done += len(chunk_rows)
                    if self.progress is not None:
                        self.progress(done, total_clusters)

        if flags.any():
            self.logger.warning(f"{int(flags.sum())} grid points flagged non-convergent (vanishing sub-cluster coherence)")
        self.logger.info(f"CCE finished in {time.monotonic() - start:.1f}s")
        return CoherenceCurve(
            taus=taus,
            times=sequence.total_times(taus),
            values=total,
            sequence_kind=sequence.kind.value,
            n_pulses=sequence.n_pulses,
            seed=lat.seed,
            config_hash=config_hash,
            nonconverged=flags,
        )

    def _tasks(
        self,
        rows: np.ndarray,
        order: int,
        zeeman: np.ndarray,
        hyperfine: np.ndarray,
        positions: np.ndarray,
        gammas: np.ndarray,
        store: dict[tuple[int, ...], np.ndarray],
        sequence: PulseSequence,
        taus: np.ndarray,
        keep: bool,
        target_row: int,
    ) -> Iterator[tuple[np.ndarray, ChunkTask]]:
        n_taus = len(taus)
        for start in range(0, len(rows), self.chunk_size):
            chunk = rows[start : start + self.chunk_size]
            denominator = np.ones((len(chunk), n_taus), dtype=complex)
            vanishing = np.zeros((len(chunk), n_taus), dtype=bool)
            if order > 1:
                for ci, cluster in enumerate(chunk):
                    members = tuple(int(x) for x in cluster)
                    for r in range(1, order):
                        for sub in itertools.combinations(members, r):
                            factor = store.get(sub)
                            if factor is None:
                                continue
                            denominator[ci] *= factor
                            vanishing[ci] |= np.abs(factor) < VANISHING_COHERENCE
            couplings = None
            if self.interacting and order > 1:
                couplings = pair_couplings_khz(positions[chunk], gammas[chunk])
            target_sites = None
            if self.lindblad is not None:
                match = chunk == target_row
                target_sites = np.where(match.any(axis=1), match.argmax(axis=1), -1)
            yield chunk, ChunkTask(
                order=order,
                zeeman=zeeman[chunk],
                hyperfine=hyperfine[chunk],
                couplings=couplings,
                denominator=denominator,
                vanishing=vanishing,
                multiples=sequence.segment_multiples,
                taus=taus,
                keep_factors=keep,
                lindblad=self.lindblad,
                target_sites=target_sites,
            )

    def _map_ordered(
        self, pool: Optional[ProcessPoolExecutor], tasks: Iterator[tuple[np.ndarray, ChunkTask]]
    ) -> Iterator[tuple[np.ndarray, ChunkResult]]:
        """Bounded-window submit; yields results in submission order."""
        if pool is None:
            for chunk_rows, task in tasks:
                yield chunk_rows, evaluate_chunk(task)
            return
        window = max(2, 2 * self.workers)
        pending: deque = deque()
        for chunk_rows, task in tasks:
            pending.append((chunk_rows, pool.submit(evaluate_chunk, task)))
            if len(pending) >= window:
                rows, fut = pending.popleft()
                yield rows, fut.result()
        while pending:
            rows, fut = pending.popleft()
            yield rows, fut.result()
