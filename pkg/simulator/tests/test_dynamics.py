"""
Tests for pulse sequences, the Lindblad channel and the balanced readout.
"""
import numpy as np
import pytest
from scipy import linalg


def _random_density(d: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    m = rng.normal(size=(d, d)) + 1j * rng.normal(size=(d, d))
    rho = m @ m.conj().T
    return rho / np.trace(rho)


def _random_hamiltonian(d: int, seed: int, scale: float = 80.0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    m = rng.normal(size=(d, d)) + 1j * rng.normal(size=(d, d))
    return scale * (m + m.conj().T) / 2


class TestSequences:
    def test_segment_multiples(self):
        from app.services.dynamics import make_sequence

        assert make_sequence("FID", 0).segment_multiples == (1,)
        assert make_sequence("HAHN", 1).segment_multiples == (1, 1)
        assert make_sequence("CPMG", 5).segment_multiples == (1, 2, 2, 2, 2, 1)

    def test_total_time_is_two_n_tau(self):
        from app.services.dynamics import make_sequence

        seq = make_sequence("cpmg", 5, tau=0.6)
        assert seq.total_time() == pytest.approx(6.0)
        assert np.allclose(seq.total_times(np.array([0.1, 0.2])), [1.0, 2.0])
        assert make_sequence("FID", 0, tau=0.6).total_time() == pytest.approx(0.6)

    def test_segments_and_with_tau(self):
        from app.services.dynamics import SequenceError, make_sequence

        seq = make_sequence("CPMG", 2)
        with pytest.raises(SequenceError):
            _ = seq.segments
        assert seq.with_tau(0.5).segments == (0.5, 1.0, 0.5)
        assert seq.label == "CPMG-2"

    @pytest.mark.parametrize(
        "kind,n,tau",
        [("FID", 1, None), ("HAHN", 2, None), ("CPMG", 0, None), ("CPMG", 1, -0.1), ("XY8", 8, None)],
    )
    def test_inconsistent_descriptors(self, kind, n, tau):
        from app.services.dynamics import SequenceError, make_sequence

        with pytest.raises(SequenceError):
            make_sequence(kind, n, tau)

    def test_filter_frequency(self):
        """Half the Larmor period of 29Si at 0.097 T sets τ ≈ 609 ns."""
        from app.services.dynamics import SequenceError, filter_center_frequency, make_sequence

        assert filter_center_frequency(make_sequence("CPMG", 1, tau=0.609)) == pytest.approx(821.0, rel=1e-3)
        with pytest.raises(SequenceError):
            filter_center_frequency(make_sequence("FID", 0, tau=1.0))


class TestLindbladPropagation:
    def test_trace_hermiticity_positivity(self):
        from app.services.dynamics import LindbladParams, lindblad_propagate

        rho = _random_density(4, seed=1)
        H = _random_hamiltonian(4, seed=2)
        params = LindbladParams(gamma1=64.0, gamma2=64.0, target_spin_index=1)
        for t in (0.1, 1.0, 7.5):
            out = lindblad_propagate(rho, H, params, t)
            assert abs(np.trace(out) - 1.0) < 1e-9
            assert np.linalg.norm(out - out.conj().T) < 1e-12
            assert np.linalg.eigvalsh(out).min() > -1e-9

    def test_zero_rates_is_unitary(self):
        from app.services.dynamics import LindbladParams, lindblad_propagate
        from app.models.constants import angular

        rho = _random_density(4, seed=3)
        H = _random_hamiltonian(4, seed=4)
        t = 2.3
        U = linalg.expm(-1j * angular(1.0) * H * t)
        out = lindblad_propagate(rho, H, LindbladParams(0.0, 0.0, 0), t)
        assert np.allclose(out, U @ rho @ U.conj().T, atol=1e-10)

    def test_imaginary_hamiltonian_terms_drive_rotation(self):
        """H = 100 kHz · S_y for 2.5 µs is a π/2 rotation: |0⟩ -> |+x⟩."""
        from app.services.dynamics import LindbladParams, lindblad_propagate
        from app.services.hamiltonian import PAULI

        rho = np.array([[1.0, 0.0], [0.0, 0.0]], dtype=complex)
        out = lindblad_propagate(rho, 100.0 * PAULI["y"] / 2, LindbladParams(0.0, 0.0), 2.5)
        assert np.allclose(out, np.full((2, 2), 0.5), atol=1e-10)

    def test_dephasing_decay_rate(self):
        """Single spin, H = 0: coherence decays as e^{−2γ₂t}, populations untouched."""
        from app.services.dynamics import LindbladParams, lindblad_propagate

        rho = np.array([[0.7, 0.3 - 0.2j], [0.3 + 0.2j, 0.3]])
        t = 5.0
        out = lindblad_propagate(rho, np.zeros((2, 2)), LindbladParams(gamma1=0.0, gamma2=64.0), t)
        decay = np.exp(-2 * 64.0e-3 * t)
        assert abs(out[0, 1] - rho[0, 1] * decay) < 1e-6
        assert abs(out[0, 0] - 0.7) < 1e-12

    def test_relaxation_decay_rate(self):
        """Single spin, H = 0: population imbalance decays as e^{−2γ₁t}."""
        from app.services.dynamics import LindbladParams, lindblad_propagate

        rho = np.array([[0.9, 0.0], [0.0, 0.1]], dtype=complex)
        t = 4.0
        out = lindblad_propagate(rho, np.zeros((2, 2)), LindbladParams(gamma1=64.0, gamma2=0.0), t)
        imbalance = (out[0, 0] - out[1, 1]).real
        assert abs(imbalance - 0.8 * np.exp(-2 * 64.0e-3 * t)) < 1e-6

    def test_semigroup(self):
        from app.services.dynamics import LindbladParams, lindblad_propagate

        rho = _random_density(4, seed=5)
        H = _random_hamiltonian(4, seed=6)
        params = LindbladParams(30.0, 50.0, 0)
        two_steps = lindblad_propagate(lindblad_propagate(rho, H, params, 0.8), H, params, 1.7)
        one_step = lindblad_propagate(rho, H, params, 2.5)
        assert np.allclose(two_steps, one_step, atol=1e-8)

    def test_rk4_agrees_with_expm(self):
        from app.services.dynamics import LindbladParams, lindblad_propagate

        rho = _random_density(4, seed=7)
        H = _random_hamiltonian(4, seed=8)
        params = LindbladParams(64.0, 64.0, 1)
        exact = lindblad_propagate(rho, H, params, 1.5, method="expm")
        stepped = lindblad_propagate(rho, H, params, 1.5, method="rk4")
        assert np.allclose(exact, stepped, atol=1e-6)

    @pytest.mark.parametrize(
        "rho",
        [
            np.array([[0.5, 0.1], [0.2, 0.5]]),
            np.array([[0.6, 0.0], [0.0, 0.6]]),
            np.array([[1.5, 0.0], [0.0, -0.5]]),
            np.eye(3) / 3,
        ],
    )
    def test_rejects_non_density_input(self, rho):
        from app.services.dynamics import DensityMatrixError, LindbladParams, lindblad_propagate

        with pytest.raises(DensityMatrixError):
            lindblad_propagate(rho, np.zeros(rho.shape), LindbladParams(1.0, 1.0), 1.0)

    def test_target_outside_register(self):
        from app.services.dynamics import DensityMatrixError, LindbladParams, lindblad_propagate

        with pytest.raises(DensityMatrixError):
            lindblad_propagate(np.eye(2) / 2, np.zeros((2, 2)), LindbladParams(1.0, 1.0, target_spin_index=1), 1.0)

    def test_negative_rates_rejected(self):
        from app.services.dynamics import LindbladParams

        with pytest.raises(ValueError):
            LindbladParams(gamma1=-1.0, gamma2=0.0)


class TestNoisyCoherence:
    def test_zero_rates_match_coherent_cluster(self, random_spins, g_default, field_z):
        from app.services.cce_engine import cluster_coherence
        from app.services.dynamics import LindbladParams, make_sequence, noisy_cluster_coherence

        spins = random_spins(2, seed=11, label="Si")
        seq = make_sequence("CPMG", 2)
        taus = np.linspace(0.0, 3.0, 31)
        coherent = cluster_coherence(spins, seq, taus, g_default, field_z)
        noisy = noisy_cluster_coherence(spins, seq, taus, LindbladParams(0.0, 0.0, spins[1].index), g_default, field_z)
        assert noisy.cluster == coherent.cluster
        assert np.allclose(noisy.values, coherent.values, atol=1e-8)

    def test_zero_rates_match_coherent_echo_for_close_silicon(self, make_spin, g_default, field_z):
        from app.services.cce_engine import cluster_coherence
        from app.services.dynamics import LindbladParams, make_sequence, noisy_cluster_coherence

        spin = make_spin(0, (1.0, 2.5, 2.4), label="Si")
        seq = make_sequence("HAHN", 1)
        taus = np.linspace(0.0, 4.0, 41)
        coherent = cluster_coherence([spin], seq, taus, g_default, field_z)
        noisy = noisy_cluster_coherence([spin], seq, taus, LindbladParams(0.0, 0.0, 0), g_default, field_z)
        assert np.max(np.abs(noisy.values - coherent.values)) < 1e-8
        assert np.min(coherent.values.real) < 0.99

    def test_noisy_coherence_is_bounded(self, random_spins, g_default, field_z):
        from app.services.dynamics import LindbladParams, make_sequence, noisy_cluster_coherence

        spins = random_spins(2, seed=12, label="Si")
        taus = np.linspace(0.0, 2.0, 21)
        noisy = noisy_cluster_coherence(
            spins, make_sequence("HAHN", 1), taus, LindbladParams(64.0, 64.0, spins[0].index), g_default, field_z
        )
        assert noisy.values[0] == 1.0
        assert np.all(np.abs(noisy.values) <= 1.0 + 1e-9)

    def test_strong_noise_washes_out_cpmg5_modulation(self, make_spin, g_default, field_z):
        from app.models.curve import CoherenceCurve
        from app.services.analysis import find_dips
        from app.services.cce_engine import cluster_coherence
        from app.services.dynamics import LindbladParams, make_sequence, noisy_cluster_coherence

        spin = make_spin(0, (2.5456, 0.0, 2.5456), label="Si")
        seq = make_sequence("CPMG", 5)
        taus = np.linspace(0.3, 0.9, 61)

        def as_curve(cluster):
            return CoherenceCurve(taus=taus, times=10 * taus, values=cluster.values, sequence_kind="CPMG", n_pulses=5)

        coherent = cluster_coherence([spin], seq, taus, g_default, field_z)
        noisy = noisy_cluster_coherence([spin], seq, taus, LindbladParams(1e4, 1e4, 0), g_default, field_z)
        assert len(find_dips(as_curve(coherent), threshold=0.9)) == 5
        assert len(find_dips(as_curve(noisy), threshold=1.0)) == 0
        assert np.all(np.abs(noisy.values) <= 1.0 + 1e-9)

    def test_target_must_be_in_cluster(self, random_spins, g_default, field_z):
        from app.services.dynamics import LindbladParams, SequenceError, make_sequence, noisy_cluster_coherence

        spins = random_spins(1)
        with pytest.raises(SequenceError):
            noisy_cluster_coherence(
                spins, make_sequence("HAHN", 1), np.array([0.0, 1.0]), LindbladParams(1.0, 1.0, 99), g_default, field_z
            )


class TestReadout:
    def _curve(self):
        from app.models.curve import CoherenceCurve

        taus = np.linspace(0.0, 5.0, 11)
        values = np.exp(-taus / 3.0) * np.exp(1j * taus)
        return CoherenceCurve(taus=taus, times=2 * taus, values=values)

    def test_difference_is_fidelity_times_real_part(self):
        from app.services.dynamics import balanced_readout

        curve = self._curve()
        pair = balanced_readout(curve, 0.1, background=0.25)
        assert np.allclose(pair.difference, 0.1 * curve.values.real, atol=1e-12)
        assert np.allclose(pair.signal_3pi2 + pair.signal_pi2, 1.5, atol=1e-12)
        assert np.array_equal(pair.times, curve.times)

    def test_fidelity_range(self):
        from app.services.dynamics import balanced_readout

        with pytest.raises(ValueError):
            balanced_readout(self._curve(), 1.2)

    def test_t1_envelope(self):
        from app.services.dynamics import apply_t1_envelope

        curve = self._curve()
        damped = apply_t1_envelope(curve, 610.0)
        assert np.allclose(damped.values, curve.values * np.exp(-curve.times / 610.0))
        with pytest.raises(ValueError):
            apply_t1_envelope(curve, 0.0)
