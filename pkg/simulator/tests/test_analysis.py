"""
Tests for spectra, dip detection, model fits and the nuclear T2* estimate.

Fit targets are the measured values of the reference experiment used as
synthetic inputs: T2* = 310 ns, ODMR FWHM = 2.2 MHz, Rabi 5.6 MHz / 2 µs,
T1 = 610 µs and the echo T2 = 124 µs.
"""
import numpy as np
import pytest
from scipy import constants


def _curve(x, y, kind="FID"):
    from app.models.curve import CoherenceCurve

    x = np.asarray(x, dtype=float)
    if kind == "FID":
        return CoherenceCurve(taus=x, times=x, values=y, sequence_kind="FID", n_pulses=0)
    return CoherenceCurve(taus=x, times=2 * x, values=y, sequence_kind="HAHN", n_pulses=1)


class TestSpectrum:
    def test_pure_tone(self):
        from app.services.analysis import fft_spectrum, find_peaks

        t = np.linspace(0.0, 100.0, 1001)
        spec = fft_spectrum(_curve(t, np.cos(2 * np.pi * 0.2 * t)))
        peaks = find_peaks(spec)
        assert abs(peaks[0][0] - 200.0) <= spec.resolution

    def test_two_tones(self):
        from app.services.analysis import fft_spectrum, find_peaks

        t = np.linspace(0.0, 100.0, 1001)
        y = np.cos(2 * np.pi * 0.12 * t) + 0.8 * np.cos(2 * np.pi * 0.2 * t)
        spec = fft_spectrum(_curve(t, y), zero_pad_factor=4)
        found = sorted(f for f, _ in find_peaks(spec)[:2])
        assert abs(found[0] - 120.0) <= spec.resolution
        assert abs(found[1] - 200.0) <= spec.resolution

    def test_echo_spectrum_uses_tau_axis(self):
        from app.services.analysis import fft_spectrum, find_peaks

        taus = np.linspace(0.0, 50.0, 501)
        curve = _curve(taus, np.cos(2 * np.pi * 0.2 * taus), kind="HAHN")
        on_tau = find_peaks(fft_spectrum(curve))[0][0]
        on_time = find_peaks(fft_spectrum(curve, axis="time"))[0][0]
        assert on_tau == pytest.approx(200.0, abs=2.0)
        assert on_time == pytest.approx(100.0, abs=1.0)

    def test_resolution(self):
        from app.services.analysis import fft_spectrum

        t = np.arange(200) * 0.05
        spec = fft_spectrum(_curve(t, np.cos(t)), zero_pad_factor=4)
        assert spec.resolution == pytest.approx(1e3 / (4 * 200 * 0.05))

    @pytest.mark.parametrize("pad", [1, 4])
    def test_parseval(self, pad):
        from app.services.analysis import fft_spectrum

        rng = np.random.default_rng(0)
        t = np.arange(257) * 0.1
        y = rng.normal(size=len(t))
        spec = fft_spectrum(_curve(t, y), detrend=False, zero_pad_factor=pad)
        assert spec.parseval_energy() == pytest.approx(float(np.sum(y**2)), rel=1e-6)

    def test_even_signal_has_zero_phase(self):
        from app.services.analysis import fft_spectrum

        n = np.arange(64)
        y = np.cos(2 * np.pi * 3 * n / 64) + 0.5 * np.cos(2 * np.pi * 5 * n / 64)
        spec = fft_spectrum(_curve(n * 0.1, y), detrend=False)
        assert np.max(np.abs(spec.coefficients.imag)) < 1e-9 * spec.magnitudes.max()

    def test_requires_uniform_grid(self):
        from app.services.analysis import AnalysisError, fft_spectrum

        t = np.array([0.0, 0.1, 0.2, 0.35, 0.4, 0.5, 0.6, 0.7, 0.8])
        with pytest.raises(AnalysisError):
            fft_spectrum(_curve(t, np.ones(len(t))))

    def test_requires_eight_points(self):
        from app.services.analysis import AnalysisError, fft_spectrum

        t = np.arange(7) * 0.1
        with pytest.raises(AnalysisError):
            fft_spectrum(_curve(t, np.ones(7)))

    def test_empty_spectrum_has_no_peaks(self):
        from app.services.analysis import Spectrum, find_peaks

        empty = Spectrum(np.zeros(0), np.zeros(0), np.zeros(0, dtype=complex), "rect", 1, 0)
        assert find_peaks(empty) == []


class TestDips:
    def _dip_curve(self, center=0.609, depth=0.5, sigma=0.01):
        taus = np.linspace(0.3, 0.9, 301)
        return _curve(taus, 1.0 - depth * np.exp(-(((taus - center) / sigma) ** 2)), kind="HAHN")

    def test_single_dip(self):
        from app.services.analysis import find_dips

        report = find_dips(self._dip_curve())
        assert len(report) == 1
        assert report.centers[0] == pytest.approx(0.609, abs=0.002)
        assert report.depths[0] == pytest.approx(0.5, abs=0.01)
        assert report.widths[0] == pytest.approx(2 * 0.01 * np.sqrt(np.log(2)), rel=0.1)
        assert 0.0 <= report.depths[0] <= 1.0

    def test_depth_is_measured_from_local_baseline(self):
        """A dip on a rising background is measured from its shoulder, not from the trace median."""
        from app.services.analysis import find_dips

        taus = np.linspace(0.3, 0.9, 301)
        y = 0.7 + 0.5 * (taus - 0.3) - 0.2 * np.exp(-(((taus - 0.8) / 0.01) ** 2))
        report = find_dips(_curve(taus, y, kind="HAHN"))
        assert len(report) == 1
        assert report.centers[0] == pytest.approx(0.8, abs=0.002)
        assert report.baselines[0] == pytest.approx(0.94, abs=0.01)
        assert report.depths[0] == pytest.approx(0.19, abs=0.02)

    def test_threshold(self):
        from app.services.analysis import find_dips

        assert len(find_dips(self._dip_curve(depth=0.05), threshold=0.9)) == 0

    def test_window(self):
        from app.services.analysis import find_dips

        report = find_dips(self._dip_curve(), tau_window=(0.7, 0.9))
        assert len(report) == 0

    def test_split_dips(self):
        from app.services.analysis import find_dips

        taus = np.linspace(0.3, 0.9, 601)
        y = 1.0 - 0.4 * np.exp(-(((taus - 0.55) / 0.01) ** 2)) - 0.4 * np.exp(-(((taus - 0.65) / 0.01) ** 2))
        report = find_dips(_curve(taus, y, kind="HAHN"))
        assert np.allclose(report.centers, [0.55, 0.65], atol=0.002)

    def test_explicit_values(self):
        from app.services.analysis import find_dips

        curve = self._dip_curve()
        flat = np.ones(len(curve.taus))
        assert len(find_dips(curve, values=flat)) == 0


class TestFits:
    def test_stretched_exponential_recovers_echo_t2(self):
        t = np.linspace(0.0, 300.0, 301)
        from app.services.analysis import fit_stretched_exp

        fit = fit_stretched_exp(t, np.exp(-((t / 124.0) ** 3)))
        assert fit.converged
        assert fit["T2"] == pytest.approx(124.0, rel=0.01)
        assert fit["exponent"] == 3.0
        assert fit["amplitude"] == pytest.approx(1.0, rel=0.01)

    def test_free_exponent(self):
        from app.services.analysis import fit_stretched_exp

        t = np.linspace(0.0, 300.0, 301)
        fit = fit_stretched_exp(t, 0.9 * np.exp(-((t / 124.0) ** 2.5)), exponent=3.0, free_exponent=True)
        assert fit["T2"] == pytest.approx(124.0, rel=0.01)
        assert fit["exponent"] == pytest.approx(2.5, rel=0.01)

    def test_noisy_echo_median(self):
        from app.services.analysis import fit_stretched_exp

        t = np.linspace(0.0, 300.0, 151)
        clean = np.exp(-((t / 124.0) ** 3))
        estimates = []
        for seed in range(50):
            noisy = clean + 0.05 * np.random.default_rng(seed).normal(size=len(t))
            estimates.append(fit_stretched_exp(t, np.clip(noisy, -1.1, 1.1))["T2"])
        assert np.median(estimates) == pytest.approx(124.0, rel=0.05)

    def test_rescaling_time_rescales_t2_only(self):
        from app.services.analysis import fit_stretched_exp

        t = np.linspace(0.0, 300.0, 151)
        y = 0.95 * np.exp(-((t / 124.0) ** 2.6))
        base = fit_stretched_exp(t, y, free_exponent=True)
        scaled = fit_stretched_exp(3.7 * t, y, free_exponent=True)
        assert base.converged and scaled.converged
        assert scaled["T2"] == pytest.approx(3.7 * base["T2"], rel=1e-4)
        assert scaled["exponent"] == pytest.approx(base["exponent"], rel=1e-4)
        assert scaled["amplitude"] == pytest.approx(base["amplitude"], rel=1e-4)

    def test_no_decay_is_reported_as_divergent(self):
        from app.services.analysis import fit_stretched_exp

        t = np.linspace(0.0, 10.0, 51)
        fit = fit_stretched_exp(t, np.ones(len(t)))
        assert fit["T2"] == float("inf")
        assert not fit.converged
        assert fit.notes

    def test_gaussian_fid(self):
        from app.services.analysis import fit_gaussian_fid

        t = np.linspace(0.0, 1.5, 151)
        fit = fit_gaussian_fid(_curve(t, 0.9 * np.exp(-((t / 0.31) ** 2))))
        assert fit.converged
        assert fit["T2_star"] == pytest.approx(0.31, rel=0.01)
        assert fit["amplitude"] == pytest.approx(0.9, rel=0.01)

    def test_gaussian_linewidth(self):
        """T2* = 310 ns gives a ≈1.7 MHz line, same order as the 2.2 MHz ODMR width."""
        from app.services.analysis import AnalysisError, gaussian_fid_linewidth

        assert gaussian_fid_linewidth(0.31) == pytest.approx(1709.8, rel=1e-3)
        with pytest.raises(AnalysisError):
            gaussian_fid_linewidth(0.0)

    def test_lorentzian_odmr(self):
        from app.services.analysis import fit_lorentzian

        f = np.linspace(0.0, 20000.0, 401)
        y = 1.0 - 0.3 * (1100.0**2) / ((f - 10000.0) ** 2 + 1100.0**2)
        fit = fit_lorentzian(f, y)
        assert fit.converged
        assert fit["fwhm"] == pytest.approx(2200.0, rel=0.01)
        assert fit["center"] == pytest.approx(10000.0, rel=0.01)
        assert fit["amplitude"] == pytest.approx(-0.3, rel=0.01)
        assert fit["offset"] == pytest.approx(1.0, rel=0.01)

    def test_lorentzian_on_spectrum(self):
        from app.services.analysis import Spectrum, fit_lorentzian

        f = np.linspace(100.0, 300.0, 201)
        mags = 5.0 * 8.0**2 / ((f - 202.6) ** 2 + 8.0**2)
        spec = Spectrum(f, mags, mags.astype(complex), "rect", 1, 400)
        fit = fit_lorentzian(spec)
        assert fit["center"] == pytest.approx(202.6, rel=0.01)
        assert fit["fwhm"] == pytest.approx(16.0, rel=0.01)

    def test_rabi_decaying_cosine(self):
        from app.services.analysis import fit_decaying_cosine

        t = np.linspace(0.0, 4.0, 801)
        y = 0.4 * np.exp(-t / 2.0) * np.cos(2 * np.pi * 5.6 * t + 0.3) + 0.5
        fit = fit_decaying_cosine(t, y)
        assert fit.converged
        assert fit["frequency"] == pytest.approx(5600.0, rel=0.01)
        assert fit["decay_time"] == pytest.approx(2.0, rel=0.01)
        assert fit["offset"] == pytest.approx(0.5, rel=0.01)

    def test_exponential_t1(self):
        from app.services.analysis import fit_exponential

        t = np.linspace(0.0, 3000.0, 301)
        fit = fit_exponential(t, 0.8 * np.exp(-t / 610.0) + 0.1)
        assert fit.converged
        assert fit["T"] == pytest.approx(610.0, rel=0.01)
        assert fit["offset"] == pytest.approx(0.1, rel=0.01)

    def test_summary_is_plain_data(self):
        from app.services.analysis import fit_exponential

        t = np.linspace(0.0, 3000.0, 61)
        summary = fit_exponential(t, np.exp(-t / 610.0)).summary()
        assert summary["model"] == "exponential"
        assert set(summary["parameters"]) == {"amplitude", "T", "offset"}
        assert isinstance(summary["parameters"]["T"]["value"], float)

    def test_too_few_points(self):
        from app.services.analysis import AnalysisError, fit_gaussian_fid

        with pytest.raises(AnalysisError):
            fit_gaussian_fid(np.arange(4.0), np.ones(4))

    def test_shape_mismatch(self):
        from app.services.analysis import AnalysisError, fit_exponential

        with pytest.raises(AnalysisError):
            fit_exponential(np.arange(6.0), np.ones(5))


class TestNuclearT2:
    def _pair_lattice(self, definition, make_spin, separation):
        from app.services.lattice import BathLattice

        spins = (make_spin(0, (0.0, 0.0, 3.0)), make_spin(1, (0.0, 0.0, 3.0 + separation)))
        return BathLattice(definition, spins, np.zeros(3), 0, (2.0, 2.0, 2.0), 0)

    def test_single_neighbour_along_field(self, toy_definition, make_spin):
        from app.services.analysis import nuclear_t2_estimate

        lat = self._pair_lattice(toy_definition, make_spin, 4.0)
        gamma = 2.0886e6
        d_zz = 2 * constants.mu_0 / (4 * np.pi) * gamma**2 * constants.h / (4.0e-10) ** 3
        expected = np.sqrt(2) / (np.pi * d_zz) * 1e6
        assert nuclear_t2_estimate(lat, "Y") == pytest.approx(expected, rel=1e-9)

    def test_no_like_neighbour(self, toy_definition, make_spin):
        from app.services.analysis import nuclear_t2_estimate
        from app.services.lattice import BathLattice

        lat = BathLattice(toy_definition, (make_spin(0, (0.0, 0.0, 3.0)),), np.zeros(3), 0, (1.0, 1.0, 1.0), 0)
        assert nuclear_t2_estimate(lat, "Y") == float("inf")

    def test_missing_species(self, toy_definition, make_spin):
        from app.services.analysis import AnalysisError, nuclear_t2_estimate

        with pytest.raises(AnalysisError):
            nuclear_t2_estimate(self._pair_lattice(toy_definition, make_spin, 4.0), "Si")

    def test_yttrium_lattice_is_tens_of_milliseconds(self, toy_definition):
        from app.services.analysis import nuclear_t2_estimate
        from app.services.lattice import build_supercell

        lat = build_supercell(toy_definition, (3.0, 3.0, 3.0), 0, seed=0)
        t2 = nuclear_t2_estimate(lat, "Y")
        assert 1e3 < t2 < 1e6
