"""
Analysis of coherence curves: spectra, peak and dip detection, model fits and
the dipolar estimate of nuclear T2*.

Time is µs and frequency kHz throughout; fitted frequencies are reported in kHz.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Literal, Optional, Sequence

import numpy as np
from scipy import optimize, signal

from app.models.constants import CONSTANTS, KHZ_PER_MHZ, angular
from app.models.curve import CoherenceCurve
from app.services.lattice import BathLattice, BathSpin

logger = logging.getLogger(__name__)

MAX_ITERATIONS = 500
TOLERANCE = 1e-10
MIN_FFT_POINTS = 8
MIN_FIT_POINTS = 5
DIVERGENT_DECAY_FACTOR = 100.0
GRID_POINTS = 120

Window = Literal["rect", "hann"]


class AnalysisError(ValueError):
    """Raised for inputs an analysis routine cannot handle (grid, length, range)."""


# ─── Spectra ─────────────────────────────────────────────────────────────


@dataclass(frozen=True, eq=False)
class Spectrum:
    """One-sided spectrum; `coefficients` are the raw rfft bins, `magnitudes` their moduli."""

    frequencies: np.ndarray  # kHz
    magnitudes: np.ndarray
    coefficients: np.ndarray
    window: str
    zero_pad_factor: int
    n_samples: int

    @property
    def resolution(self) -> float:
        return float(self.frequencies[1] - self.frequencies[0]) if len(self.frequencies) > 1 else 0.0

    def parseval_energy(self) -> float:
        """Time-domain energy Σ|x|² recovered from the one-sided bins (unpadded FFT)."""
        n_fft = self.n_samples * self.zero_pad_factor
        power = np.abs(self.coefficients) ** 2
        weights = np.full(len(power), 2.0)
        weights[0] = 1.0
        if n_fft % 2 == 0:
            weights[-1] = 1.0
        return float(np.sum(weights * power) / n_fft)


def _uniform_step(times: np.ndarray) -> float:
    steps = np.diff(times)
    if len(steps) == 0 or np.any(steps <= 0):
        raise AnalysisError("time grid must be strictly increasing")
    if not np.allclose(steps, steps[0], rtol=1e-6, atol=0.0):
        raise AnalysisError("FFT needs a uniform time grid")
    return float(steps[0])


def fft_spectrum(
    curve: CoherenceCurve,
    window: Window = "rect",
    zero_pad_factor: int = 1,
    detrend: bool = True,
    component: Literal["real", "complex"] = "real",
    axis: Literal["tau", "time"] = "tau",
) -> Spectrum:
    """
    One-sided magnitude spectrum of the (mean-subtracted) coherence. Echo
    curves are sampled against the pulse interval τ by default, so nuclear
    modulations show up at their own frequencies; `axis="time"` uses 2Nτ.
    """
    samples = curve.taus if axis == "tau" else curve.times
    if len(samples) < MIN_FFT_POINTS:
        raise AnalysisError(f"FFT needs at least {MIN_FFT_POINTS} points, got {len(samples)}")
    if zero_pad_factor < 1:
        raise AnalysisError(f"zero-pad factor must be >= 1, got {zero_pad_factor}")
    dt = _uniform_step(samples)
    x = curve.values.real.astype(float) if component == "real" else curve.values.astype(complex)
    if detrend:
        x = x - np.mean(x)
    if window == "hann":
        x = x * signal.get_window("hann", len(x))
    elif window != "rect":
        raise AnalysisError(f"unknown window {window!r}")
    n_fft = len(x) * zero_pad_factor
    if component == "real":
        coefficients = np.fft.rfft(x, n=n_fft)
        freqs = np.fft.rfftfreq(n_fft, d=dt) * KHZ_PER_MHZ
    else:
        full = np.fft.fft(x, n=n_fft)
        freqs_full = np.fft.fftfreq(n_fft, d=dt) * KHZ_PER_MHZ
        keep = freqs_full >= 0
        coefficients, freqs = full[keep], freqs_full[keep]
    return Spectrum(
        frequencies=freqs,
        magnitudes=np.abs(coefficients),
        coefficients=coefficients,
        window=window,
        zero_pad_factor=zero_pad_factor,
        n_samples=len(x),
    )


def find_peaks(spec: Spectrum, prominence: Optional[float] = None) -> list[tuple[float, float]]:
    """
    Prominent maxima as (frequency kHz, magnitude), largest first; ties by
    frequency. Default prominence is 5 % of the largest magnitude.
    """
    if len(spec.magnitudes) == 0:
        return []
    mags = np.asarray(spec.magnitudes, dtype=float)
    threshold = 0.05 * float(mags.max()) if prominence is None else prominence
    if threshold <= 0 and mags.max() == 0:
        return []
    # pad below the floor so that a maximum on the first or last bin can be detected
    floor = float(mags.min()) - float(np.ptp(mags)) - 1.0
    padded = np.concatenate([[floor], mags, [floor]])
    idx, _ = signal.find_peaks(padded, prominence=threshold)
    idx = idx - 1
    peaks = [(float(spec.frequencies[i]), float(mags[i])) for i in idx]
    return sorted(peaks, key=lambda p: (-p[1], p[0]))


# ─── Dips ────────────────────────────────────────────────────────────────


@dataclass(frozen=True, eq=False)
class DipReport:
    centers: np.ndarray  # µs (τ)
    depths: np.ndarray
    widths: np.ndarray  # µs, full width at half depth
    minima: np.ndarray
    baselines: np.ndarray = field(default_factory=lambda: np.zeros(0))  # local level each depth is measured from

    def __len__(self) -> int:
        return len(self.centers)


def _parabolic_vertex(x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    a, b, c = np.polyfit(x, y, 2)
    if a <= 0:
        i = int(np.argmin(y))
        return float(x[i]), float(y[i])
    xv = -b / (2 * a)
    xv = float(np.clip(xv, x.min(), x.max()))
    return xv, float(np.polyval([a, b, c], xv))


def find_dips(
    curve: CoherenceCurve,
    tau_window: Optional[tuple[float, float]] = None,
    threshold: float = 0.9,
    values: Optional[np.ndarray] = None,
) -> DipReport:
    """
    Local minima of Re L below `threshold` inside the τ window, centres refined
    by a parabola through the three samples around each minimum. Depth is measured
    from the local baseline: the lower of the two maxima bounding the dip.
    """
    taus = np.asarray(curve.taus, dtype=float)
    y = np.asarray(curve.values.real if values is None else values, dtype=float)
    if len(taus) > 1 and np.any(np.diff(taus) <= 0):
        raise AnalysisError("τ grid must be strictly increasing")
    lo, hi = tau_window if tau_window is not None else (-np.inf, np.inf)
    mask = (taus >= lo) & (taus <= hi)
    x_w, y_w = taus[mask], y[mask]
    empty = DipReport(np.zeros(0), np.zeros(0), np.zeros(0), np.zeros(0))
    if len(x_w) < 3:
        return empty
    idx, props = signal.find_peaks(-y_w, prominence=0.0)
    keep = y_w[idx] < threshold
    idx = idx[keep]
    if len(idx) == 0:
        return empty
    prominence = (props["prominences"][keep], props["left_bases"][keep], props["right_bases"][keep])
    _, _, left, right = signal.peak_widths(-y_w, idx, rel_height=0.5, prominence_data=prominence)
    grid_index = np.arange(len(x_w))
    centers, depths, widths, minima, baselines = [], [], [], [], []
    for i, prom, l_ip, r_ip in zip(idx, prominence[0], left, right):
        xv, yv = _parabolic_vertex(x_w[i - 1 : i + 2], y_w[i - 1 : i + 2])
        base = float(y_w[i] + prom)
        centers.append(xv)
        minima.append(yv)
        baselines.append(base)
        depths.append(float(np.clip(base - yv, 0.0, 1.0)))
        widths.append(float(np.interp(r_ip, grid_index, x_w) - np.interp(l_ip, grid_index, x_w)))
    return DipReport(
        centers=np.array(centers),
        depths=np.array(depths),
        widths=np.array(widths),
        minima=np.array(minima),
        baselines=np.array(baselines),
    )


# ─── Fits ────────────────────────────────────────────────────────────────


@dataclass(frozen=True)
class FitParameter:
    value: float
    stderr: float

    def __str__(self) -> str:
        return f"{self.value:.6g} ± {self.stderr:.2g}"


@dataclass(frozen=True)
class FitResult:
    model: str
    parameters: dict[str, FitParameter]
    residual_norm: float
    converged: bool
    iterations: int
    notes: list[str] = field(default_factory=list)

    def __getitem__(self, name: str) -> float:
        return self.parameters[name].value

    def summary(self) -> dict:
        return {
            "model": self.model,
            "converged": self.converged,
            "iterations": self.iterations,
            "residual_norm": float(self.residual_norm),
            "parameters": {k: {"value": float(p.value), "stderr": float(p.stderr)} for k, p in self.parameters.items()},
            "notes": list(self.notes),
        }


Model = Callable[[np.ndarray, np.ndarray], np.ndarray]


def _levenberg_marquardt(
    name: str,
    model: Model,
    x: np.ndarray,
    y: np.ndarray,
    p0: Sequence[float],
    names: Sequence[str],
) -> tuple[FitResult, np.ndarray]:
    def residuals(p: np.ndarray) -> np.ndarray:
        return model(x, p) - y

    try:
        res = optimize.least_squares(
            residuals,
            np.asarray(p0, dtype=float),
            method="lm",
            max_nfev=MAX_ITERATIONS,
            xtol=TOLERANCE,
            ftol=TOLERANCE,
            gtol=TOLERANCE,
        )
    except (ValueError, FloatingPointError) as e:
        logger.warning(f"{name} fit failed: {e}")
        params = {n: FitParameter(float("nan"), float("inf")) for n in names}
        return FitResult(name, params, float("inf"), False, 0, [str(e)]), np.full(len(names), np.nan)

    p = res.x
    dof = len(x) - len(p)
    stderr = np.full(len(p), np.inf)
    if dof > 0:
        s2 = float(np.sum(res.fun**2)) / dof
        jtj = res.jac.T @ res.jac
        try:
            cov = np.linalg.pinv(jtj) * s2
            stderr = np.sqrt(np.clip(np.diag(cov), 0.0, None))
        except np.linalg.LinAlgError:
            pass
    converged = bool(res.success) and res.status > 0 and bool(np.all(np.isfinite(p)))
    params = {n: FitParameter(float(v), float(e)) for n, v, e in zip(names, p, stderr)}
    result = FitResult(
        model=name,
        parameters=params,
        residual_norm=float(np.linalg.norm(res.fun)),
        converged=converged,
        iterations=int(res.nfev),
    )
    return result, p


def _xy(curve_or_x, y=None, use_times: bool = True) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(curve_or_x, CoherenceCurve):
        x = curve_or_x.times if use_times else curve_or_x.taus
        return np.asarray(x, dtype=float), np.asarray(curve_or_x.values.real, dtype=float)
    if y is None:
        raise AnalysisError("pass a curve or both x and y")
    x = np.asarray(curve_or_x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape:
        raise AnalysisError("x and y must have the same shape")
    return x, y


def _time_grid(x: np.ndarray) -> np.ndarray:
    span = float(x.max() - x.min()) or float(abs(x.max())) or 1.0
    step = float(np.min(np.diff(np.sort(x)))) if len(x) > 1 else span
    return np.logspace(math.log10(max(step, span / 1e4) / 10), math.log10(span * DIVERGENT_DECAY_FACTOR), GRID_POINTS)


def _grid_search(x: np.ndarray, y: np.ndarray, basis: Callable[[float], np.ndarray], grid: np.ndarray):
    """Best grid value with linear coefficients solved in closed form."""
    best = (np.inf, grid[0], None)
    for g in grid:
        design = basis(g)
        coef, *_ = np.linalg.lstsq(design, y, rcond=None)
        ssr = float(np.sum((design @ coef - y) ** 2))
        if ssr < best[0]:
            best = (ssr, g, coef)
    return best[1], best[2]


def fit_stretched_exp(
    curve_or_x,
    y=None,
    exponent: float = 3.0,
    free_exponent: bool = False,
) -> FitResult:
    """y = A exp[-(t/T2)^p] with p fixed (3 by default) unless `free_exponent`."""
    x, y = _xy(curve_or_x, y)
    if len(x) < MIN_FIT_POINTS:
        raise AnalysisError(f"need at least {MIN_FIT_POINTS} points, got {len(x)}")
    if np.any(np.abs(y) > 1.1):
        raise AnalysisError("coherence values must lie in [-1.1, 1.1]")
    span = float(x.max() - x.min()) or 1.0
    t2_0, coef = _grid_search(x, y, lambda t: np.exp(-((x / t) ** exponent))[:, None], _time_grid(x))
    amp0 = float(coef[0])
    if free_exponent:
        model: Model = lambda xx, p: p[0] * np.exp(-((xx / abs(p[1])) ** abs(p[2])))
        result, p = _levenberg_marquardt("stretched_exp", model, x, y, [amp0, t2_0, exponent], ["amplitude", "T2", "exponent"])
    else:
        model = lambda xx, p: p[0] * np.exp(-((xx / abs(p[1])) ** exponent))
        result, p = _levenberg_marquardt("stretched_exp", model, x, y, [amp0, t2_0], ["amplitude", "T2"])
    params = dict(result.parameters)
    if "T2" in params:
        params["T2"] = FitParameter(abs(params["T2"].value), params["T2"].stderr)
    if free_exponent:
        params["exponent"] = FitParameter(abs(params["exponent"].value), params["exponent"].stderr)
    else:
        params["exponent"] = FitParameter(exponent, 0.0)
    t2 = params["T2"].value
    if not np.isfinite(t2) or t2 >= DIVERGENT_DECAY_FACTOR * span:
        params["T2"] = FitParameter(float("inf"), float("inf"))
        return FitResult(result.model, params, result.residual_norm, False, result.iterations, ["no decay within the window"])
    return FitResult(result.model, params, result.residual_norm, result.converged, result.iterations, result.notes)


def fit_gaussian_fid(curve_or_x, y=None) -> FitResult:
    """y = A exp[-(t/T2*)²]."""
    x, y = _xy(curve_or_x, y)
    if len(x) < MIN_FIT_POINTS:
        raise AnalysisError(f"need at least {MIN_FIT_POINTS} points, got {len(x)}")
    t0, coef = _grid_search(x, y, lambda t: np.exp(-((x / t) ** 2))[:, None], _time_grid(x))
    model: Model = lambda xx, p: p[0] * np.exp(-((xx / p[1]) ** 2))
    result, _ = _levenberg_marquardt("gaussian_fid", model, x, y, [float(coef[0]), t0], ["amplitude", "T2_star"])
    params = dict(result.parameters)
    params["T2_star"] = FitParameter(abs(params["T2_star"].value), params["T2_star"].stderr)
    return FitResult(result.model, params, result.residual_norm, result.converged, result.iterations, result.notes)


def fit_lorentzian(spectrum_or_x, y=None) -> FitResult:
    """y = c + A (w/2)² / ((f − f0)² + (w/2)²); works on a Spectrum or on (f, y) arrays, e.g. an ODMR trace."""
    if isinstance(spectrum_or_x, Spectrum):
        x = np.asarray(spectrum_or_x.frequencies, dtype=float)
        y = np.asarray(spectrum_or_x.magnitudes, dtype=float)
    else:
        x, y = _xy(spectrum_or_x, y)
    if len(x) < MIN_FIT_POINTS:
        raise AnalysisError(f"need at least {MIN_FIT_POINTS} points, got {len(x)}")
    offset0 = float(np.median(y))
    i0 = int(np.argmax(np.abs(y - offset0)))
    f0 = float(x[i0])
    span = float(x.max() - x.min())
    step = float(np.min(np.diff(np.sort(x))))
    widths = np.logspace(math.log10(step / 2), math.log10(span), GRID_POINTS)

    def basis(w: float) -> np.ndarray:
        shape = (w / 2) ** 2 / ((x - f0) ** 2 + (w / 2) ** 2)
        return np.stack([shape, np.ones_like(x)], axis=1)

    w0, coef = _grid_search(x, y, basis, widths)
    model: Model = lambda xx, p: p[3] + p[2] * (p[1] / 2) ** 2 / ((xx - p[0]) ** 2 + (p[1] / 2) ** 2)
    result, _ = _levenberg_marquardt(
        "lorentzian", model, x, y, [f0, w0, float(coef[0]), float(coef[1])], ["center", "fwhm", "amplitude", "offset"]
    )
    params = dict(result.parameters)
    params["fwhm"] = FitParameter(abs(params["fwhm"].value), params["fwhm"].stderr)
    return FitResult(result.model, params, result.residual_norm, result.converged, result.iterations, result.notes)


def fit_decaying_cosine(curve_or_x, y=None) -> FitResult:
    """y = A e^{−t/τ} cos(2π f t + φ) + c, f in kHz, t and τ in µs (Rabi oscillation)."""
    x, y = _xy(curve_or_x, y)
    if len(x) < MIN_FIT_POINTS:
        raise AnalysisError(f"need at least {MIN_FIT_POINTS} points, got {len(x)}")
    order = np.argsort(x)
    xs, ys = x[order], y[order]
    dt = float(np.median(np.diff(xs)))
    n_fft = 8 * len(xs)
    spec = np.abs(np.fft.rfft(ys - ys.mean(), n=n_fft))
    spec[0] = 0.0
    f_guess = float(np.fft.rfftfreq(n_fft, d=dt)[int(np.argmax(spec))]) * KHZ_PER_MHZ
    w = float(angular(f_guess))

    def basis(tau: float) -> np.ndarray:
        env = np.exp(-x / tau)
        return np.stack([env * np.cos(w * x), env * np.sin(w * x), np.ones_like(x)], axis=1)

    tau0, coef = _grid_search(x, y, basis, _time_grid(x))
    amp0 = float(np.hypot(coef[0], coef[1]))
    phi0 = float(np.arctan2(-coef[1], coef[0]))
    model: Model = lambda xx, p: p[0] * np.exp(-xx / p[2]) * np.cos(angular(p[1]) * xx + p[3]) + p[4]
    result, _ = _levenberg_marquardt(
        "decaying_cosine",
        model,
        x,
        y,
        [amp0, f_guess, tau0, phi0, float(coef[2])],
        ["amplitude", "frequency", "decay_time", "phase", "offset"],
    )
    params = dict(result.parameters)
    if params["frequency"].value < 0:
        params["frequency"] = FitParameter(-params["frequency"].value, params["frequency"].stderr)
        params["phase"] = FitParameter(-params["phase"].value, params["phase"].stderr)
    return FitResult(result.model, params, result.residual_norm, result.converged, result.iterations, result.notes)


def fit_exponential(curve_or_x, y=None) -> FitResult:
    """y = A e^{−t/T} + c (e.g. electron T1 recovery)."""
    x, y = _xy(curve_or_x, y)
    if len(x) < MIN_FIT_POINTS:
        raise AnalysisError(f"need at least {MIN_FIT_POINTS} points, got {len(x)}")
    t0, coef = _grid_search(
        x, y, lambda t: np.stack([np.exp(-x / t), np.ones_like(x)], axis=1), _time_grid(x)
    )
    model: Model = lambda xx, p: p[0] * np.exp(-xx / p[1]) + p[2]
    result, _ = _levenberg_marquardt(
        "exponential", model, x, y, [float(coef[0]), t0, float(coef[1])], ["amplitude", "T", "offset"]
    )
    return result


def gaussian_fid_linewidth(t2_star_us: float) -> float:
    """Spectral FWHM (kHz) of a Gaussian free-induction decay: 2√(ln 2)/(π T2*)."""
    if t2_star_us <= 0:
        raise AnalysisError(f"T2* must be > 0, got {t2_star_us}")
    return 2.0 * math.sqrt(math.log(2.0)) / (math.pi * t2_star_us) * KHZ_PER_MHZ


# ─── Nuclear T2* ─────────────────────────────────────────────────────────


def nuclear_t2_estimate(
    lat: BathLattice,
    species: str,
    field_direction: Sequence[float] = (0.0, 0.0, 1.0),
    designated: Optional[BathSpin] = None,
) -> float:
    """
    Pure-dephasing second-moment estimate of a nucleus's T2* (µs) from its
    secular like-species couplings D_zz = (μ0 γ² h / 4π r³)(3 (n·n_B)² − 1):
    T2* = √2 / (π √Σ D_zz²). The designated nucleus defaults to the active
    `species` spin nearest the defect. Returns inf without like neighbours.
    """
    same = [s for s in lat.spins if s.label == species]
    if not same:
        raise AnalysisError(f"no active {species} spins in the lattice")
    target = designated or min(same, key=lambda s: (s.distance, tuple(s.position)))
    others = [s for s in same if s.index != target.index]
    if not others:
        return float("inf")
    n_b = np.asarray(field_direction, dtype=float)
    n_b = n_b / np.linalg.norm(n_b)
    diff = np.array([s.position for s in others]) - target.position
    r = np.linalg.norm(diff, axis=1)
    cos = (diff @ n_b) / r
    gamma = target.species.gamma_mhz_per_t * 1e6
    prefactor = CONSTANTS.mu_0 / (4.0 * np.pi) * gamma * gamma * CONSTANTS.h / (r * 1e-10) ** 3
    d_zz = prefactor * (3.0 * cos**2 - 1.0)
    second_moment = float(np.sum(d_zz**2))
    if second_moment == 0.0:
        return float("inf")
    return math.sqrt(2.0) / (math.pi * math.sqrt(second_moment)) * 1e6
