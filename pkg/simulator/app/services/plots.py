"""
Static SVG figures for run directories (no display, no timestamps).
"""
import io
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from app.models.curve import CoherenceCurve  # noqa: E402
from app.services.analysis import DipReport, Spectrum  # noqa: E402

SVG_HASH_SALT = "cebath"


def render_svg(fig) -> bytes:
    """Deterministic SVG bytes (fixed element ids, no date); closes the figure."""
    buf = io.BytesIO()
    with matplotlib.rc_context({"svg.hashsalt": SVG_HASH_SALT}):
        fig.savefig(buf, format="svg", metadata={"Date": None})
    plt.close(fig)
    return buf.getvalue()


def coherence_plot(curves: Sequence[tuple[str, CoherenceCurve]], title: str, against_tau: bool = False) -> bytes:
    fig, ax = plt.subplots(figsize=(7.0, 4.0))
    for label, curve in curves:
        x = curve.taus if against_tau else curve.times
        ax.plot(x, curve.values.real, lw=1.0, label=label)
    ax.set_xlabel("τ (µs)" if against_tau else "time (µs)")
    ax.set_ylabel("Re L")
    ax.set_title(title)
    if len(curves) > 1:
        ax.legend(frameon=False)
    fig.tight_layout()
    return render_svg(fig)


def spectrum_plot(spec: Spectrum, peaks: Sequence[tuple[float, float]], title: str) -> bytes:
    fig, ax = plt.subplots(figsize=(7.0, 4.0))
    ax.plot(spec.frequencies, spec.magnitudes, lw=1.0)
    for freq, mag in peaks[:5]:
        ax.annotate(f"{freq:.1f}", (freq, mag), textcoords="offset points", xytext=(0, 4), ha="center", fontsize=8)
    ax.set_xlabel("frequency (kHz)")
    ax.set_ylabel("|FFT|")
    ax.set_title(title)
    fig.tight_layout()
    return render_svg(fig)


def difference_plot(curve: CoherenceCurve, dips: Optional[DipReport], title: str) -> bytes:
    fig, ax = plt.subplots(figsize=(7.0, 4.0))
    ax.plot(curve.taus, curve.values.real, lw=1.0)
    if dips is not None and len(dips):
        ax.plot(dips.centers, dips.minima - 1.0, "v", ms=5)
    ax.axhline(0.0, color="0.6", lw=0.5)
    ax.set_xlabel("τ (µs)")
    ax.set_ylabel("ΔRe L")
    ax.set_title(title)
    fig.tight_layout()
    return render_svg(fig)


def histogram_plot(values: np.ndarray, labels: Sequence[str], xlabel: str, title: str) -> bytes:
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    ax.bar(np.arange(len(values)), values, tick_label=list(labels))
    ax.set_xlabel(xlabel)
    ax.set_ylabel("probability")
    ax.set_title(title)
    fig.tight_layout()
    return render_svg(fig)
