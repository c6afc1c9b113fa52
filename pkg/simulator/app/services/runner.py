"""
Experiment runner: config -> lattice -> CCE -> dynamics -> analysis -> run directory.

Each experiment writes its data files, fit summaries, optional SVG plots and a
Markdown summary into a locked run directory; the manifest is written last.
"""
import logging
import time
from dataclasses import dataclass, field
from importlib import metadata
from pathlib import Path
from typing import Any, Callable, Optional, Sequence

import numpy as np

from app import __version__
from app.config import get_settings
from app.models.curve import CoherenceCurve
from app.schemas.crystal import CrystalDefinition, load_crystal_file
from app.schemas.experiment import EXPERIMENTS, ClearSpins, ConfigError, ExperimentConfig, ProximalSpin
from app.schemas.manifest import RunManifest
from app.services import plots
from app.services.analysis import (
    AnalysisError,
    DipReport,
    FitResult,
    fft_spectrum,
    find_dips,
    find_peaks,
    fit_gaussian_fid,
    fit_lorentzian,
    fit_stretched_exp,
    gaussian_fid_linewidth,
    nuclear_t2_estimate,
)
from app.services.cce_engine import CCEEngine, ProgressCallback, ensemble_average
from app.services.dynamics import (
    LindbladParams,
    PulseSequence,
    apply_t1_envelope,
    balanced_readout,
    filter_center_frequency,
    make_sequence,
)
from app.services.hamiltonian import GTensor, MagneticField, electron_splitting, hyperfine_vector
from app.services.lattice import (
    BathLattice,
    BathSpin,
    build_supercell,
    clear_spins_within,
    force_spin_at_distance,
    occupancy_distribution,
    place_spin,
    probability_any,
    site_uniform,
    sites_within,
)
from app.services.outputs import (
    SPECTRUM_COLUMNS,
    RunDirectory,
    RunMismatchError,
    TableFormat,
    load_curve,
    load_manifest,
)
from app.services.report import render_run_summary

logger = logging.getLogger(__name__)

FITS_NAME = "fits.yaml"
SUMMARY_NAME = "summary.md"
CONFIG_NAME = "config.yaml"
PEAK_FIT_BINS = 8
# margin (nm) added around the occupancy sphere so every site inside it is generated
OCCUPANCY_BOX_MARGIN = 0.4


def tool_version() -> str:
    try:
        return metadata.version("cebath")
    except metadata.PackageNotFoundError:
        return __version__


@dataclass
class PreparedBath:
    """A lattice after clear/force overrides, with the forced spins in order."""

    lattice: BathLattice
    forced: list[BathSpin] = field(default_factory=list)

    @property
    def noisy_target(self) -> Optional[int]:
        return self.forced[0].index if self.forced else None


@dataclass
class RunResult:
    """Outcome of one experiment run."""

    experiment: str
    run_dir: Path
    manifest: RunManifest
    duration_seconds: float

    @property
    def exit_code(self) -> int:
        return 3 if self.manifest.has_nonconvergence else 0


@dataclass
class RunDiff:
    """Pointwise difference of one curve file between two runs, with its dips."""

    name: str
    curve: CoherenceCurve
    dips: DipReport


@dataclass
class _Collected:
    """Everything an experiment reports besides the files themselves."""

    fits: dict[str, dict] = field(default_factory=dict)
    unconverged_fits: list[str] = field(default_factory=list)
    nonconverged: dict[str, list[float]] = field(default_factory=dict)
    peaks: list[tuple[float, float]] = field(default_factory=list)
    dips: dict[str, dict] = field(default_factory=dict)
    tables: dict[str, Any] = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)
    proximal: list[dict] = field(default_factory=list)
    lattice: Optional[dict] = None


def _dip_summary(report: DipReport) -> dict:
    return {
        "centers_us": report.centers,
        "depths": report.depths,
        "widths_us": report.widths,
        "minima": report.minima,
        "baselines": report.baselines,
    }


def difference_dips(
    curve: CoherenceCurve, tau_window: Optional[tuple[float, float]] = None, threshold: float = 0.9
) -> DipReport:
    """Dips of a difference trace, measured on 1 + ΔRe L so the threshold reads like a coherence level."""
    return find_dips(curve, tau_window=tau_window, threshold=threshold, values=1.0 + curve.values.real)


class ExperimentRunner:
    """
    Runs the named experiments of one validated config.

    `workers` and `fmt` override the runtime settings and the config's output
    format; neither changes the data written.
    """

    def __init__(
        self,
        config: ExperimentConfig,
        out_dir: Optional[Path] = None,
        workers: Optional[int] = None,
        fmt: Optional[TableFormat] = None,
        progress: Optional[ProgressCallback] = None,
    ):
        self.logger = logging.getLogger(self.__class__.__name__)
        self.config = config
        self.config_hash = config.config_hash()
        self.out_dir = Path(out_dir) if out_dir is not None else config.output.directory
        self.workers = workers
        self.fmt: TableFormat = fmt or config.output.format
        self.progress = progress
        self.g = GTensor(np.array(config.g_tensor, dtype=float))
        self.B = MagneticField(config.field.magnitude_t, np.array(config.field.direction, dtype=float))
        self._definition: Optional[CrystalDefinition] = None
        self._handlers: dict[str, Callable[[RunDirectory, _Collected], None]] = {
            "hahn_echo": self._hahn_echo,
            "cpmg_scan": self._cpmg_scan,
            "fid": self._fid,
            "spectrum": self._spectrum,
            "occupancy": self._occupancy,
            "estimate_t2n": self._estimate_t2n,
        }

    # ─── Public API ──────────────────────────────────────────────────────

    def run_dir_for(self, experiment: str) -> Path:
        if self.out_dir is not None:
            return self.out_dir
        return get_settings().output_root / f"{experiment}-{self.config_hash}"

    def run(self, experiment: str) -> RunResult:
        if experiment not in self._handlers:
            raise ConfigError(f"unknown experiment {experiment!r}, expected one of {EXPERIMENTS}")
        run_dir = self.run_dir_for(experiment)
        start = time.monotonic()
        self.logger.info(f"Starting {experiment} (config {self.config_hash}, seed {self.config.seed}) -> {run_dir}")
        collected = _Collected()
        with RunDirectory(run_dir, self.fmt) as rd:
            self._handlers[experiment](rd, collected)
            if collected.fits:
                rd.write_yaml(FITS_NAME, collected.fits, "fit")
            rd.write_yaml(CONFIG_NAME, self.config.model_dump(mode="json"), "config")
            summary = render_run_summary(self._summary_context(experiment, collected, sorted(rd.files)))
            rd.write(SUMMARY_NAME, summary, "report")
            duration = time.monotonic() - start
            manifest = RunManifest(
                experiment=experiment,
                config_hash=self.config_hash,
                seed=self.config.seed,
                tool_version=tool_version(),
                wall_time_s=round(duration, 3),
                files=dict(sorted(rd.files.items())),
                nonconverged=collected.nonconverged,
                unconverged_fits=collected.unconverged_fits,
                notes=collected.notes,
            )
            rd.finalize(manifest)
        self.logger.info(
            f"Run {experiment} complete: {len(manifest.files)} files in {duration:.1f}s"
            + (" (non-convergence flagged)" if manifest.has_nonconvergence else "")
        )
        return RunResult(experiment=experiment, run_dir=run_dir, manifest=manifest, duration_seconds=duration)

    # ─── Bath preparation ────────────────────────────────────────────────

    @property
    def definition(self) -> CrystalDefinition:
        if self._definition is None:
            definition = load_crystal_file(self.config.crystal_path)
            self._definition = definition.with_species_overrides(self.config.species_overrides)
        return self._definition

    def base_lattice(self, seed: Optional[int] = None, box_nm: Optional[Sequence[float]] = None) -> BathLattice:
        return build_supercell(
            self.definition,
            box_nm if box_nm is not None else self.config.box_nm,
            self.config.defect_site_index,
            self.config.seed if seed is None else seed,
        )

    def prepare_bath(
        self, base: BathLattice, proximal: Sequence[ProximalSpin], clear: Sequence[ClearSpins]
    ) -> PreparedBath:
        """Clear first, then force; forced spins survive any clear radius."""
        lat = base
        for c in clear:
            lat = clear_spins_within(lat, c.species, c.radius)
        positions = []
        for p in proximal:
            if p.distance is not None:
                lat, spin = force_spin_at_distance(lat, p.species, p.distance, p.tolerance)
            else:
                lat, spin = place_spin(lat, p.species, p.position)
            positions.append(np.array(spin.position))
        # indices shift when place_spin drops a site, so look the forced spins up at the end
        forced = [next(s for s in lat.sites if np.array_equal(s.position, pos)) for pos in positions]
        return PreparedBath(lattice=lat, forced=forced)

    def _engine(self, noisy_target: Optional[int], noisy: bool = True) -> CCEEngine:
        cce = self.config.cce
        lindblad = None
        if noisy and self.config.lindblad.enabled:
            if noisy_target is None:
                raise ConfigError("the Lindblad channel needs a proximal spin", field_path="lindblad.enabled")
            lindblad = LindbladParams(self.config.lindblad.gamma1_khz, self.config.lindblad.gamma2_khz, noisy_target)
        return CCEEngine(
            self.g,
            self.B,
            max_order=cce.order,
            distance_cutoff=cce.distance_cutoff,
            coupling_cutoff=cce.coupling_cutoff_hz,
            bath_radius=None if cce.bath_radius_nm is None else cce.bath_radius_nm * 10.0,
            interacting=cce.interacting,
            workers=self.workers,
            lindblad=lindblad,
            progress=self.progress,
        )

    def simulate(
        self, bath: PreparedBath, sequence: PulseSequence, taus: np.ndarray, noisy: bool = True
    ) -> CoherenceCurve:
        curve = self._engine(bath.noisy_target, noisy).run(bath.lattice, sequence, taus, config_hash=self.config_hash)
        if self.config.t1_envelope_us is not None:
            curve = apply_t1_envelope(curve, self.config.t1_envelope_us)
        return curve

    def simulate_configured(
        self, base: BathLattice, sequence: PulseSequence, taus: np.ndarray, col: _Collected, noisy: bool = True
    ) -> CoherenceCurve:
        """The configured environment: one ion, or the weighted ensemble of co-located ions."""
        members = self.config.ensemble.members
        if not members:
            bath = self.prepare_bath(base, self.config.proximal, self.config.clear)
            self._record_bath(bath, col)
            return self.simulate(bath, sequence, taus, noisy)
        curves = []
        for i, member in enumerate(members):
            bath = self.prepare_bath(base, member.proximal, member.clear)
            self._record_bath(bath, col, member=i)
            curves.append(self.simulate(bath, sequence, taus, noisy))
        return ensemble_average(curves, [m.weight for m in members])

    def _record_bath(self, bath: PreparedBath, col: _Collected, member: Optional[int] = None) -> None:
        if col.lattice is None:
            lat = bath.lattice
            by_species: dict[str, int] = {}
            for s in lat.spins:
                by_species[s.label] = by_species.get(s.label, 0) + 1
            col.lattice = {"sites": len(lat.sites), "active": len(lat.spins), "by_species": dict(sorted(by_species.items()))}
        for spin in bath.forced:
            entry = {
                "label": spin.label if member is None else f"{spin.label} (ion {member})",
                "distance": spin.distance,
                "hyperfine_khz": hyperfine_vector(spin, self.g, self.B).magnitude,
            }
            if entry not in col.proximal:
                col.proximal.append(entry)

    # ─── Emitters ────────────────────────────────────────────────────────

    def _emit_curve(self, rd: RunDirectory, col: _Collected, stem: str, curve: CoherenceCurve) -> str:
        name = rd.write_curve(stem, curve)
        if curve.has_nonconverged:
            col.nonconverged[name] = [float(t) for t in curve.times[curve.nonconverged]]
        return name

    def _emit_readout(self, rd: RunDirectory, stem: str, curve: CoherenceCurve) -> str:
        readout = self.config.readout
        pair = balanced_readout(curve, readout.fidelity, readout.background)
        columns = {
            "time_us": pair.times,
            "signal_3pi2": pair.signal_3pi2,
            "signal_pi2": pair.signal_pi2,
            "difference": pair.difference,
        }
        meta = {"config_hash": self.config_hash, "seed": self.config.seed, "fidelity": readout.fidelity}
        return rd.write_table(stem, columns, meta, "readout")

    def _emit_plot(self, rd: RunDirectory, name: str, svg: Callable[[], bytes]) -> None:
        if self.config.output.plots:
            rd.write_plot(name, svg())

    def _record_fit(self, col: _Collected, name: str, fit: Callable[[], FitResult]) -> Optional[FitResult]:
        try:
            result = fit()
        except AnalysisError as e:
            col.notes.append(f"{name}: {e}")
            col.unconverged_fits.append(name)
            self.logger.warning(f"Fit {name} skipped: {e}")
            return None
        col.fits[name] = result.summary()
        if not result.converged:
            col.unconverged_fits.append(name)
            self.logger.warning(f"Fit {name} did not converge")
        return result

    # ─── Experiments ─────────────────────────────────────────────────────

    def _sequence(self, kind: str, n_pulses: int) -> PulseSequence:
        return make_sequence(kind, n_pulses, readout_phase=self.config.sequence.readout_phase)

    def _echo(self, rd: RunDirectory, col: _Collected) -> CoherenceCurve:
        taus = self.config.sequence.tau.array()
        curve = self.simulate_configured(self.base_lattice(), self._sequence("HAHN", 1), taus, col)
        self._emit_curve(rd, col, "coherence_hahn", curve)
        self._emit_readout(rd, "readout_hahn", curve)
        self._emit_plot(rd, "coherence_hahn.svg", lambda: plots.coherence_plot([("Hahn echo", curve)], "Hahn echo"))
        return curve

    def _hahn_echo(self, rd: RunDirectory, col: _Collected) -> None:
        curve = self._echo(rd, col)
        analysis = self.config.analysis
        self._record_fit(
            col,
            "echo_envelope",
            lambda: fit_stretched_exp(
                curve.times, np.abs(curve.values), exponent=analysis.echo_exponent, free_exponent=analysis.free_exponent
            ),
        )

    def _spectrum(self, rd: RunDirectory, col: _Collected) -> None:
        curve = self._echo(rd, col)
        analysis = self.config.analysis
        spec = fft_spectrum(
            curve, window=analysis.fft_window, zero_pad_factor=analysis.zero_pad_factor, axis=analysis.fft_axis
        )
        peaks = find_peaks(spec, analysis.peak_prominence)
        col.peaks = peaks[:10]
        meta = {
            "config_hash": self.config_hash,
            "seed": self.config.seed,
            "window": spec.window,
            "zero_pad_factor": spec.zero_pad_factor,
            "resolution_khz": spec.resolution,
        }
        rd.write_table("spectrum_hahn", dict(zip(SPECTRUM_COLUMNS, (spec.frequencies, spec.magnitudes))), meta, "spectrum")
        self._emit_plot(rd, "spectrum_hahn.svg", lambda: plots.spectrum_plot(spec, peaks, "Echo spectrum"))
        if peaks:
            top = int(np.argmin(np.abs(spec.frequencies - peaks[0][0])))
            lo, hi = max(0, top - PEAK_FIT_BINS), min(len(spec.frequencies), top + PEAK_FIT_BINS + 1)
            self._record_fit(
                col, "spectrum_peak", lambda: fit_lorentzian(spec.frequencies[lo:hi], spec.magnitudes[lo:hi])
            )

    def _fid(self, rd: RunDirectory, col: _Collected) -> None:
        taus = self.config.sequence.tau.array()
        curve = self.simulate_configured(self.base_lattice(), self._sequence("FID", 0), taus, col)
        self._emit_curve(rd, col, "coherence_fid", curve)
        self._emit_readout(rd, "readout_fid", curve)
        self._emit_plot(rd, "coherence_fid.svg", lambda: plots.coherence_plot([("FID", curve)], "Free induction decay"))
        if np.allclose(curve.values, 1.0):
            col.tables["T2* (µs)"] = "no decay"
            return
        fit = self._record_fit(col, "fid_envelope", lambda: fit_gaussian_fid(curve.times, np.abs(curve.values)))
        if fit is not None and fit.converged and np.isfinite(fit["T2_star"]) and fit["T2_star"] > 0:
            col.tables["gaussian linewidth (kHz)"] = f"{gaussian_fid_linewidth(fit['T2_star']):.6g}"

    def _cpmg_scan(self, rd: RunDirectory, col: _Collected) -> None:
        scan = self.config.cpmg_scan
        analysis = self.config.analysis
        taus = scan.tau.array()
        base = self.base_lattice()
        has_overrides = bool(self.config.proximal) or bool(self.config.ensemble.members)
        for n in scan.n_values:
            sequence = self._sequence("CPMG", n)
            curve = self.simulate_configured(base, sequence, taus, col)
            self._emit_curve(rd, col, f"coherence_cpmg{n}", curve)
            self._emit_readout(rd, f"readout_cpmg{n}", curve)
            shown = [(f"CPMG-{n}", curve)]
            if self.config.lindblad.enabled:
                coherent = self.simulate_configured(base, sequence, taus, col, noisy=False)
                self._emit_curve(rd, col, f"coherent_cpmg{n}", coherent)
                shown.append((f"CPMG-{n} coherent", coherent))
            if scan.reference and has_overrides:
                reference = self.simulate(self.prepare_bath(base, [], self.config.clear), sequence, taus, noisy=False)
                self._emit_curve(rd, col, f"reference_cpmg{n}", reference)
                shown.append((f"CPMG-{n} reference", reference))
                diff = curve.with_values(
                    curve.values - reference.values, nonconverged=curve.nonconverged | reference.nonconverged
                )
                self._emit_curve(rd, col, f"difference_cpmg{n}", diff)
                dips = difference_dips(diff, analysis.dip_window, analysis.dip_threshold)
                self._emit_plot(
                    rd, f"difference_cpmg{n}.svg", lambda: plots.difference_plot(diff, dips, f"CPMG-{n} difference")
                )
            else:
                dips = find_dips(curve, tau_window=analysis.dip_window, threshold=analysis.dip_threshold)
            col.dips[f"CPMG-{n}"] = _dip_summary(dips)
            if len(dips):
                freqs = [filter_center_frequency(sequence.with_tau(float(c))) for c in dips.centers]
                col.tables[f"CPMG-{n} dip filter frequencies (kHz)"] = ", ".join(f"{f:.1f}" for f in freqs)
            self._emit_plot(
                rd, f"coherence_cpmg{n}.svg", lambda: plots.coherence_plot(shown, f"CPMG-{n}", against_tau=True)
            )

    def _occupancy(self, rd: RunDirectory, col: _Collected) -> None:
        occ = self.config.occupancy
        if occ.species not in self.definition.species_table:
            raise ConfigError(f"unknown species {occ.species!r}", field_path="occupancy.species")
        side = 2.0 * occ.radius / 10.0 + OCCUPANCY_BOX_MARGIN
        lat = self.base_lattice(box_nm=(side, side, side))
        abundance = self.definition.species_table[occ.species].abundance
        shell = sites_within(lat, occ.radius, occ.species, active_only=False)
        nearest = sites_within(lat, occ.nearest_radius, occ.species, active_only=False)
        pmf = np.array(occupancy_distribution(len(shell), abundance))

        counts = np.zeros(len(shell) + 1)
        for i in range(occ.seeds):
            seed = (self.config.seed + i) % 2**64
            k = sum(1 for s in shell if site_uniform(seed, s.cell, s.basis_index) < abundance)
            counts[k] += 1
        empirical = counts / occ.seeds

        k = np.arange(len(shell) + 1, dtype=float)
        rd.write_table(
            "occupancy",
            {"k": k, "probability": pmf, "empirical": empirical},
            {"config_hash": self.config_hash, "seed": self.config.seed, "species": occ.species, "radius": occ.radius},
            "table",
        )
        result = {
            "species": occ.species,
            "abundance": abundance,
            "radius_angstrom": occ.radius,
            "sites": len(shell),
            "site_distances_angstrom": [round(s.distance, 6) for s in shell],
            "p_none": float(pmf[0]),
            "nearest_radius_angstrom": occ.nearest_radius,
            "nearest_sites": len(nearest),
            "p_nearest_occupied": probability_any(len(nearest), abundance),
            "empirical_p_none": float(empirical[0]),
            "seeds": occ.seeds,
        }
        rd.write_yaml("occupancy.yaml", result, "table")
        col.tables[f"P(no {occ.species} within {occ.radius} Å)"] = f"{pmf[0]:.4f} ({len(shell)} sites)"
        col.tables[f"P(nearest {occ.species} occupied, {occ.nearest_radius} Å)"] = (
            f"{result['p_nearest_occupied']:.4f} ({len(nearest)} sites)"
        )
        self._emit_plot(
            rd,
            "occupancy.svg",
            lambda: plots.histogram_plot(pmf, [str(int(x)) for x in k], f"{occ.species} within {occ.radius} Å", "Occupancy"),
        )

    def _estimate_t2n(self, rd: RunDirectory, col: _Collected) -> None:
        t2n = self.config.t2n
        for species in t2n.species:
            if species not in self.definition.species_table:
                raise ConfigError(f"unknown species {species!r}", field_path="t2n.species")
        seeds = [(self.config.seed + i) % 2**64 for i in range(t2n.seeds)]
        values = {species: np.full(len(seeds), np.nan) for species in t2n.species}
        for row, seed in enumerate(seeds):
            lat = self.base_lattice(seed=seed, box_nm=t2n.box_nm)
            for species in t2n.species:
                try:
                    values[species][row] = nuclear_t2_estimate(lat, species, self.config.field.direction)
                except AnalysisError as e:
                    col.notes.append(f"seed {seed}, {species}: {e}")
        columns = {"seed": np.array(seeds, dtype=float)}
        columns.update({f"t2_{species}_us": v for species, v in values.items()})
        rd.write_table("t2n", columns, {"config_hash": self.config_hash, "seed": self.config.seed}, "table")
        stats = {}
        for species, v in values.items():
            finite = v[np.isfinite(v)]
            stats[species] = {
                "mean_us": float(finite.mean()) if len(finite) else None,
                "std_us": float(finite.std()) if len(finite) else None,
                "min_us": float(finite.min()) if len(finite) else None,
                "max_us": float(finite.max()) if len(finite) else None,
                "samples": int(len(finite)),
            }
            if len(finite):
                col.tables[f"T2* {species} (µs)"] = f"{stats[species]['mean_us']:.6g} ± {stats[species]['std_us']:.2g}"
        rd.write_yaml("t2n.yaml", stats, "table")

    # ─── Summary ─────────────────────────────────────────────────────────

    def _summary_context(self, experiment: str, col: _Collected, files: list[str]) -> dict[str, Any]:
        cfg = self.config
        cce = None
        if experiment in ("hahn_echo", "cpmg_scan", "fid", "spectrum"):
            cce = {
                "order": cfg.cce.order,
                "distance_cutoff": cfg.cce.distance_cutoff,
                "bath_radius_nm": cfg.cce.bath_radius_nm,
                "lindblad": cfg.lindblad.model_dump() if cfg.lindblad.enabled else None,
            }
        return {
            "experiment": experiment,
            "config_hash": self.config_hash,
            "seed": cfg.seed,
            "crystal": str(cfg.crystal),
            "field_t": cfg.field.magnitude_t,
            "field_direction": list(cfg.field.direction),
            "splitting_mhz": electron_splitting(self.g, self.B, cfg.electron_splitting_mhz) / 1e3,
            "lattice": col.lattice,
            "cce": cce,
            "proximal": col.proximal,
            "fits": col.fits,
            "peaks": col.peaks,
            "dips": {name: {"centers": list(d["centers_us"])} for name, d in col.dips.items()},
            "tables": col.tables,
            "nonconverged": col.nonconverged,
            "files": files + [SUMMARY_NAME],
        }


def diff_runs(
    run_a: Path | str,
    run_b: Path | str,
    tau_window: Optional[tuple[float, float]] = None,
    threshold: float = 0.9,
) -> list[RunDiff]:
    """
    Pointwise A − B for every curve file present in both runs, with the dips
    of each residual. Raises RunMismatchError when grids or sequences differ.
    """
    manifest_a, manifest_b = load_manifest(run_a), load_manifest(run_b)
    curves_a = {n for n, e in manifest_a.files.items() if e.kind == "curve"}
    curves_b = {n for n, e in manifest_b.files.items() if e.kind == "curve"}
    common = sorted(curves_a & curves_b)
    if not common:
        raise RunMismatchError("runs share no coherence curves", field="files")
    for name in sorted(curves_a ^ curves_b):
        logger.warning(f"{name} present in only one run, skipped")
    diffs = []
    for name in common:
        a, b = load_curve(run_a, name), load_curve(run_b, name)
        if a.sequence_kind != b.sequence_kind or a.n_pulses != b.n_pulses:
            raise RunMismatchError(f"{name}: sequences differ ({a.label} vs {b.label})", field=name)
        if not a.same_grid(b):
            raise RunMismatchError(f"{name}: τ grids differ", field=name)
        diff = a.with_values(
            a.values - b.values, nonconverged=a.nonconverged | b.nonconverged, config_hash=None, seed=None
        )
        diffs.append(RunDiff(name=name, curve=diff, dips=difference_dips(diff, tau_window, threshold)))
    return diffs


def write_diff(diffs: Sequence[RunDiff], run_a: Path | str, run_b: Path | str, out_dir: Path, fmt: TableFormat = "csv") -> RunManifest:
    """Write the difference curves and their dips as a run directory of its own."""
    manifest_a, manifest_b = load_manifest(run_a), load_manifest(run_b)
    start = time.monotonic()
    with RunDirectory(out_dir, fmt) as rd:
        for d in diffs:
            stem = "diff_" + d.name.rsplit(".", 1)[0]
            rd.write_curve(stem, d.curve)
        rd.write_yaml("dips.yaml", {d.name: _dip_summary(d.dips) for d in diffs}, "table")
        manifest = RunManifest(
            experiment="diff",
            config_hash=f"{manifest_a.config_hash}-{manifest_b.config_hash}",
            seed=manifest_a.seed,
            tool_version=tool_version(),
            wall_time_s=round(time.monotonic() - start, 3),
            files=dict(sorted(rd.files.items())),
            notes=[f"A = {run_a}", f"B = {run_b}"],
        )
        rd.finalize(manifest)
    return manifest
