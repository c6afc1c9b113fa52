"""
End-to-end tests: experiments on the toy crystal through the runner and the CLI.
"""
import numpy as np
import pytest

TOY_BASE = """
crystal: docs/crystals/toy_cubic.yaml
box_nm: [1.2, 1.2, 1.2]
seed: 4
cce:
  order: 2
  bath_radius_nm: null
"""

EMPTY_BATH = """
species_overrides:
  Y: {abundance: 0.0}
  Si: {abundance: 0.0}
"""


def _config_file(tmp_path, body: str, name: str = "config.yaml"):
    path = tmp_path / name
    path.write_text(TOY_BASE + body, encoding="utf-8")
    return path


def _runner(path, out, **kwargs):
    from app.schemas.experiment import load_experiment_file
    from app.services.runner import ExperimentRunner

    return ExperimentRunner(load_experiment_file(path), out_dir=out, workers=1, **kwargs)


class TestCli:
    def test_fid_on_empty_bath_is_fully_coherent(self, tmp_path):
        from app.cli import EXIT_OK, main
        from app.services.outputs import load_curve, verify_run

        cfg = _config_file(tmp_path, EMPTY_BATH + "sequence:\n  kind: FID\n  n_pulses: 0\n  tau: {start: 0.0, stop: 5.0, num: 11}\n")
        out = tmp_path / "fid"
        assert main(["fid", "--config", str(cfg), "--out", str(out), "--workers", "1"]) == EXIT_OK
        curve = load_curve(out, "coherence_fid.csv")
        assert np.all(curve.values == 1.0)
        assert verify_run(out) == []

    def test_bad_config_exits_with_2(self, tmp_path):
        from app.cli import EXIT_CONFIG, main

        cfg = tmp_path / "bad.yaml"
        cfg.write_text("cce:\n  order: 9\n", encoding="utf-8")
        assert main(["hahn_echo", "--config", str(cfg), "--out", str(tmp_path / "out")]) == EXIT_CONFIG
        assert not (tmp_path / "out").exists()

    def test_lindblad_without_proximal_spin_exits_with_2(self, tmp_path):
        from app.cli import EXIT_CONFIG, main

        cfg = _config_file(tmp_path, EMPTY_BATH + "lindblad: {enabled: true}\n")
        out = tmp_path / "out"
        assert main(["hahn_echo", "--config", str(cfg), "--out", str(out), "--workers", "1"]) == EXIT_CONFIG
        assert not (out / ".lock").exists()
        assert not (out / "manifest.json").exists()

    def test_unknown_proximal_species_exits_with_2(self, tmp_path):
        from app.cli import EXIT_CONFIG, main

        cfg = _config_file(tmp_path, "proximal:\n  - {species: Xe, distance: 3.5}\n")
        assert main(["hahn_echo", "--config", str(cfg), "--out", str(tmp_path / "out"), "--workers", "1"]) == EXIT_CONFIG

    def test_noisy_spin_outside_bath_radius_exits_with_2(self, tmp_path):
        from app.cli import EXIT_CONFIG, main

        cfg = tmp_path / "far.yaml"
        cfg.write_text(
            "crystal: docs/crystals/toy_cubic.yaml\n"
            "box_nm: [1.2, 1.2, 1.2]\n"
            "cce: {order: 2, bath_radius_nm: 1.0}\n"
            "proximal:\n  - {species: Si, position: [30.0, 0.0, 0.0]}\n"
            "lindblad: {enabled: true}\n"
            "sequence:\n  tau: {start: 0.0, stop: 1.0, num: 5}\n",
            encoding="utf-8",
        )
        out = tmp_path / "out"
        assert main(["hahn_echo", "--config", str(cfg), "--out", str(out), "--workers", "1"]) == EXIT_CONFIG
        assert not (out / "manifest.json").exists()

    def test_unconverged_fit_exits_with_3(self, tmp_path):
        from app.cli import EXIT_NONCONVERGED, main
        from app.services.outputs import load_manifest, verify_run

        cfg = _config_file(tmp_path, EMPTY_BATH + "sequence:\n  tau: {start: 0.0, stop: 5.0, num: 11}\n")
        out = tmp_path / "echo"
        assert main(["hahn_echo", "--config", str(cfg), "--out", str(out), "--workers", "1"]) == EXIT_NONCONVERGED
        manifest = load_manifest(out)
        assert manifest.unconverged_fits == ["echo_envelope"]
        assert "coherence_hahn.csv" in manifest.files
        assert verify_run(out) == []

    def test_seed_accepts_hex(self):
        from app.cli import build_parser

        args = build_parser().parse_args(["occupancy", "--seed", "0x10"])
        assert args.seed == 16

    def test_seed_must_be_unsigned(self):
        from app.cli import build_parser

        with pytest.raises(SystemExit):
            build_parser().parse_args(["occupancy", "--seed", "-1"])


class TestHahnEcho:
    ECHO = "sequence:\n  tau: {start: 0.0, stop: 10.0, num: 41}\n"

    def test_reruns_are_byte_identical(self, tmp_path):
        cfg = _config_file(tmp_path, self.ECHO)
        first = _runner(cfg, tmp_path / "a").run("hahn_echo")
        second = _runner(cfg, tmp_path / "b").run("hahn_echo")
        assert first.manifest.files == second.manifest.files
        for name in first.manifest.files:
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_outputs(self, tmp_path):
        from app.services.outputs import load_curve, parse_table

        cfg = _config_file(tmp_path, self.ECHO)
        result = _runner(cfg, tmp_path / "run").run("hahn_echo")
        files = set(result.manifest.files)
        assert {"coherence_hahn.csv", "readout_hahn.csv", "config.yaml", "summary.md"} <= files
        assert "coherence_hahn.svg" in files
        curve = load_curve(result.run_dir, "coherence_hahn.csv")
        assert curve.values[0] == 1.0
        assert np.allclose(curve.times, 2 * curve.taus)
        meta, _ = parse_table((result.run_dir / "readout_hahn.csv").read_text())
        assert meta["config_hash"] == result.manifest.config_hash
        assert result.manifest.config_hash in (result.run_dir / "summary.md").read_text()

    def test_diff_with_itself_is_zero(self, tmp_path):
        from app.cli import EXIT_OK, main
        from app.services.outputs import verify_run
        from app.services.runner import diff_runs

        cfg = _config_file(tmp_path, self.ECHO)
        run = _runner(cfg, tmp_path / "run").run("hahn_echo").run_dir
        diffs = diff_runs(run, run)
        assert [d.name for d in diffs] == ["coherence_hahn.csv"]
        assert np.all(diffs[0].curve.values == 0)
        assert len(diffs[0].dips) == 0
        assert main(["diff", str(run), str(run), "--out", str(tmp_path / "diff")]) == EXIT_OK
        assert verify_run(tmp_path / "diff") == []

    def test_diff_rejects_different_grids(self, tmp_path):
        from app.services.outputs import RunMismatchError
        from app.services.runner import diff_runs

        a = _runner(_config_file(tmp_path, self.ECHO, "a.yaml"), tmp_path / "a").run("hahn_echo").run_dir
        other = "sequence:\n  tau: {start: 0.0, stop: 10.0, num: 21}\n"
        b = _runner(_config_file(tmp_path, other, "b.yaml"), tmp_path / "b").run("hahn_echo").run_dir
        with pytest.raises(RunMismatchError):
            diff_runs(a, b)

    def test_default_run_directory(self, tmp_path, monkeypatch):
        from app.config import get_settings

        monkeypatch.setenv("CEBATH_OUTPUT_ROOT", str(tmp_path / "runs"))
        get_settings.cache_clear()
        try:
            runner = _runner(_config_file(tmp_path, self.ECHO), None)
            assert runner.run_dir_for("hahn_echo") == tmp_path / "runs" / f"hahn_echo-{runner.config_hash}"
        finally:
            get_settings.cache_clear()

    def test_unknown_experiment(self, tmp_path):
        from app.schemas.experiment import ConfigError

        with pytest.raises(ConfigError):
            _runner(_config_file(tmp_path, self.ECHO), tmp_path / "run").run("rabi")

    def test_dense_silicon_bath_gives_finite_t2(self, tmp_path):
        import yaml

        # flip-flopping 29Si pairs beyond the cleared shell drive the decay
        cfg = tmp_path / "dense.yaml"
        cfg.write_text(
            "crystal: docs/crystals/toy_cubic.yaml\n"
            "box_nm: [2.0, 2.0, 2.0]\n"
            "cce: {order: 2, distance_cutoff: 4.5, bath_radius_nm: null}\n"
            "species_overrides:\n  Y: {abundance: 0.0}\n  Si: {abundance: 1.0}\n"
            "clear:\n  - {species: Si, radius: 6.0}\n"
            "sequence:\n  tau: {start: 0.0, stop: 600.0, num: 61}\n"
            "output: {plots: false}\n",
            encoding="utf-8",
        )
        result = _runner(cfg, tmp_path / "run").run("hahn_echo")
        fits = yaml.safe_load((result.run_dir / "fits.yaml").read_text())
        envelope = fits["echo_envelope"]
        assert envelope["converged"]
        assert 300.0 < envelope["parameters"]["T2"]["value"] < 1200.0
        assert result.exit_code == 0


class TestOtherExperiments:
    def test_spectrum(self, tmp_path):
        from app.services.outputs import parse_table

        body = "species_overrides:\n  Si: {abundance: 0.0}\nsequence:\n  tau: {start: 0.0, stop: 20.0, num: 81}\n"
        result = _runner(_config_file(tmp_path, body), tmp_path / "run").run("spectrum")
        meta, columns = parse_table((result.run_dir / "spectrum_hahn.csv").read_text())
        assert meta["zero_pad_factor"] == 4
        assert np.all(columns["freq_khz"] >= 0)
        assert np.all(columns["magnitude"] >= 0)

    def test_cpmg_scan_with_forced_silicon(self, tmp_path):
        from app.services.outputs import load_curve

        body = (
            "clear:\n  - {species: Si, radius: 6.0}\n"
            "proximal:\n  - {species: Si, distance: 3.5}\n"
            "cpmg_scan:\n  n_values: [1]\n  tau: {start: 0.3, stop: 0.9, num: 31}\n"
            "output: {plots: false}\n"
        )
        result = _runner(_config_file(tmp_path, body), tmp_path / "run").run("cpmg_scan")
        files = set(result.manifest.files)
        assert {"coherence_cpmg1.csv", "reference_cpmg1.csv", "difference_cpmg1.csv"} <= files
        assert not any(name.endswith(".svg") for name in files)
        run = result.run_dir
        diff = load_curve(run, "difference_cpmg1.csv")
        expected = load_curve(run, "coherence_cpmg1.csv").values - load_curve(run, "reference_cpmg1.csv").values
        assert np.array_equal(diff.values, expected)
        assert "3.464" in (run / "summary.md").read_text()

    def test_cpmg_scan_with_lindblad_channel(self, tmp_path):
        body = (
            "clear:\n  - {species: Si, radius: 6.0}\n"
            "proximal:\n  - {species: Si, distance: 3.5}\n"
            "lindblad: {enabled: true, gamma1_khz: 64.0, gamma2_khz: 64.0}\n"
            "cpmg_scan:\n  n_values: [1]\n  tau: {start: 0.3, stop: 0.9, num: 16}\n"
            "output: {plots: false}\n"
        )
        result = _runner(_config_file(tmp_path, body), tmp_path / "run").run("cpmg_scan")
        assert "coherent_cpmg1.csv" in result.manifest.files

    def test_ensemble_scan(self, tmp_path):
        body = (
            "ensemble:\n  members:\n"
            "    - {weight: 0.5, clear: [{species: Si, radius: 6.0}]}\n"
            "    - {weight: 0.5, clear: [{species: Si, radius: 6.0}], proximal: [{species: Si, distance: 3.5}]}\n"
            "cpmg_scan:\n  n_values: [1]\n  tau: {start: 0.3, stop: 0.9, num: 16}\n"
            "output: {plots: false}\n"
        )
        result = _runner(_config_file(tmp_path, body), tmp_path / "run").run("cpmg_scan")
        assert "difference_cpmg1.csv" in result.manifest.files

    def test_occupancy_on_yso(self, tmp_path):
        import yaml

        cfg = tmp_path / "occ.yaml"
        cfg.write_text("occupancy: {species: Si, radius: 6.0, seeds: 200}\noutput: {plots: false}\n", encoding="utf-8")
        result = _runner(cfg, tmp_path / "run").run("occupancy")
        summary = yaml.safe_load((result.run_dir / "occupancy.yaml").read_text())
        assert summary["sites"] == 7
        assert summary["p_none"] == pytest.approx(0.953**7)
        assert summary["nearest_sites"] == 4
        assert result.exit_code == 0

    def test_estimate_t2n(self, tmp_path):
        from app.services.outputs import parse_table

        body = "t2n: {species: [Y], seeds: 2, box_nm: [2.0, 2.0, 2.0]}\noutput: {plots: false}\n"
        result = _runner(_config_file(tmp_path, body), tmp_path / "run").run("estimate_t2n")
        _, columns = parse_table((result.run_dir / "t2n.csv").read_text())
        assert list(columns["seed"]) == [4.0, 5.0]
        assert np.all(columns["t2_Y_us"] > 1e3)


class TestCpmgSplitting:
    # Same placement as docs/configs/cpmg_scan.yaml, on an otherwise empty toy bath.
    PLACED = EMPTY_BATH + "proximal:\n  - {species: Si, position: [2.5456, 0.0, 2.5456]}\noutput: {plots: false}\n"

    def test_cpmg_n_splits_into_n_dips(self, tmp_path):
        from app.services.outputs import load_curve
        from app.services.runner import difference_dips

        body = self.PLACED + "cpmg_scan:\n  n_values: [1, 2, 5]\n  tau: {start: 0.3, stop: 0.9, num: 301}\n  reference: true\n"
        run = _runner(_config_file(tmp_path, body), tmp_path / "run").run("cpmg_scan").run_dir
        for n in (1, 2, 5):
            dips = difference_dips(load_curve(run, f"difference_cpmg{n}.csv"), (0.3, 0.9), 0.9)
            assert len(dips) == n, n
        single = difference_dips(load_curve(run, "difference_cpmg1.csv"), (0.3, 0.9), 0.9)
        assert single.centers[0] == pytest.approx(0.6, abs=0.02)

    def test_dephasing_makes_cpmg5_dips_shallower(self, tmp_path):
        from app.services.analysis import find_dips
        from app.services.outputs import load_curve

        body = (
            self.PLACED
            + "lindblad: {enabled: true, gamma1_khz: 64.0, gamma2_khz: 64.0}\n"
            + "cpmg_scan:\n  n_values: [5]\n  tau: {start: 0.3, stop: 0.9, num: 61}\n"
        )
        run = _runner(_config_file(tmp_path, body), tmp_path / "run").run("cpmg_scan").run_dir
        noisy = find_dips(load_curve(run, "coherence_cpmg5.csv"), threshold=0.9)
        coherent = find_dips(load_curve(run, "coherent_cpmg5.csv"), threshold=0.9)
        assert len(noisy) == len(coherent) == 5
        assert np.allclose(noisy.centers, coherent.centers, atol=0.02)
        assert np.all(noisy.depths < coherent.depths)
