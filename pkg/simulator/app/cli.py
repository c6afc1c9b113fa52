"""
Command-line surface: one subcommand per experiment, plus `diff`.

Exit codes: 0 success, 2 configuration error, 3 numerical non-convergence
(outputs written and flagged in the manifest), 1 anything else.
"""
import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from tqdm import tqdm

from app.config import get_settings
from app.schemas.documents import DocumentError
from app.schemas.experiment import EXPERIMENTS, ExperimentConfig, load_experiment_file
from app.services.analysis import AnalysisError
from app.services.cce_engine import ClusterError
from app.services.dynamics import DensityMatrixError, SequenceError
from app.services.hamiltonian import HamiltonianError
from app.services.lattice import LatticeError
from app.services.outputs import OutputError, RunMismatchError
from app.services.runner import ExperimentRunner, diff_runs, write_diff

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_NONCONVERGED = 3

logger = logging.getLogger(__name__)


class TqdmProgress:
    """Cluster progress bar; a new bar starts whenever the engine restarts its count."""

    def __init__(self, enabled: bool = True):
        self.enabled = enabled
        self.bar: Optional[tqdm] = None
        self.last = 0

    def __call__(self, done: int, total: int) -> None:
        if not self.enabled:
            return
        if self.bar is None or done < self.last or self.bar.total != total:
            self.close()
            self.bar = tqdm(total=total, desc="clusters", unit="cl", leave=False)
        self.bar.update(done - self.bar.n)
        self.last = done

    def close(self) -> None:
        if self.bar is not None:
            self.bar.close()
            self.bar = None
        self.last = 0


def _u64(text: str) -> int:
    value = int(text, 0)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError(f"seed must be an unsigned 64-bit integer, got {text}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cebath", description="Ce3+:Y2SiO5 central-spin decoherence simulator")
    parser.add_argument("--log-level", default=None, help="logging level (default from CEBATH_LOG_LEVEL)")
    sub = parser.add_subparsers(dest="command", required=True)

    for name in EXPERIMENTS:
        p = sub.add_parser(name, help=f"run the {name} experiment")
        p.add_argument("--config", type=Path, default=None, help="experiment YAML (defaults if omitted)")
        p.add_argument("--seed", type=_u64, default=None, help="isotope seed (overrides the config)")
        p.add_argument("--out", type=Path, default=None, help="run directory")
        p.add_argument("--workers", type=int, default=None, help="parallel workers (default: all cores)")
        p.add_argument("--format", choices=("csv", "json"), default=None, help="data table format")
        p.add_argument("--no-plots", action="store_true", help="skip SVG plots")

    d = sub.add_parser("diff", help="difference of two runs and dips of the residual")
    d.add_argument("run_a", type=Path)
    d.add_argument("run_b", type=Path)
    d.add_argument("--out", type=Path, default=None, help="write the differences as a run directory")
    d.add_argument("--format", choices=("csv", "json"), default="csv")
    d.add_argument("--threshold", type=float, default=0.9, help="dip threshold on 1 + ΔRe L")
    d.add_argument("--window", type=float, nargs=2, metavar=("LO", "HI"), default=None, help="τ window (µs)")
    return parser


def _load_config(args: argparse.Namespace) -> ExperimentConfig:
    config = load_experiment_file(args.config) if args.config else ExperimentConfig()
    config = config.with_updates(seed=args.seed)
    if args.no_plots:
        config = config.model_copy(update={"output": config.output.model_copy(update={"plots": False})})
    return config


def run_experiment(args: argparse.Namespace) -> int:
    config = _load_config(args)
    progress = TqdmProgress(get_settings().progress)
    runner = ExperimentRunner(config, out_dir=args.out, workers=args.workers, fmt=args.format, progress=progress)
    try:
        result = runner.run(args.command)
    finally:
        progress.close()
    print(f"{args.command}: {len(result.manifest.files)} files in {result.run_dir} ({result.duration_seconds:.1f}s)")
    if result.exit_code == EXIT_NONCONVERGED:
        print("non-convergence flagged, see manifest.json", file=sys.stderr)
    return result.exit_code


def run_diff(args: argparse.Namespace) -> int:
    window = tuple(args.window) if args.window else None
    diffs = diff_runs(args.run_a, args.run_b, tau_window=window, threshold=args.threshold)
    for d in diffs:
        peak = float(abs(d.curve.values).max()) if len(d.curve.values) else 0.0
        centers = ", ".join(f"{c:.4f}" for c in d.dips.centers)
        print(f"{d.name}: max |Δ| = {peak:.3g}, {len(d.dips)} dips" + (f" at τ = {centers} µs" if centers else ""))
    if args.out is not None:
        write_diff(diffs, args.run_a, args.run_b, args.out, args.format)
        print(f"differences written to {args.out}")
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    level = args.log_level or get_settings().log_level
    logging.basicConfig(
        level=getattr(logging, str(level).upper(), logging.INFO),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    )
    try:
        if args.command == "diff":
            return run_diff(args)
        return run_experiment(args)
    except (
        DocumentError,
        LatticeError,
        HamiltonianError,
        ClusterError,
        SequenceError,
        DensityMatrixError,
        AnalysisError,
        RunMismatchError,
    ) as e:
        logger.error(f"Configuration error: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except OutputError as e:
        logger.error(f"Output error: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
