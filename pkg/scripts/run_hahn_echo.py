#!/usr/bin/env python3
"""
Pure-yttrium Hahn echo and its spectrum (ESEEM at the 89Y Larmor frequency).
Run from project root: uv run python scripts/run_hahn_echo.py [--seed N]
"""
import argparse
import logging
import sys
from pathlib import Path

# Add simulator/ to path so we can import app
sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "simulator"))

from app.schemas.experiment import load_experiment_file
from app.services.outputs import load_manifest
from app.services.runner import ExperimentRunner

logging.basicConfig(
    level=logging.INFO,
    format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
)

CONFIGS = Path(__file__).resolve().parent.parent / "docs" / "configs"


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seed", type=int, default=None)
    args = parser.parse_args()

    worst = 0
    for experiment, config_name in (("hahn_echo", "hahn_echo.yaml"), ("spectrum", "spectrum.yaml")):
        config = load_experiment_file(CONFIGS / config_name).with_updates(seed=args.seed)
        result = ExperimentRunner(config).run(experiment)
        worst = max(worst, result.exit_code)
        print(f"{experiment}: {result.run_dir}")
        for note in load_manifest(result.run_dir).notes:
            print(f"  note: {note}")
    return worst


if __name__ == "__main__":
    sys.exit(main())
