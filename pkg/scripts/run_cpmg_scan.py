#!/usr/bin/env python3
"""
CPMG-1/2/5 scan with a forced 29Si and its no-silicon reference.
Run from project root: uv run python scripts/run_cpmg_scan.py [config.yaml]
"""
import logging
import sys
from pathlib import Path

# Add simulator/ to path so we can import app
sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "simulator"))

from app.schemas.experiment import load_experiment_file
from app.services.runner import ExperimentRunner

logging.basicConfig(
    level=logging.INFO,
    format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
)

DEFAULT_CONFIG = Path(__file__).resolve().parent.parent / "docs" / "configs" / "cpmg_scan.yaml"


def main() -> int:
    config_path = Path(sys.argv[1]) if len(sys.argv) > 1 else DEFAULT_CONFIG
    try:
        result = ExperimentRunner(load_experiment_file(config_path)).run("cpmg_scan")
    except Exception as e:
        logging.exception("CPMG scan failed: %s", e)
        print(f"Error during CPMG scan: {e}")
        return 1
    print(f"CPMG scan completed: {result.run_dir}")
    return result.exit_code


if __name__ == "__main__":
    sys.exit(main())
