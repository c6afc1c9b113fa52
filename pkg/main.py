import sys
from pathlib import Path

# Make `app` importable when running from the repository root
sys.path.insert(0, str(Path(__file__).resolve().parent / "simulator"))

from app.cli import main  # noqa: E402


if __name__ == "__main__":
    sys.exit(main())
