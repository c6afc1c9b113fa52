"""
Run summary renderer (Markdown from a Jinja template).
"""
from pathlib import Path
from typing import Any, Optional

from jinja2 import Environment, FileSystemLoader, StrictUndefined

TEMPLATES_DIR = Path(__file__).resolve().parents[1] / "templates"
SUMMARY_TEMPLATE = "run_summary.md.j2"


def _environment(templates_dir: Path) -> Environment:
    return Environment(
        loader=FileSystemLoader(str(templates_dir)),
        autoescape=False,
        keep_trailing_newline=True,
        undefined=StrictUndefined,
    )


def render_run_summary(context: dict[str, Any], templates_dir: Optional[Path] = None) -> str:
    """
    Render the summary for one run. `context` must carry experiment, config_hash,
    seed, crystal, field_t, field_direction, splitting_mhz and files; the other
    sections (lattice, cce, proximal, fits, peaks, dips, tables, nonconverged)
    are optional and skipped when empty.
    """
    ctx = {
        "lattice": None,
        "cce": None,
        "proximal": [],
        "fits": {},
        "peaks": [],
        "dips": {},
        "tables": {},
        "nonconverged": {},
    }
    ctx.update(context)
    tpl = _environment(templates_dir or TEMPLATES_DIR).get_template(SUMMARY_TEMPLATE)
    return tpl.render(**ctx)
