"""
Run-directory file writing.

Every data file is written atomically (temp file in the same directory, then
os.replace), checksummed, and recorded for the manifest. Floats are written
with 17 significant digits so that parsing a table reproduces the in-memory
values exactly.
"""
import hashlib
import json
import logging
import os
import tempfile
import threading
from pathlib import Path
from typing import Any, Literal, Mapping, Optional

import numpy as np
import yaml

from app.models.curve import CoherenceCurve
from app.schemas.manifest import MANIFEST_NAME, OutputEntry, RunManifest

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"
LOCK_NAME = ".lock"
CURVE_COLUMNS = ("tau_us", "time_us", "re", "im", "abs", "nonconverged")
SPECTRUM_COLUMNS = ("freq_khz", "magnitude")

TableFormat = Literal["csv", "json"]


class OutputError(Exception):
    """Raised when a run directory cannot be written or read back."""


class RunDirectoryLockedError(OutputError):
    def __init__(self, path: Path):
        self.path = path
        super().__init__(f"run directory {path} is locked by another run")


class RunMismatchError(ValueError):
    """Two runs cannot be compared; `field` names what differs."""

    def __init__(self, message: str, field: Optional[str] = None):
        self.field = field
        super().__init__(message)


def format_float(x: float) -> str:
    return FLOAT_FORMAT % float(x)


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def write_atomic(path: Path, data: bytes | str) -> str:
    """Write `data` to `path` atomically; returns its SHA-256."""
    payload = data.encode("utf-8") if isinstance(data, str) else data
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp_name, path)
    except BaseException:
        Path(tmp_name).unlink(missing_ok=True)
        raise
    return sha256_bytes(payload)


# ─── Tables ──────────────────────────────────────────────────────────────


def render_table(columns: Mapping[str, np.ndarray], meta: Mapping[str, Any], fmt: TableFormat = "csv") -> str:
    """
    CSV: `# key=<json>` metadata lines, a header, then rows in %.17g.
    JSON: {"meta": ..., "columns": {name: [...]}} (floats use the shortest exact repr).
    """
    arrays = {name: np.asarray(values, dtype=float) for name, values in columns.items()}
    lengths = {len(a) for a in arrays.values()}
    if len(lengths) > 1:
        raise OutputError(f"table columns have different lengths: {sorted(lengths)}")
    if fmt == "json":
        payload = {"meta": dict(meta), "columns": {name: a.tolist() for name, a in arrays.items()}}
        return json.dumps(payload, indent=1) + "\n"
    if fmt != "csv":
        raise OutputError(f"unknown table format {fmt!r}")
    lines = [f"# {key}={json.dumps(value)}" for key, value in meta.items()]
    lines.append(",".join(arrays))
    stacked = np.column_stack(list(arrays.values())) if arrays else np.zeros((0, 0))
    lines.extend(",".join(format_float(x) for x in row) for row in stacked)
    return "\n".join(lines) + "\n"


def parse_table(text: str, fmt: TableFormat = "csv") -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    if fmt == "json":
        payload = json.loads(text)
        return payload["meta"], {name: np.asarray(v, dtype=float) for name, v in payload["columns"].items()}
    meta: dict[str, Any] = {}
    rows: list[list[float]] = []
    header: Optional[list[str]] = None
    for line in text.splitlines():
        if not line:
            continue
        if line.startswith("# "):
            key, _, value = line[2:].partition("=")
            meta[key] = json.loads(value)
        elif header is None:
            header = line.split(",")
        else:
            rows.append([float(x) for x in line.split(",")])
    if header is None:
        raise OutputError("table has no header")
    data = np.array(rows, dtype=float).reshape(len(rows), len(header))
    return meta, {name: data[:, i].copy() for i, name in enumerate(header)}


def curve_table(curve: CoherenceCurve) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    columns = {
        "tau_us": curve.taus,
        "time_us": curve.times,
        "re": curve.values.real,
        "im": curve.values.imag,
        "abs": np.abs(curve.values),
        "nonconverged": curve.nonconverged.astype(float),
    }
    meta = {
        "config_hash": curve.config_hash,
        "seed": curve.seed,
        "sequence_kind": curve.sequence_kind,
        "n_pulses": curve.n_pulses,
    }
    return columns, meta


def curve_from_table(meta: Mapping[str, Any], columns: Mapping[str, np.ndarray]) -> CoherenceCurve:
    missing = [c for c in CURVE_COLUMNS if c not in columns]
    if missing:
        raise OutputError(f"not a coherence table, missing columns {missing}")
    return CoherenceCurve(
        taus=columns["tau_us"],
        times=columns["time_us"],
        values=columns["re"] + 1j * columns["im"],
        sequence_kind=meta.get("sequence_kind", "HAHN"),
        n_pulses=int(meta.get("n_pulses", 1)),
        seed=meta.get("seed"),
        config_hash=meta.get("config_hash"),
        nonconverged=columns["nonconverged"] != 0.0,
    )


def _plain(value: Any) -> Any:
    """numpy scalars/arrays and tuples to plain YAML-safe types."""
    if isinstance(value, Mapping):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return [_plain(v) for v in value.tolist()]
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, Path):
        return str(value)
    return value


def render_yaml(data: Mapping[str, Any]) -> str:
    return yaml.safe_dump(_plain(data), sort_keys=False, default_flow_style=False, allow_unicode=True)


# ─── Run directory ───────────────────────────────────────────────────────


class RunDirectory:
    """
    A locked output directory. Writes are serialized and recorded with their
    checksums; `finalize` writes the manifest last.
    """

    def __init__(self, path: Path | str, fmt: TableFormat = "csv"):
        self.path = Path(path)
        self.fmt = fmt
        self.files: dict[str, OutputEntry] = {}
        self._write_lock = threading.Lock()
        self._locked = False
        self.logger = logging.getLogger(self.__class__.__name__)

    @property
    def table_suffix(self) -> str:
        return ".json" if self.fmt == "json" else ".csv"

    def __enter__(self) -> "RunDirectory":
        self.path.mkdir(parents=True, exist_ok=True)
        lock = self.path / LOCK_NAME
        try:
            fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RunDirectoryLockedError(self.path) from None
        with os.fdopen(fd, "w") as fh:
            fh.write(str(os.getpid()))
        self._locked = True
        self._discard_previous()
        return self

    def __exit__(self, *exc) -> bool:
        if self._locked:
            (self.path / LOCK_NAME).unlink(missing_ok=True)
            self._locked = False
        return False

    def _discard_previous(self) -> None:
        """Drop the manifest of an earlier run here, and the files it listed."""
        manifest_path = self.path / MANIFEST_NAME
        if not manifest_path.exists():
            return
        try:
            previous = RunManifest.model_validate_json(manifest_path.read_text(encoding="utf-8"))
            for name in previous.files:
                (self.path / name).unlink(missing_ok=True)
        except ValueError as e:
            self.logger.warning(f"Unreadable manifest in {self.path}: {e}")
        manifest_path.unlink(missing_ok=True)
        self.logger.info(f"Replaced previous run in {self.path}")

    def write(self, name: str, data: bytes | str, kind: str) -> Path:
        if not self._locked:
            raise OutputError("run directory is not open")
        if name == MANIFEST_NAME or name == LOCK_NAME:
            raise OutputError(f"{name} is reserved")
        target = self.path / name
        with self._write_lock:
            digest = write_atomic(target, data)
            self.files[name] = OutputEntry(sha256=digest, kind=kind)
        self.logger.debug(f"Wrote {name} ({kind})")
        return target

    def write_table(self, stem: str, columns: Mapping[str, np.ndarray], meta: Mapping[str, Any], kind: str) -> str:
        name = stem + self.table_suffix
        self.write(name, render_table(columns, meta, self.fmt), kind)
        return name

    def write_curve(self, stem: str, curve: CoherenceCurve) -> str:
        columns, meta = curve_table(curve)
        return self.write_table(stem, columns, meta, "curve")

    def write_yaml(self, name: str, data: Mapping[str, Any], kind: str) -> str:
        self.write(name, render_yaml(data), kind)
        return name

    def write_plot(self, name: str, svg: bytes) -> str:
        self.write(name, svg, "plot")
        return name

    def finalize(self, manifest: RunManifest) -> Path:
        """Write the manifest (atomic completion marker)."""
        missing = set(self.files) - set(manifest.files)
        if missing:
            raise OutputError(f"manifest does not list {sorted(missing)}")
        target = self.path / MANIFEST_NAME
        with self._write_lock:
            write_atomic(target, manifest.model_dump_json(indent=1) + "\n")
        return target


# ─── Reading runs back ───────────────────────────────────────────────────


def load_manifest(run_dir: Path | str) -> RunManifest:
    path = Path(run_dir) / MANIFEST_NAME
    if not path.exists():
        raise OutputError(f"{run_dir} has no manifest (incomplete or not a run directory)")
    return RunManifest.model_validate_json(path.read_text(encoding="utf-8"))


def table_format(name: str) -> TableFormat:
    return "json" if name.endswith(".json") else "csv"


def load_curve(run_dir: Path | str, name: str) -> CoherenceCurve:
    text = (Path(run_dir) / name).read_text(encoding="utf-8")
    meta, columns = parse_table(text, table_format(name))
    return curve_from_table(meta, columns)


def verify_run(run_dir: Path | str) -> list[str]:
    """Checksum mismatches, missing listed files and orphan files; empty when consistent."""
    run_dir = Path(run_dir)
    manifest = load_manifest(run_dir)
    problems = []
    for name, entry in manifest.files.items():
        path = run_dir / name
        if not path.exists():
            problems.append(f"missing {name}")
        elif sha256_bytes(path.read_bytes()) != entry.sha256:
            problems.append(f"checksum mismatch {name}")
    for path in sorted(run_dir.iterdir()):
        if path.name in (MANIFEST_NAME, LOCK_NAME) or path.is_dir():
            continue
        if path.name not in manifest.files:
            problems.append(f"orphan {path.name}")
    return problems
