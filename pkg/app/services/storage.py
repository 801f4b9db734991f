"""
app/services/storage.py - Run Artifact Storage

Everything a run leaves on disk lives under its output directory:

    {output_dir}/
        dataset.csv            data generation rows, ordered by sample index
        dataset.columns.json   column names, units and descriptions
        manifest.json          written last, on success and on failure
        ...                    mode-specific artifacts

Dataset rows are buffered and flushed every batch_size rows. A flush
rewrites the whole file through a temporary file and an atomic rename, so an
interrupted run leaves a complete file holding every flushed row. Re-running
on a partial dataset resumes: indices already present are skipped.
"""

import csv
import json
import os
from collections import Counter
from contextlib import contextmanager
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterator

from loguru import logger
from pydantic import BaseModel, Field

from app.core.config import TOOL_VERSION
from app.core.errors import AnvilError, IoFailureError
from app.core.run_config import RunConfig, config_hash

DATASET_FILE = "dataset.csv"
COLUMNS_FILE = "dataset.columns.json"
MANIFEST_FILE = "manifest.json"


def ensure_output_dir(path: str | Path) -> Path:
    """Create the output directory; IoFailureError if that is impossible."""
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise IoFailureError(f"cannot create output directory {path}: {e}") from e
    if not os.access(path, os.W_OK):
        raise IoFailureError(f"output directory {path} is not writable")
    return path


def write_json(path: str | Path, payload: dict) -> Path:
    path = Path(path)
    try:
        path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    except OSError as e:
        raise IoFailureError(f"cannot write {path}: {e}") from e
    return path


# ============ Dataset ============


class DatasetRow(BaseModel):
    index: int = Field(ge=0)
    params: dict[str, float]  # mm, design-space order
    mesh_attempts: int = 0
    drag: float | None = None  # N
    status: str = "ok"  # "ok" or the failure code
    wall_time: float = 0.0  # s


class DatasetWriter:
    """
    Buffered CSV writer for data-generation rows.

    Example:
        writer = DatasetWriter(out_dir, ["x1", "x2"], batch_size=10)
        for row in rows:
            writer.add(row)   # flushes every 10 rows
        writer.close()
    """

    def __init__(self, directory: str | Path, names: list[str], batch_size: int) -> None:
        self.directory = Path(directory)
        self.names = list(names)
        self.batch_size = batch_size
        self.path = self.directory / DATASET_FILE
        self.columns = ["index", *self.names, "mesh_attempts", "drag_N", "status", "wall_time_s"]
        self._rows: dict[int, list[str]] = {}
        self._pending = 0

        if self.path.is_file():
            self._load_existing()
        self._write_columns()

    # ---------- resume ----------

    def _load_existing(self) -> None:
        with self.path.open(newline="", encoding="utf-8") as handle:
            reader = csv.reader(handle)
            header = next(reader, None)
            if header is None:
                return
            if header != self.columns:
                raise IoFailureError(f"{self.path} has columns {header}, expected {self.columns}")
            for row in reader:
                if row:
                    self._rows[int(row[0])] = row
        logger.info(f"resuming dataset {self.path}: {len(self._rows)} rows present")

    @property
    def done(self) -> set[int]:
        """Sample indices already on disk or buffered."""
        return set(self._rows)

    def rows(self) -> list[list[str]]:
        return [self._rows[i] for i in sorted(self._rows)]

    # ---------- writing ----------

    def _write_columns(self) -> None:
        units = {name: "mm" for name in self.names}
        units.update({"index": "", "mesh_attempts": "", "drag_N": "N", "status": "", "wall_time_s": "s"})
        descriptions = {
            "index": "sample index in the sample plan",
            "mesh_attempts": "auto-meshing attempts made",
            "drag_N": "drag force along +x, empty on failure",
            "status": "'ok' or the failure code",
            "wall_time_s": "evaluation wall time",
        }
        write_json(
            self.directory / COLUMNS_FILE,
            {
                "columns": [
                    {"name": c, "unit": units[c], "description": descriptions.get(c, "design parameter")}
                    for c in self.columns
                ]
            },
        )

    def add(self, row: DatasetRow) -> None:
        if list(row.params) != self.names:
            raise IoFailureError(f"row {row.index} has parameters {list(row.params)}, expected {self.names}")
        self._rows[row.index] = [
            str(row.index),
            *(repr(row.params[n]) for n in self.names),
            str(row.mesh_attempts),
            "" if row.drag is None else repr(row.drag),
            row.status,
            f"{row.wall_time:.3f}",
        ]
        self._pending += 1
        if self._pending >= self.batch_size:
            self.flush()

    def flush(self) -> None:
        tmp = self.path.with_suffix(".csv.tmp")
        try:
            with tmp.open("w", newline="", encoding="utf-8") as handle:
                writer = csv.writer(handle, lineterminator="\n")
                writer.writerow(self.columns)
                writer.writerows(self.rows())
            os.replace(tmp, self.path)
        except OSError as e:
            raise IoFailureError(f"cannot write {self.path}: {e}") from e
        logger.debug(f"flushed {self._pending} rows to {self.path} ({len(self._rows)} total)")
        self._pending = 0

    def close(self) -> None:
        if self._pending or not self.path.is_file():
            self.flush()


# ============ Manifest ============


class RunManifest(BaseModel):
    config_hash: str
    tool_version: str = TOOL_VERSION
    mode: str
    started_at: str
    finished_at: str | None = None
    status: str = "running"  # "ok" or the failure code
    error: str | None = None
    stage_timings: dict[str, float] = {}
    failure_counts: dict[str, int] = {}
    artifacts: list[str] = []


class RunRecorder:
    """Collects what the manifest reports while a run is in progress."""

    def __init__(self, config: RunConfig, directory: Path) -> None:
        self.directory = directory
        self.timings: dict[str, float] = {}
        self.failures: Counter[str] = Counter()
        self.artifacts: list[str] = []
        self.manifest = RunManifest(
            config_hash=config_hash(config),
            mode=config.mode.value,
            started_at=_now(),
        )

    def add_timings(self, timings: dict[str, float]) -> None:
        for name, elapsed in timings.items():
            self.timings[name] = self.timings.get(name, 0.0) + elapsed

    def failed(self, code: str) -> None:
        self.failures[code] += 1

    def artifact(self, path: str | Path) -> None:
        """Record an artifact relative to the output directory."""
        self.artifacts.append(str(Path(path).relative_to(self.directory)))

    def finish(self, status: str, error: str | None = None) -> RunManifest:
        return self.manifest.model_copy(
            update={
                "finished_at": _now(),
                "status": status,
                "error": error,
                "stage_timings": dict(self.timings),
                "failure_counts": dict(sorted(self.failures.items())),
                "artifacts": list(self.artifacts),
            }
        )


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@contextmanager
def run_session(config: RunConfig, directory: str | Path) -> Iterator[RunRecorder]:
    """
    Bracket a run: create the output directory and write manifest.json last.

    The manifest is written whether the body returns or raises; a raised
    AnvilError is recorded by its code, anything else as "internal_error".

    Example:
        with run_session(config, out_dir) as run:
            run.add_timings(evaluation.timings)
    """
    directory = ensure_output_dir(directory)
    recorder = RunRecorder(config, directory)
    logger.info(f"run started mode={config.mode.value} out={directory} hash={recorder.manifest.config_hash[:12]}")
    try:
        yield recorder
    except AnvilError as e:
        write_json(directory / MANIFEST_FILE, recorder.finish(e.code, str(e)).model_dump())
        raise
    except BaseException as e:
        write_json(directory / MANIFEST_FILE, recorder.finish("internal_error", repr(e)).model_dump())
        raise
    else:
        write_json(directory / MANIFEST_FILE, recorder.finish("ok").model_dump())
        logger.info(f"run finished mode={config.mode.value} failures={dict(recorder.failures)}")


def load_manifest(directory: str | Path) -> RunManifest:
    path = Path(directory) / MANIFEST_FILE
    return RunManifest.model_validate_json(path.read_text(encoding="utf-8"))
