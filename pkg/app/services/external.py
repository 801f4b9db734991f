"""
app/services/external.py - External Solver Adapter

Hands a meshed case to an external RANS (k-omega SST) solver and reads the
drag back. The solver itself is a black box: any argv list that runs inside
the case directory and leaves a forces.csv behind will do.

Case directory layout (see docs/case_layout.md):

    <case>/
        case.json                   command, result file, conditions
        constant/mesh.vtk           fluid cells (VTK unstructured grid, mm)
        constant/patches.json       boundary faces per patch
        0/boundary_conditions.json  one record per patch
        0/initial_conditions.json   internal U, p, k, omega
        forces.csv                  written by the solver: "time,drag_N"
        log.external                captured stdout/stderr of the last run
"""

import csv
import json
import os
import subprocess
from enum import Enum
from pathlib import Path

import numpy as np
from loguru import logger
from pydantic import BaseModel, ConfigDict

from app.core.errors import (
    CommandFailedError,
    ExternalTimeoutError,
    ForcesParseError,
    IoFailureError,
    MissingPatchError,
    ResultMissingError,
    SolverError,
)
from app.services.flow import DragReport, FlowConditions, TurbulenceIc
from app.services.mesher import PATCH_NAMES, HexMesh, Patch, export_mesh_vtk

RESULT_FILE = "forces.csv"
RESULT_HEADER = ["time", "drag_N"]
LOG_FILE = "log.external"
LOCK_FILE = ".anvil.lock"


class BoundaryType(str, Enum):
    """Boundary condition kinds (OpenFOAM vocabulary)."""

    FIXED_VALUE = "fixedValue"
    ZERO_GRADIENT = "zeroGradient"
    NO_SLIP = "noSlip"
    SYMMETRY = "symmetry"
    WALL_FUNCTION = "wallFunction"


class FieldCondition(BaseModel):
    model_config = ConfigDict(frozen=True)

    type: BoundaryType
    value: float | tuple[float, float, float] | None = None


class BoundaryConditionRecord(BaseModel):
    """Conditions of every solved field on one patch."""

    model_config = ConfigDict(frozen=True)

    patch: str
    faces: int
    U: FieldCondition
    p: FieldCondition
    k: FieldCondition
    omega: FieldCondition


class ExternalCase(BaseModel):
    model_config = ConfigDict(frozen=True)

    directory: str
    command: tuple[str, ...]
    result_file: str = RESULT_FILE
    conditions: FlowConditions
    turbulence: TurbulenceIc
    boundary_conditions: tuple[BoundaryConditionRecord, ...]
    reference_area: float  # m^2
    body_length: float  # m

    @property
    def path(self) -> Path:
        return Path(self.directory)


def _records(mesh: HexMesh, cond: FlowConditions, ic: TurbulenceIc) -> tuple[BoundaryConditionRecord, ...]:
    counts = mesh.patch_counts()
    inlet_u = (cond.inlet_speed, 0.0, 0.0)
    return (
        BoundaryConditionRecord(
            patch="inlet",
            faces=counts["inlet"],
            U=FieldCondition(type=BoundaryType.FIXED_VALUE, value=inlet_u),
            p=FieldCondition(type=BoundaryType.ZERO_GRADIENT),
            k=FieldCondition(type=BoundaryType.FIXED_VALUE, value=ic.k),
            omega=FieldCondition(type=BoundaryType.FIXED_VALUE, value=ic.omega),
        ),
        BoundaryConditionRecord(
            patch="outlet",
            faces=counts["outlet"],
            U=FieldCondition(type=BoundaryType.ZERO_GRADIENT),
            p=FieldCondition(type=BoundaryType.FIXED_VALUE, value=0.0),
            k=FieldCondition(type=BoundaryType.ZERO_GRADIENT),
            omega=FieldCondition(type=BoundaryType.ZERO_GRADIENT),
        ),
        BoundaryConditionRecord(
            patch="symmetry",
            faces=counts["symmetry"],
            U=FieldCondition(type=BoundaryType.SYMMETRY),
            p=FieldCondition(type=BoundaryType.SYMMETRY),
            k=FieldCondition(type=BoundaryType.SYMMETRY),
            omega=FieldCondition(type=BoundaryType.SYMMETRY),
        ),
        BoundaryConditionRecord(
            patch="body",
            faces=counts["body"],
            U=FieldCondition(type=BoundaryType.NO_SLIP, value=(0.0, 0.0, 0.0)),
            p=FieldCondition(type=BoundaryType.ZERO_GRADIENT),
            k=FieldCondition(type=BoundaryType.WALL_FUNCTION, value=ic.k),
            omega=FieldCondition(type=BoundaryType.WALL_FUNCTION, value=ic.omega),
        ),
    )


def _patch_faces(mesh: HexMesh) -> dict[str, dict]:
    """Boundary faces per patch, indexed by position in the exported cell list."""
    faces = mesh.faces
    exported = np.full(len(mesh.level), -1, dtype=np.int64)
    exported[np.flatnonzero(mesh.fluid)] = np.arange(mesh.cell_count)

    patches = {}
    for patch, name in PATCH_NAMES.items():
        sel = faces.patch == patch
        patches[name] = {
            "faces": int(np.count_nonzero(sel)),
            "area_m2": float(faces.area[sel].sum() / 1e6),
            # [cell, axis, sign]: the face of `cell` normal to `axis` on the `sign` side
            "cell_faces": np.column_stack(
                [exported[faces.owner[sel]], faces.axis[sel], faces.sign[sel]]
            ).tolist(),
        }
    return patches


def _write_json(path: Path, payload: dict) -> None:
    try:
        path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    except OSError as e:
        raise IoFailureError(f"cannot write {path}: {e}") from e


def emit_external_case(
    mesh: HexMesh,
    cond: FlowConditions,
    ic: TurbulenceIc,
    directory: str | Path,
    command: tuple[str, ...] | list[str],
    reference_area: float,
    body_length: float,
) -> ExternalCase:
    """
    Write a case directory for an external solver.

    Args:
        mesh: Castellated mesh with inlet, outlet, symmetry and body patches
        cond: Free-stream conditions (inlet U, outlet p = 0)
        ic: Initial and inlet k / omega
        directory: Case directory (created if missing)
        command: argv list run inside the directory
        reference_area: Frontal area of the body (m^2)
        body_length: Flow-axis body length (m)

    Returns:
        The ExternalCase, also written to case.json

    Raises:
        MissingPatchError: If any of the four patch kinds has no faces
        IoFailureError: If the directory cannot be written
    """
    # 1. Every patch kind must exist
    counts = mesh.patch_counts()
    for patch in (Patch.INLET, Patch.OUTLET, Patch.SYMMETRY, Patch.BODY):
        if counts[PATCH_NAMES[patch]] == 0:
            raise MissingPatchError(PATCH_NAMES[patch])

    # 2. Directory skeleton
    root = Path(directory)
    try:
        (root / "constant").mkdir(parents=True, exist_ok=True)
        (root / "0").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise IoFailureError(f"cannot create case directory {root}: {e}") from e

    # 3. Mesh and patches
    export_mesh_vtk(mesh, root / "constant" / "mesh.vtk")
    _write_json(root / "constant" / "patches.json", _patch_faces(mesh))

    # 4. Boundary and initial conditions
    records = _records(mesh, cond, ic)
    _write_json(
        root / "0" / "boundary_conditions.json",
        {"patches": [r.model_dump(mode="json") for r in records]},
    )
    _write_json(
        root / "0" / "initial_conditions.json",
        {
            "U": [cond.inlet_speed, 0.0, 0.0],
            "p": 0.0,
            "k": ic.k,
            "omega": ic.omega,
            "kinematic_viscosity": cond.kinematic_viscosity,
        },
    )

    case = ExternalCase(
        directory=str(root),
        command=tuple(command),
        conditions=cond,
        turbulence=ic,
        boundary_conditions=records,
        reference_area=reference_area,
        body_length=body_length,
    )
    _write_json(root / "case.json", case.model_dump(mode="json"))
    logger.info(f"external case written to {root} ({mesh.cell_count} cells)")
    return case


# ============ Running ============


def parse_forces(path: Path) -> tuple[float, float]:
    """
    Read forces.csv and return the last (time, drag_N) row.

    Raises:
        ResultMissingError: If the file does not exist
        ForcesParseError: If the header is wrong, a row is malformed, or there are no rows
    """
    if not path.is_file():
        raise ResultMissingError(f"{path} was not written")

    with path.open(newline="", encoding="utf-8") as handle:
        rows = [row for row in csv.reader(handle)]

    if not rows:
        raise ForcesParseError(1, "empty file")
    if [cell.strip() for cell in rows[0]] != RESULT_HEADER:
        raise ForcesParseError(1, ",".join(rows[0]))

    last: tuple[float, float] | None = None
    for number, row in enumerate(rows[1:], start=2):
        if not any(cell.strip() for cell in row):
            continue
        try:
            time, drag = (float(cell) for cell in row)
        except ValueError:
            raise ForcesParseError(number, ",".join(row)) from None
        if not (np.isfinite(time) and np.isfinite(drag)):
            raise ForcesParseError(number, ",".join(row))
        last = (time, drag)

    if last is None:
        raise ForcesParseError(len(rows) + 1, "no data rows")
    return last


def run_external(case: ExternalCase, timeout: float) -> DragReport:
    """
    Run the configured command inside the case directory and read the drag.

    At most one run per case directory: a lock file guards the directory for
    the duration of the command.

    Raises:
        SolverError: If another run holds the case directory
        ExternalTimeoutError: If the command outlives timeout seconds
        CommandFailedError: On a non-zero exit code (captured output attached)
        ResultMissingError / ForcesParseError: On a missing or malformed forces.csv
    """
    root = case.path
    lock = root / LOCK_FILE
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise SolverError(f"case directory {root} is already in use") from None
    os.close(fd)

    try:
        # 1. Run
        logger.info(f"running external solver: {' '.join(case.command)}")
        try:
            completed = subprocess.run(
                list(case.command),
                cwd=root,
                capture_output=True,
                text=True,
                timeout=timeout,
                check=False,
            )
        except subprocess.TimeoutExpired as e:
            raise ExternalTimeoutError(f"external command exceeded {timeout}s") from e
        except OSError as e:
            raise CommandFailedError(-1, str(e)) from e

        output = (completed.stdout or "") + (completed.stderr or "")
        (root / LOG_FILE).write_text(output, encoding="utf-8")
        if completed.returncode != 0:
            raise CommandFailedError(completed.returncode, output)

        # 2. Parse
        time, drag = parse_forces(root / case.result_file)
    finally:
        lock.unlink(missing_ok=True)

    cond = case.conditions
    coefficient = 2.0 * drag / (cond.density * cond.inlet_speed**2 * case.reference_area)
    logger.info(f"external drag={drag:.6e}N at time={time:g}")
    return DragReport(
        drag_force=drag,
        lateral_force=(0.0, 0.0),
        reference_area=case.reference_area,
        drag_coefficient=coefficient,
        iterations=int(time),
        reynolds=cond.reynolds(case.body_length),
        converged=True,
    )
