"""
app/modes/cfd.py - Single-Design CFD Mode

Evaluates one design (a parameter assignment or an STL file) and writes:

    {out}/drag_report.json   DragReport + mesh statistics + conditions
    {out}/body.stl           the evaluated surface
    {out}/mesh.vtk           castellated fluid cells
    {out}/field.vtk          velocity / pressure field (internal backend)
    {out}/case/              external case directory (external backend)

Mesh failures leave mesh_attempts.json with the attempt log before the
error propagates.
"""

from pathlib import Path

from app.core.errors import AutoMeshExhaustedError, NotConvergedError
from app.core.logging import stage
from app.core.run_config import Mode, RunConfig
from app.services.flow import DragReport, export_field
from app.services.mesher import export_mesh_vtk
from app.services.pipeline import DesignEvaluator
from app.services.stl_io import save_stl
from app.services.storage import run_session, write_json

REPORT_FILE = "drag_report.json"


def run_cfd(
    config: RunConfig,
    out_dir: str | Path | None = None,
    stl_path: str | Path | None = None,
    params: dict[str, float] | None = None,
) -> DragReport:
    """
    Run CFD on a single design.

    Args:
        config: Run configuration with mode=Cfd
        out_dir: Overrides config.output_dir
        stl_path: Evaluate this STL body (unscaled) instead of the seed design
        params: Parameter assignment (mm); rows not named keep the seed defaults

    Returns:
        The DragReport, also written to drag_report.json

    Raises:
        IoFailureError: If the STL does not exist (before any meshing)
        AutoMeshExhaustedError: If meshing fails (attempt log written)
        SolverError: If the solve fails
    """
    if config.mode != Mode.CFD:
        raise ValueError(f"run_cfd needs mode=Cfd, got {config.mode.value}")
    root = Path(out_dir or config.output_dir)

    with run_session(config, root) as run:
        evaluator = DesignEvaluator(config, stl_path)
        assignment = dict(params or {})

        try:
            result = evaluator.evaluate(assignment, root / "case")
        except AutoMeshExhaustedError as e:
            write_json(root / "mesh_attempts.json", {"attempts": [a.model_dump() for a in e.attempts]})
            run.artifact(root / "mesh_attempts.json")
            raise
        except NotConvergedError as e:
            # Keep the partial field for inspection
            if e.field is not None:
                run.artifact(export_field(e.field, root / "field_partial.vtk"))
            raise
        run.add_timings(result.timings)

        with stage("export", run.timings):
            run.artifact(save_stl(result.body, root / "body.stl"))
            run.artifact(export_mesh_vtk(result.mesh, root / "mesh.vtk"))
            if result.flow is not None:
                run.artifact(export_field(result.flow, root / "field.vtk"))
            if result.case_dir is not None:
                run.artifact(result.case_dir)

        payload = {
            "report": result.report.model_dump(),
            "params": evaluator.build_table(assignment).defaults(),
            "mesh": result.mesh_stats(),
            "conditions": evaluator.conditions.model_dump(),
        }
        run.artifact(write_json(root / REPORT_FILE, payload))

    return result.report
