"""
app/services/pipeline.py - Design Evaluation Pipeline

Turns one parameter assignment into a drag value:

Pipeline: Parameters → Geometry → Mesh → Solve
          ^^^^^^^^^^^^^^^^^^^^^^^^^^^^^^^^^^^^
                  (this file wires all four)

1. apply the assignment to the seed table and instantiate the surface
2. auto_mesh the body inside its domain box
3. solve with the configured backend:
   - Internal: voxelize the mesh and run the lattice solver
   - ExternalCommand: emit a case directory and run the external command
4. wrap the drag report with mesh statistics and stage timings

Every mode goes through DesignEvaluator, so the three modes can never
disagree on how a design is evaluated.
"""

from dataclasses import dataclass, field
from pathlib import Path

from loguru import logger

from app.core.config import settings
from app.core.errors import AutoMeshExhaustedError, IoFailureError
from app.core.logging import stage
from app.core.run_config import RunConfig, SeedDesign, SolverBackend, validate_against_seed
from app.services.external import emit_external_case, run_external
from app.services.flow import DragReport, FlowConditions, FlowField, compute_turbulence_ic, drag_from_field
from app.services.geometry import external_table, geometry_for
from app.services.lattice import lbm_solve
from app.services.mesher import HexMesh, MeshAttempt, auto_mesh, voxelize
from app.services.parameters import ParameterTable, apply_parameters, builtin_table
from app.services.stl_io import load_stl
from app.services.surface import TriMesh


@dataclass(eq=False)
class Evaluation:
    """Everything one design evaluation produced."""

    params: dict[str, float]
    report: DragReport
    attempts: list[MeshAttempt]
    mesh: HexMesh
    body: TriMesh
    flow: FlowField | None = None  # internal backend only
    case_dir: str | None = None  # external backend only
    timings: dict[str, float] = field(default_factory=dict)

    @property
    def drag(self) -> float:
        return self.report.drag_force

    def mesh_stats(self) -> dict:
        return {
            "cell_count": self.mesh.cell_count,
            "patches": self.mesh.patch_counts(),
            "attempts": [a.model_dump() for a in self.attempts],
        }


def attempt_count(error: Exception) -> int:
    """Mesh attempts recorded on a failed evaluation (0 if meshing never ran)."""
    if isinstance(error, AutoMeshExhaustedError):
        return len(error.attempts)
    return getattr(error, "mesh_attempts", 0)


class DesignEvaluator:
    """
    Evaluates designs of one run configuration.

    Picklable, so data generation can ship it to worker processes.

    Example:
        evaluator = DesignEvaluator(config)
        result = evaluator.evaluate({"x1": 40.0, "x2": 60.0})
        result.drag  # N
    """

    def __init__(self, config: RunConfig, stl_path: str | Path | None = None) -> None:
        """
        Args:
            config: Parsed run configuration
            stl_path: Overrides design.stl_path; evaluates this body unscaled

        Raises:
            IoFailureError: If the STL file is missing or unreadable
            UnknownParameterError / BoundsMismatchError: If the design space does
                not fit the seed table
        """
        self.config = config
        self.conditions = FlowConditions.from_fluid(config.fluid)
        self.external_body: TriMesh | None = None

        design = config.design
        path = stl_path or (design.stl_path if design.seed_design == SeedDesign.EXTERNAL_STL else None)
        if path is not None:
            self.seed = SeedDesign.EXTERNAL_STL
            self.external_body, diagnostics = load_stl(path)
            logger.info(f"loaded {path}: {diagnostics.triangle_count} triangles ({diagnostics.format.value})")
            self.table: ParameterTable = external_table(self.external_body)
        else:
            self.seed = design.seed_design
            self.table = builtin_table(self.seed.value)

        # A CLI-supplied body need not match the configured design space
        if stl_path is None:
            validate_against_seed(config, self.table)

    def build_table(self, params: dict[str, float]) -> ParameterTable:
        return apply_parameters(self.table, params)

    def build(self, params: dict[str, float]) -> TriMesh:
        """Instantiate the body surface (mm) of an assignment."""
        return geometry_for(self.seed, self.build_table(params), external=self.external_body)

    def evaluate(self, params: dict[str, float], case_dir: str | Path | None = None) -> Evaluation:
        """
        Run one design through geometry, meshing and the flow solver.

        Args:
            params: Parameter assignment (mm); unassigned rows keep seed defaults
            case_dir: Case directory for the external backend

        Returns:
            The Evaluation

        Raises:
            AnvilError: Any geometry, mesh or solver failure. Failures after
                meshing carry the attempt count as `mesh_attempts`.
        """
        timings: dict[str, float] = {}

        # 1. Geometry
        with stage("geometry", timings):
            body = self.build(params)

        # 2. Mesh
        with stage("mesh", timings):
            mesh, attempts = auto_mesh(body, self.config.mesh)

        # 3. Solve
        try:
            if self.config.solver_backend == SolverBackend.INTERNAL:
                with stage("solve", timings):
                    grid = voxelize(mesh, self.config.mesh.lattice_level)
                    flow = lbm_solve(grid, self.conditions, self.config.solver)
                    report = drag_from_field(flow, body)
                return Evaluation(params, report, attempts, mesh, body, flow=flow, timings=timings)

            if case_dir is None:
                raise IoFailureError("the external backend needs a case directory")
            with stage("solve", timings):
                report = self._solve_external(mesh, body, Path(case_dir))
            return Evaluation(params, report, attempts, mesh, body, case_dir=str(case_dir), timings=timings)
        except Exception as e:
            e.mesh_attempts = len(attempts)  # type: ignore[attr-defined]
            raise

    def _solve_external(self, mesh: HexMesh, body: TriMesh, case_dir: Path) -> DragReport:
        solver = self.config.solver
        lo, hi = body.bbox()
        length = float(hi[0] - lo[0]) / 1000.0
        ic = compute_turbulence_ic(self.conditions, solver.turbulence_length_fraction * length, solver.c_mu)
        case = emit_external_case(
            mesh,
            self.conditions,
            ic,
            case_dir,
            solver.external_command or (),
            reference_area=body.frontal_area(axis=0) / 1e6,
            body_length=length,
        )
        return run_external(case, solver.timeout_s or settings.external_timeout_s)

    def __call__(self, params: dict[str, float]) -> float:
        """Drag (N) of an assignment; internal backend only."""
        return self.evaluate(params).drag
