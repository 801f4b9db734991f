"""
tests/integration/conftest.py - Integration Test Fixtures

The mode runners are exercised end to end with the expensive part of an
evaluation (meshing and the flow solve) replaced by a closed-form drag of
the real instantiated body.
"""

import pytest

from app.core.errors import DivergedError
from app.services.flow import DragReport
from app.services.mesher import DomainBox, MeshAttempt, block_mesh
from app.services.pipeline import DesignEvaluator, Evaluation

_BOX = DomainBox((-1000.0, -600.0, -600.0), (3000.0, 600.0, 600.0))


def closed_form_evaluate(fail_when=None):
    """
    Build a stand-in for DesignEvaluator.evaluate.

    Drag is q * A * Cd with A the body's frontal area and a Cd that is
    smallest for a 450 mm nose. `fail_when(params)` marks designs whose
    solve diverges.
    """

    def evaluate(self, params, case_dir=None):
        body = self.build(params)
        attempts = [MeshAttempt(attempt=1, base_cells=(8, 4, 4), outcome="ok", cell_count=128)]
        if fail_when is not None and fail_when(params):
            error = DivergedError("lattice Mach exceeds 0.3")
            error.mesh_attempts = 1
            raise error

        cond = self.conditions
        area = body.frontal_area(axis=0) / 1e6
        nose = self.build_table(params).get("nose_length").default
        cd = 0.1 + ((nose - 450.0) / 900.0) ** 2
        drag = 0.5 * cond.density * cond.inlet_speed**2 * area * cd
        report = DragReport(
            drag_force=drag,
            lateral_force=(0.0, 0.0),
            reference_area=area,
            drag_coefficient=cd,
            iterations=1,
            reynolds=cond.reynolds(1.0),
            converged=True,
        )
        mesh = block_mesh(_BOX, (8, 4, 4))
        return Evaluation(params, report, attempts, mesh, body, timings={"geometry": 0.0, "solve": 0.0})

    return evaluate


@pytest.fixture
def closed_form_drag(monkeypatch):
    """Patch DesignEvaluator.evaluate; designs with cp1 > 170 mm diverge."""
    calls: list[dict[str, float]] = []
    evaluate = closed_form_evaluate(lambda p: p.get("cp1", 100.0) > 170.0)

    def tracked(self, params, case_dir=None):
        calls.append(dict(params))
        return evaluate(self, params, case_dir)

    monkeypatch.setattr(DesignEvaluator, "evaluate", tracked)
    return calls


@pytest.fixture
def always_diverges(monkeypatch):
    """Patch DesignEvaluator.evaluate so every design fails."""
    monkeypatch.setattr(DesignEvaluator, "evaluate", closed_form_evaluate(lambda p: True))
